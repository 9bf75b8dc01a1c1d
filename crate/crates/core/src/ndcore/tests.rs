use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect(),
    )
}

#[test]
fn layer_norm_examples() {
    let ones = Tensor::<f64>::filled(&[3], 1.0);
    let zeros = Tensor::<f64>::zeros(&[3]);
    let y = layer_norm(&Tensor::matrix(1, 3, vec![5.0, 5.0, 5.0]), &ones, &zeros, 1e-5);
    assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

    let ones2 = Tensor::<f64>::filled(&[2], 1.0);
    let zeros2 = Tensor::<f64>::zeros(&[2]);
    let y = layer_norm(&Tensor::matrix(1, 2, vec![1.0, 3.0]), &ones2, &zeros2, 1e-12);
    assert!((y.data()[0] + 1.0).abs() < 1e-9);
    assert!((y.data()[1] - 1.0).abs() < 1e-9);

    let bias = Tensor::<f64>::matrix(1, 2, vec![0.3, -0.7]);
    let y = layer_norm(&Tensor::matrix(1, 2, vec![4.0, -9.0]), &zeros2, &bias, 1e-5);
    assert_eq!(y.data(), bias.data());
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor::<f64>(&mut rng, 5, 7);
    let y = layer_norm(&x, &Tensor::filled(&[7], 1.0), &Tensor::zeros(&[7]), 1e-12);
    for i in 0..5 {
        let r = y.row(i);
        let mean = r.iter().sum::<f64>() / 7.0;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn attention_equal_scores_average_values() {
    let q = Tensor::<f64>::matrix(1, 2, vec![1.0, 0.0]);
    let k = Tensor::matrix(2, 2, vec![0.5, 0.2, 0.5, -0.3]);
    let v = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 6.0]);
    let out = multihead_attention(&q, &k, &v, 1, None).unwrap();
    assert_eq!(out.data(), &[2.0, 4.0]);
}

#[test]
fn attention_mask_excluding_second_key_returns_first_value() {
    let q = Tensor::<f64>::matrix(1, 2, vec![0.3, -0.1]);
    let k = Tensor::matrix(2, 2, vec![0.5, 0.2, 9.0, 9.0]);
    let v = Tensor::matrix(2, 2, vec![1.5, -2.0, 3.0, 6.0]);
    let out = multihead_attention(&q, &k, &v, 1, Some(&[true, false])).unwrap();
    assert_eq!(out.data(), &[1.5, -2.0]);
}

#[test]
fn attention_softmax_weights_follow_scores() {
    // Scores ln 2 and 0 with a one-dimensional head (scale 1).
    let q = Tensor::<f64>::matrix(1, 1, vec![1.0]);
    let k = Tensor::matrix(2, 1, vec![2f64.ln(), 0.0]);
    let v = Tensor::matrix(2, 1, vec![3.0, 9.0]);
    let out = multihead_attention(&q, &k, &v, 1, None).unwrap();
    assert!((out.data()[0] - (2.0 / 3.0 * 3.0 + 1.0 / 3.0 * 9.0)).abs() < 1e-12);
}

#[test]
fn attention_fully_masked_row_errors() {
    let q = Tensor::<f32>::matrix(2, 2, vec![0.0; 4]);
    let k = Tensor::matrix(2, 2, vec![0.0; 4]);
    let v = Tensor::matrix(2, 2, vec![0.0; 4]);
    let err = multihead_attention(&q, &k, &v, 1, Some(&[true, true, false, false])).unwrap_err();
    assert_eq!(err, NdError::FullyMasked);
    assert_eq!(err.to_string(), "fully masked attention row");
}

#[test]
fn attention_rejects_indivisible_heads() {
    let t = Tensor::<f32>::matrix(1, 3, vec![0.0; 3]);
    assert!(matches!(
        multihead_attention(&t, &t, &t, 2, None),
        Err(NdError::ShapeMismatch(_))
    ));
}

#[test]
fn attention_ignores_masked_key_contents() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (nq, nk, d) = (4, 5, 8);
    let q = rand_tensor::<f64>(&mut rng, nq, d);
    let k = rand_tensor::<f64>(&mut rng, nk, d);
    let v = rand_tensor::<f64>(&mut rng, nk, d);
    // causal-style: query i sees keys 0..=i
    let mask: Vec<bool> = (0..nq).flat_map(|i| (0..nk).map(move |j| j <= i)).collect();
    let base = multihead_attention(&q, &k, &v, 2, Some(&mask)).unwrap();
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for j in nq..nk {
        for x in k2.row_mut(j) {
            *x += 100.0;
        }
        for x in v2.row_mut(j) {
            *x -= 50.0;
        }
    }
    let perturbed = multihead_attention(&q, &k2, &v2, 2, Some(&mask)).unwrap();
    for (a, b) in base.data().iter().zip(perturbed.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

fn structured(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    ctx: Option<(&Tensor<f64>, &Tensor<f64>)>,
    heads: usize,
    layout: AttnLayout,
) -> Tensor<f64> {
    let mut tape = Tape::no_grad();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let c = ctx.map(|(a, b)| (tape.constant(a.clone()), tape.constant(b.clone())));
    let out = tape.attention(qv, kv, vv, c, heads, layout).unwrap();
    tape.value(out).clone()
}

fn stack(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut d = a.data().to_vec();
    d.extend_from_slice(b.data());
    Tensor::matrix(a.rows() + b.rows(), a.cols(), d)
}

#[test]
fn block_layout_matches_dense_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, size, d) = (12, 4, 8);
    let q = rand_tensor::<f64>(&mut rng, n, d);
    let k = rand_tensor::<f64>(&mut rng, n, d);
    let v = rand_tensor::<f64>(&mut rng, n, d);
    let mask: Vec<bool> = (0..n)
        .flat_map(|i| (0..n).map(move |j| i / size == j / size))
        .collect();
    let dense = multihead_attention(&q, &k, &v, 2, Some(&mask)).unwrap();
    let blocks = structured(&q, &k, &v, None, 2, AttnLayout::Blocks { size });
    for (a, b) in dense.data().iter().zip(blocks.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn column_layout_with_context_matches_train_test_mask() {
    // Rows laid out as row * positions + position; the first `n_train` rows
    // form the context. Train rows see train rows, test rows see train rows
    // plus themselves, all within the same position.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (positions, n_train, n_test, d) = (3, 4, 3, 4);
    let train_q = rand_tensor::<f64>(&mut rng, n_train * positions, d);
    let train_k = rand_tensor::<f64>(&mut rng, n_train * positions, d);
    let train_v = rand_tensor::<f64>(&mut rng, n_train * positions, d);
    let test_q = rand_tensor::<f64>(&mut rng, n_test * positions, d);
    let test_k = rand_tensor::<f64>(&mut rng, n_test * positions, d);
    let test_v = rand_tensor::<f64>(&mut rng, n_test * positions, d);

    let all_q = stack(&train_q, &test_q);
    let all_k = stack(&train_k, &test_k);
    let all_v = stack(&train_v, &test_v);
    let n = (n_train + n_test) * positions;
    let split = n_train * positions;
    let mask: Vec<bool> = (0..n)
        .flat_map(|i| {
            (0..n).map(move |j| {
                i % positions == j % positions && (j < split || i == j)
            })
        })
        .collect();
    let dense = multihead_attention(&all_q, &all_k, &all_v, 2, Some(&mask)).unwrap();

    let layout = AttnLayout::Columns { positions };
    let tr = structured(&train_q, &train_k, &train_v, None, 2, layout.clone());
    let te = structured(&test_q, &test_k, &test_v, Some((&train_k, &train_v)), 2, layout);
    let blocked = stack(&tr, &te);
    for (a, b) in dense.data().iter().zip(blocked.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// A differentiable program evaluated at either precision.
trait Program {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>>;
    fn run<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var;
}

/// Scalarizes an output with fixed random weights so every entry matters.
fn scalarize<T: Scalar>(tape: &mut Tape<T>, out: Var, seed: u64) -> Var {
    let (m, n) = (tape.value(out).rows(), tape.value(out).cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Tensor<T> = Tensor::matrix(n, 1, (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect());
    let w: Vec<T> = (0..m).map(|_| T::of(rng.gen_range(0.1..1.0))).collect();
    let rv = tape.constant(r);
    let lin = tape.matmul(out, rv);
    let lin = tape.sum_all(lin);
    let quad = tape.weighted_sq_sum(out, w);
    tape.add(lin, quad)
}

fn check_both_precisions<P: Program>(p: &P, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = p.inputs(&mut rng);
    let named: Vec<(String, Tensor<f64>)> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("x{i}"), t.clone()))
        .collect();
    let err64 = grad_check::<NdError, _>(&named, 1e-6, |tape, v| Ok(p.run(tape, v))).unwrap();
    assert!(err64 < 1e-5, "f64 gradient error {err64}");

    // f32 analytic gradient against f64 central differences.
    let mut tape32 = Tape::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape32.param(t.cast())).collect();
    let loss = p.run(&mut tape32, &vars);
    let g32 = tape32.backward(loss).unwrap();
    let mut tape64 = Tape::<f64>::new();
    let vars64: Vec<Var> = inputs.iter().map(|t| tape64.param(t.clone())).collect();
    let loss64 = p.run(&mut tape64, &vars64);
    let g64 = tape64.backward(loss64).unwrap();
    for (a, b) in vars.iter().zip(&vars64) {
        let ga = g32.get(*a).unwrap();
        let gb = g64.get(*b).unwrap();
        for (x, y) in ga.data().iter().zip(gb.data()) {
            let err = (x.f64() - y).abs() / y.abs().max(1.0);
            assert!(err < 1e-3, "f32 gradient error {err}");
        }
    }
}

struct LinearGelu(usize, usize, usize);
impl Program for LinearGelu {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![
            rand_tensor(rng, self.0, self.1),
            rand_tensor(rng, self.1, self.2),
            rand_tensor(rng, 1, self.2),
        ]
    }
    fn run<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let y = tape.linear(v[0], v[1], Some(v[2]));
        let y = tape.gelu(y);
        scalarize(tape, y, 1)
    }
}

struct Norm(usize, usize);
impl Program for Norm {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![
            rand_tensor(rng, self.0, self.1),
            rand_tensor(rng, 1, self.1),
            rand_tensor(rng, 1, self.1),
        ]
    }
    fn run<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let y = tape.layer_norm(v[0], v[1], v[2], T::of(1e-5));
        scalarize(tape, y, 2)
    }
}

struct SoftmaxCe(usize, usize);
impl Program for SoftmaxCe {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![rand_tensor(rng, self.0, self.1)]
    }
    fn run<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let s = tape.softmax(v[0]).unwrap();
        let s = scalarize(tape, s, 3);
        let labels: Vec<usize> = (0..self.0).map(|i| i % self.1).collect();
        let ce = tape.cross_entropy_sum(v[0], &labels);
        tape.add(s, ce)
    }
}

struct Attn {
    layout: AttnLayout,
    n_q: usize,
    n_ctx: usize,
    dim: usize,
    heads: usize,
}
impl Program for Attn {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let mut v = vec![
            rand_tensor(rng, self.n_q, self.dim),
            rand_tensor(rng, self.n_q, self.dim),
            rand_tensor(rng, self.n_q, self.dim),
        ];
        if self.n_ctx > 0 {
            v.push(rand_tensor(rng, self.n_ctx, self.dim));
            v.push(rand_tensor(rng, self.n_ctx, self.dim));
        }
        v
    }
    fn run<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let ctx = (v.len() == 5).then(|| (v[3], v[4]));
        let y = tape
            .attention(v[0], v[1], v[2], ctx, self.heads, self.layout.clone())
            .unwrap();
        scalarize(tape, y, 4)
    }
}

struct Reductions(usize, usize);
impl Program for Reductions {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![rand_tensor(rng, self.0 * 2, self.1), rand_tensor(rng, 1, self.1)]
    }
    fn run<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let m = self.0 * 2;
        let idx: Vec<usize> = (0..m).rev().step_by(2).collect();
        let g = tape.gather_rows(v[0], &idx);
        let rep = tape.repeat_row(v[1], self.0);
        let s = tape.sub(g, rep);
        let c = tape.concat_rows(&[s, v[0]]);
        let grouped = tape.sum_row_groups(c, self.0);
        let combo = tape.row_combine(
            v[0],
            vec![vec![(0, T::of(0.5)), (m - 1, T::of(-2.0))], vec![(1, T::one())]],
        );
        let mean = tape.mean_rows(grouped);
        let shifted = tape.add_row(combo, mean);
        let scaled = tape.scale(shifted, T::of(1.7));
        let a = scalarize(tape, scaled, 5);
        let b = scalarize(tape, grouped, 6);
        tape.add(a, b)
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..6u64 {
        let (a, b, c) = (
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
        );
        check_both_precisions(&LinearGelu(a, b, c), trial);
        check_both_precisions(&Norm(a, b.max(2)), trial);
        check_both_precisions(&SoftmaxCe(a, b.max(2)), trial);
        check_both_precisions(&Reductions(a, c), trial);
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mask: Vec<bool> = (0..6).flat_map(|i| (0..6).map(move |j| (i + j) % 3 != 0 || i == j)).collect();
    let cases = [
        Attn { layout: AttnLayout::Dense { mask: None }, n_q: 5, n_ctx: 0, dim: 8, heads: 2 },
        Attn { layout: AttnLayout::Dense { mask: Some(mask) }, n_q: 6, n_ctx: 0, dim: 4, heads: 1 },
        Attn { layout: AttnLayout::Blocks { size: 3 }, n_q: 6, n_ctx: 0, dim: 8, heads: 4 },
        Attn { layout: AttnLayout::Columns { positions: 2 }, n_q: 6, n_ctx: 0, dim: 4, heads: 2 },
        Attn { layout: AttnLayout::Columns { positions: 2 }, n_q: 4, n_ctx: 6, dim: 4, heads: 2 },
    ];
    for (i, case) in cases.iter().enumerate() {
        check_both_precisions(case, 100 + i as u64);
    }
}

#[test]
fn grad_check_examples() {
    let p = vec![("x".to_string(), Tensor::<f64>::scalar(2.0))];
    let err = grad_check::<NdError, _>(&p, 1e-4, |tape, v| Ok(tape.scale(v[0], 3.0))).unwrap();
    assert!(err < 1e-9);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::matrix(1, 1, vec![1.5]));
    let y = tape.weighted_sq_sum(x, vec![1.0]);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0]);
    let p = vec![("x".to_string(), Tensor::<f64>::matrix(1, 1, vec![1.5]))];
    let err = grad_check::<NdError, _>(&p, 1e-5, |tape, v| Ok(tape.weighted_sq_sum(v[0], vec![1.0])))
        .unwrap();
    assert!(err < 1e-8);

    let mut tape = Tape::<f64>::new();
    let z = tape.param(Tensor::matrix(1, 2, vec![0.0, 0.0]));
    let ce = tape.cross_entropy_sum(z, &[0]);
    let g = tape.backward(ce).unwrap();
    assert_eq!(g.get(z).unwrap().data(), &[-0.5, 0.5]);
}

#[test]
fn grad_check_reports_non_finite_gradient_by_name() {
    let p = vec![("weights".to_string(), Tensor::<f64>::scalar(1.0))];
    let err = grad_check::<NdError, _>(&p, 1e-5, |tape, v| Ok(tape.scale(v[0], f64::INFINITY)))
        .unwrap_err();
    assert_eq!(err, NdError::NonFiniteGradient("weights".into()));
}

#[test]
fn every_parameter_gets_gradient_of_its_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(rand_tensor(&mut rng, 4, 3));
    let w = tape.param(rand_tensor(&mut rng, 3, 5));
    let b = tape.param(Tensor::zeros(&[5]));
    let unused = tape.param(rand_tensor(&mut rng, 2, 2));
    let y = tape.linear(x, w, Some(b));
    let loss = tape.sum_all(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().shape(), &[3, 5]);
    assert_eq!(g.get(b).unwrap().shape(), &[5]);
    assert!(g.get(x).is_none());
    assert!(g.get(unused).is_none());
}

#[test]
fn no_grad_tape_refuses_backward() {
    let mut tape = Tape::<f32>::no_grad();
    let x = tape.param(Tensor::scalar(1.0));
    let y = tape.sum_all(x);
    assert_eq!(tape.backward(y).unwrap_err(), NdError::NotRecording);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-30.0f32..30.0, 1..24)) {
        let n = values.len();
        let t = Tensor::matrix(1, n, values).softmax(1).unwrap();
        let total: f32 = t.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(t.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(
        values in proptest::collection::vec(-10.0f64..10.0, 2..10),
        shift in -50.0f64..50.0,
    ) {
        let n = values.len();
        let a = Tensor::matrix(1, n, values.clone()).softmax(1).unwrap();
        let b = Tensor::matrix(1, n, values.iter().map(|v| v + shift).collect()).softmax(1).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}
