//! Reverse-mode gradient tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! enough of its inputs to replay the adjoint. [`Tape::backward`] walks the
//! nodes in exact reverse order. A tape built with [`Tape::no_grad`] records
//! values only.

use super::attention::{self, AttnInputs, AttnLayout, AttnShape};
use super::scalar::{gemm, Trans};
use super::{NdError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { a: Var, factor: T },
    AddRow { x: Var, row: Var },
    RepeatRow { row: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax { x: Var },
    Attention(Box<AttnNode<T>>),
    CrossEntropySum { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    SumRowGroups { x: Var, group: usize },
    RowCombine { x: Var, terms: Vec<Vec<(usize, T)>> },
    MeanRows { x: Var },
    WeightedSqSum { x: Var, weights: Vec<T> },
    SumAll { x: Var },
}

struct AttnNode<T> {
    q: Var,
    k: Var,
    v: Var,
    ctx: Option<(Var, Var)>,
    layout: AttnLayout,
    heads: usize,
    probs: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation record plus the values it produced.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn rows_cols<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that keeps values but no adjoint information.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = self.record;
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = rows_cols(self.value(a));
        let (k2, n) = rows_cols(self.value(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        gemm(
            Trans::No,
            Trans::No,
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        let ng = self.ng(&[a, b]);
        self.push(Tensor::matrix(m, n, out), Op::MatMul { a, b }, ng)
    }

    /// `x w + b` with `x: m x in`, `w: in x out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (m, k) = rows_cols(self.value(x));
        let (k2, n) = rows_cols(self.value(w));
        assert_eq!(k, k2, "linear: input width {k} vs weight rows {k2}");
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), n, "linear bias length");
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            Trans::No,
            Trans::No,
            m,
            k,
            n,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            T::one(),
            &mut out,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let ng = self.ng(&inputs);
        self.push(Tensor::matrix(m, n, out), Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("add shape");
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("sub shape");
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Sub { a, b }, ng)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let t = self.value(a).map(|x| x * factor);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale { a, factor }, ng)
    }

    /// Adds `row` (length n) to every row of `x` (m x n).
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (m, n) = rows_cols(self.value(x));
        let r = self.value(row).data();
        assert_eq!(r.len(), n, "add_row width");
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (a, &b) in chunk.iter_mut().zip(r) {
                *a = *a + b;
            }
        }
        let ng = self.ng(&[x, row]);
        self.push(Tensor::matrix(m, n, data), Op::AddRow { x, row }, ng)
    }

    /// Stacks `n` copies of `row` into an `n x len` matrix.
    pub fn repeat_row(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row).data().to_vec();
        let c = r.len();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(&r);
        }
        let ng = self.ng(&[row]);
        self.push(Tensor::matrix(n, c, data), Op::RepeatRow { row }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_value);
        let ng = self.ng(&[x]);
        self.push(t, Op::Gelu { x }, ng)
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let (m, n) = rows_cols(self.value(x));
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        assert_eq!(g.len(), n, "layer_norm gain width");
        assert_eq!(b.len(), n, "layer_norm bias width");
        let xs = self.value(x).data();
        let nf = T::of(n as f64);
        let mut out = vec![T::zero(); m * n];
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out).expect("layer_norm shape");
        let ng = self.ng(&[x, gain, bias]);
        let (xhat, inv_std) = if ng { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NdError> {
        let v = self.value(x);
        let axis = v.shape().len().saturating_sub(1);
        let t = v.softmax(axis)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Softmax { x }, ng))
    }

    /// Multi-head attention over already projected queries, keys and values.
    ///
    /// `ctx` supplies extra context keys/values for [`AttnLayout::Columns`].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        ctx: Option<(Var, Var)>,
        heads: usize,
        layout: AttnLayout,
    ) -> Result<Var, NdError> {
        let (n_q, dim) = rows_cols(self.value(q));
        let (n_k, dk) = rows_cols(self.value(k));
        let (n_v, dv) = rows_cols(self.value(v));
        if dk != dim || dv != dim || n_v != n_k {
            return Err(NdError::ShapeMismatch(format!(
                "attention q {n_q}x{dim}, k {n_k}x{dk}, v {n_v}x{dv}"
            )));
        }
        let n_ctx = match ctx {
            Some((ck, cv)) => {
                let (a, da) = rows_cols(self.value(ck));
                let (b, db) = rows_cols(self.value(cv));
                if a != b || da != dim || db != dim {
                    return Err(NdError::ShapeMismatch("attention context shapes".into()));
                }
                a
            }
            None => 0,
        };
        let shape = AttnShape {
            n_q,
            n_k,
            n_ctx,
            dim,
            heads,
        };
        attention::validate(&layout, &shape, ctx.is_some())?;
        let mut inputs = vec![q, k, v];
        if let Some((ck, cv)) = ctx {
            inputs.extend([ck, cv]);
        }
        let ng = self.ng(&inputs);
        let (out, probs) = {
            let inp = AttnInputs {
                q: self.value(q).data(),
                k: self.value(k).data(),
                v: self.value(v).data(),
                ctx: ctx.map(|(ck, cv)| (self.value(ck).data(), self.value(cv).data())),
            };
            attention::forward(&layout, &shape, &inp, ng)?
        };
        let t = Tensor::matrix(n_q, dim, out);
        Ok(self.push(
            t,
            Op::Attention(Box::new(AttnNode {
                q,
                k,
                v,
                ctx,
                layout,
                heads,
                probs,
            })),
            ng,
        ))
    }

    /// Sum over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (m, c) = rows_cols(self.value(logits));
        assert_eq!(m, labels.len(), "cross_entropy label count");
        let l = self.value(logits).data();
        let mut probs = vec![T::zero(); m * c];
        let mut total = T::zero();
        for i in 0..m {
            let row = &l[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            assert!(labels[i] < c, "label {} out of range for {c} classes", labels[i]);
            total = total + lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropySum {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::matrix(idx.len(), c, data),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "concat_rows width");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = self.ng(parts);
        self.push(
            Tensor::matrix(rows, c, data),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    /// Sums consecutive groups of `group` rows, accumulating in row order.
    pub fn sum_row_groups(&mut self, x: Var, group: usize) -> Var {
        let v = self.value(x);
        let (m, c) = rows_cols(v);
        assert!(group > 0 && m % group == 0, "sum_row_groups: {m} rows, group {group}");
        let mut data = Vec::with_capacity(m / group * c);
        for g in 0..m / group {
            let mut acc = v.row(g * group).to_vec();
            for r in 1..group {
                for (a, &b) in acc.iter_mut().zip(v.row(g * group + r)) {
                    *a = *a + b;
                }
            }
            data.extend(acc);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::matrix(m / group, c, data), Op::SumRowGroups { x, group }, ng)
    }

    /// Each output row is `sum(weight * x[row])` over its term list.
    pub fn row_combine(&mut self, x: Var, terms: Vec<Vec<(usize, T)>>) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut data = vec![T::zero(); terms.len() * c];
        for (o, ts) in terms.iter().enumerate() {
            let out = &mut data[o * c..(o + 1) * c];
            for &(r, w) in ts {
                for (a, &b) in out.iter_mut().zip(v.row(r)) {
                    *a = *a + w * b;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::matrix(terms.len(), c, data),
            Op::RowCombine { x, terms },
            ng,
        )
    }

    /// Column means, as a `1 x n` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (m, c) = rows_cols(v);
        assert!(m > 0, "mean_rows of empty matrix");
        let mut acc = vec![T::zero(); c];
        for i in 0..m {
            for (a, &b) in acc.iter_mut().zip(v.row(i)) {
                *a = *a + b;
            }
        }
        let inv = T::one() / T::of(m as f64);
        for a in &mut acc {
            *a = *a * inv;
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::matrix(1, c, acc), Op::MeanRows { x }, ng)
    }

    /// `sum_i weights[i] * |x_i|^2` over the rows of `x`.
    pub fn weighted_sq_sum(&mut self, x: Var, weights: Vec<T>) -> Var {
        let v = self.value(x);
        assert_eq!(v.rows(), weights.len(), "weighted_sq_sum weight count");
        let total = (0..v.rows())
            .map(|i| weights[i] * v.row(i).iter().map(|&a| a * a).sum::<T>())
            .sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(total), Op::WeightedSqSum { x, weights }, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll { x }, ng)
    }

    /// Gradients of the single-element `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NdError> {
        if !self.record {
            return Err(NdError::NotRecording);
        }
        if self.value(loss).len() != 1 {
            return Err(NdError::ShapeMismatch(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.value(v).shape())
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => self.backprop_product(*a, *b, None, g, grads),
            Op::Linear { x, w, b } => self.backprop_product(*x, *w, *b, g, grads),
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.accumulate(grads, *a, g.map(|x| x * f));
            }
            Op::AddRow { x, row } => {
                self.accumulate(grads, *x, g.clone());
                let mut dr = self.zeros_like(*row);
                for i in 0..g.rows() {
                    for (a, &b) in dr.data_mut().iter_mut().zip(g.row(i)) {
                        *a = *a + b;
                    }
                }
                self.accumulate(grads, *row, dr);
            }
            Op::RepeatRow { row } => {
                let mut dr = self.zeros_like(*row);
                for i in 0..g.rows() {
                    for (a, &b) in dr.data_mut().iter_mut().zip(g.row(i)) {
                        *a = *a + b;
                    }
                }
                self.accumulate(grads, *row, dr);
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gy)| gy * gelu_grad(a))
                    .collect();
                let t = Tensor::new(xv.shape().to_vec(), data).expect("gelu grad");
                self.accumulate(grads, *x, t);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let m = g.rows();
                let gv = self.value(*gain).data();
                let mut dx = self.zeros_like(*x);
                let mut dgain = self.zeros_like(*gain);
                let mut dbias = self.zeros_like(*bias);
                let nf = T::of(n as f64);
                for i in 0..m {
                    let gy = g.row(i);
                    let xh = &xhat[i * n..(i + 1) * n];
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..n {
                        let d = gy[j] * gv[j];
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * xh[j];
                        dgain.data_mut()[j] = dgain.data()[j] + gy[j] * xh[j];
                        dbias.data_mut()[j] = dbias.data()[j] + gy[j];
                    }
                    let row = dx.row_mut(i);
                    for j in 0..n {
                        let d = gy[j] * gv[j];
                        row[j] = inv_std[i] * (d - sum_d / nf - xh[j] * sum_dx / nf);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = self.zeros_like(*x);
                for i in 0..y.rows() {
                    let yi = y.row(i);
                    let gi = g.row(i);
                    let dot: T = yi.iter().zip(gi).map(|(&a, &b)| a * b).sum();
                    let row = dx.row_mut(i);
                    for j in 0..n {
                        row[j] = yi[j] * (gi[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention(a) => {
                let (n_q, dim) = rows_cols(self.value(a.q));
                let n_k = self.value(a.k).rows();
                let n_ctx = a.ctx.map_or(0, |(ck, _)| self.value(ck).rows());
                let shape = AttnShape {
                    n_q,
                    n_k,
                    n_ctx,
                    dim,
                    heads: a.heads,
                };
                let inp = AttnInputs {
                    q: self.value(a.q).data(),
                    k: self.value(a.k).data(),
                    v: self.value(a.v).data(),
                    ctx: a.ctx.map(|(ck, cv)| (self.value(ck).data(), self.value(cv).data())),
                };
                let ag = attention::backward(&a.layout, &shape, &inp, &a.probs, g.data());
                self.accumulate(grads, a.q, Tensor::matrix(n_q, dim, ag.dq));
                self.accumulate(grads, a.k, Tensor::matrix(n_k, dim, ag.dk));
                self.accumulate(grads, a.v, Tensor::matrix(n_k, dim, ag.dv));
                if let Some((ck, cv)) = a.ctx {
                    self.accumulate(grads, ck, Tensor::matrix(n_ctx, dim, ag.dck));
                    self.accumulate(grads, cv, Tensor::matrix(n_ctx, dim, ag.dcv));
                }
            }
            Op::CrossEntropySum {
                logits,
                labels,
                probs,
            } => {
                let gy = g.data()[0];
                let c = self.value(*logits).cols();
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] = d[i * c + l] - T::one();
                }
                for x in &mut d {
                    *x = *x * gy;
                }
                self.accumulate(grads, *logits, Tensor::matrix(labels.len(), c, d));
            }
            Op::GatherRows { x, idx } => {
                let mut dx = self.zeros_like(*x);
                for (o, &i) in idx.iter().enumerate() {
                    for (a, &b) in dx.row_mut(i).iter_mut().zip(g.row(o)) {
                        *a = *a + b;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows { parts } => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                    let t = Tensor::new(self.value(p).shape().to_vec(), slice).expect("concat grad");
                    self.accumulate(grads, p, t);
                    offset += r;
                }
            }
            Op::SumRowGroups { x, group } => {
                let mut dx = self.zeros_like(*x);
                for r in 0..dx.rows() {
                    dx.row_mut(r).copy_from_slice(g.row(r / group));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowCombine { x, terms } => {
                let mut dx = self.zeros_like(*x);
                for (o, ts) in terms.iter().enumerate() {
                    for &(r, w) in ts {
                        for (a, &b) in dx.row_mut(r).iter_mut().zip(g.row(o)) {
                            *a = *a + w * b;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanRows { x } => {
                let m = self.value(*x).rows();
                let inv = T::one() / T::of(m as f64);
                let mut dx = self.zeros_like(*x);
                for r in 0..m {
                    for (a, &b) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                        *a = b * inv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedSqSum { x, weights } => {
                let gy = g.data()[0];
                let xv = self.value(*x);
                let mut dx = self.zeros_like(*x);
                let two = T::of(2.0);
                for (i, &w) in weights.iter().enumerate() {
                    for (a, &b) in dx.row_mut(i).iter_mut().zip(xv.row(i)) {
                        *a = two * w * b * gy;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll { x } => {
                let gy = g.data()[0];
                self.accumulate(grads, *x, Tensor::filled(self.value(*x).shape(), gy));
            }
        }
    }

    fn backprop_product(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (m, k) = rows_cols(self.value(x));
        let n = self.value(w).cols();
        if self.nodes[x.0].needs_grad {
            let mut dx = vec![T::zero(); m * k];
            gemm(
                Trans::No,
                Trans::Yes,
                m,
                n,
                k,
                T::one(),
                g.data(),
                self.value(w).data(),
                T::zero(),
                &mut dx,
            );
            let t = Tensor::new(self.value(x).shape().to_vec(), dx).expect("dx shape");
            self.accumulate(grads, x, t);
        }
        if self.nodes[w.0].needs_grad {
            let mut dw = vec![T::zero(); k * n];
            gemm(
                Trans::Yes,
                Trans::No,
                k,
                m,
                n,
                T::one(),
                self.value(x).data(),
                g.data(),
                T::zero(),
                &mut dw,
            );
            let t = Tensor::new(self.value(w).shape().to_vec(), dw).expect("dw shape");
            self.accumulate(grads, w, t);
        }
        if let Some(b) = b {
            if self.nodes[b.0].needs_grad {
                let mut db = self.zeros_like(b);
                for i in 0..m {
                    for (a, &v) in db.data_mut().iter_mut().zip(g.row(i)) {
                        *a = *a + v;
                    }
                }
                self.accumulate(grads, b, db);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

// 0.5 * (1 + tanh(u)) == 1 / (1 + exp(-2u)), one exp instead of a tanh.
fn gelu_gate<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::one() / (T::one() + (T::of(-2.0) * u).exp())
}

fn gelu_value<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = gelu_gate(x);
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    s + T::of(2.0) * x * s * (T::one() - s) * du
}
