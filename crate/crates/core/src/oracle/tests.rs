use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::shaploss::FnModel;

/// A value function given directly as a table over coalition bitmasks.
struct Table {
    f: usize,
    c: usize,
    v: Vec<Vec<f64>>,
}

impl ValueFunction for Table {
    fn num_features(&self) -> usize {
        self.f
    }
    fn num_classes(&self) -> usize {
        self.c
    }
    fn values(&self, coalitions: &[Coalition]) -> Result<Vec<Vec<f64>>, OracleError> {
        Ok(coalitions
            .iter()
            .map(|s| {
                let bits: usize = s.indices().iter().map(|j| 1 << j).sum();
                self.v[bits].clone()
            })
            .collect())
    }
}

fn random_table(f: usize, c: usize, seed: u64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Table {
        f,
        c,
        v: (0..1 << f)
            .map(|_| (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect(),
    }
}

/// A small random tanh network standing in for a trained model.
fn random_net(f: usize, c: usize, seed: u64) -> FnModel<impl Fn(&[f64]) -> Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 6;
    let w1: Vec<f64> = (0..f * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w2: Vec<f64> = (0..h * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FnModel {
        classes: c,
        f: move |x: &[f64]| {
            let hid: Vec<f64> = (0..h)
                .map(|k| (0..f).map(|j| x[j] * w1[j * h + k]).sum::<f64>().tanh())
                .collect();
            (0..c)
                .map(|o| (0..h).map(|k| hid[k] * w2[k * c + o]).sum())
                .collect()
        },
    }
}

fn linear_model() -> FnModel<impl Fn(&[f64]) -> Vec<f64>> {
    FnModel {
        classes: 1,
        f: |x: &[f64]| vec![x[0] + 2.0 * x[1]],
    }
}

#[test]
fn interventional_value_examples() {
    let m = linear_model();
    let bg = vec![vec![0.0, 0.0], vec![2.0, 2.0]];
    let x = [1.0, 1.0];
    let s = Coalition::new(2, &[1]).unwrap();
    assert_eq!(interventional_value(&m, &x, &s, &bg).unwrap(), vec![3.0]);
    assert_eq!(
        interventional_value(&m, &x, &Coalition::full(2), &bg).unwrap(),
        vec![3.0]
    );
    assert_eq!(
        interventional_value(&m, &x, &Coalition::empty(2), &bg).unwrap(),
        vec![(0.0 + 6.0) / 2.0]
    );
    assert_eq!(
        interventional_value(&m, &x, &s, &[]).unwrap_err(),
        OracleError::EmptyBackground
    );
}

#[test]
fn full_coalition_is_unmasked_logits_exactly() {
    let m = random_net(4, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bg: Vec<Vec<f64>> = (0..7)
        .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let x = vec![0.3, -0.2, 0.9, 0.1];
    let v = interventional_value(&m, &x, &Coalition::full(4), &bg).unwrap();
    assert_eq!(v, (m.f)(&x));
}

#[test]
fn linear_model_ground_truth() {
    let w = [2.0, 3.0];
    let m = FnModel {
        classes: 1,
        f: move |x: &[f64]| vec![w[0] * x[0] + w[1] * x[1]],
    };
    let vf = Interventional::new(&m, vec![1.0, 1.0], vec![vec![0.0, 0.0]]).unwrap();
    let e = exact_shapley(&vf).unwrap();
    assert!((e.phi[0][0] - 2.0).abs() < 1e-12 && (e.phi[1][0] - 3.0).abs() < 1e-12);
    let k = kernel_shap(&vf, default_budget(2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((k.phi[0][0] - 2.0).abs() < 1e-12 && (k.phi[1][0] - 3.0).abs() < 1e-12);
    assert_eq!(e.method, Method::Exact);
    assert_eq!(k.method, Method::Kernel);
}

#[test]
fn linear_model_with_background_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for f in 1..=7 {
        let w: Vec<f64> = (0..f).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..f).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let bg: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..f).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let wc = w.clone();
        let m = FnModel {
            classes: 1,
            f: move |r: &[f64]| vec![r.iter().zip(&wc).map(|(a, b)| a * b).sum()],
        };
        let vf = Interventional::new(&m, x.clone(), bg.clone()).unwrap();
        let e = exact_shapley(&vf).unwrap();
        for j in 0..f {
            let mj = bg.iter().map(|r| r[j]).sum::<f64>() / bg.len() as f64;
            assert!((e.phi[j][0] - w[j] * (x[j] - mj)).abs() < 1e-9);
        }
    }
}

#[test]
fn symmetric_features_share_credit() {
    let m = FnModel {
        classes: 1,
        f: |x: &[f64]| vec![(x[0] * x[1]).sin() + x[2]],
    };
    let vf = Interventional::new(&m, vec![0.7, 0.7, 0.1], vec![vec![0.2, 0.2, 0.0], vec![-1.0, -1.0, 3.0]]).unwrap();
    let e = exact_shapley(&vf).unwrap();
    assert!((e.phi[0][0] - e.phi[1][0]).abs() < 1e-12);
}

#[test]
fn single_feature() {
    let t = Table {
        f: 1,
        c: 2,
        v: vec![vec![1.0, -1.0], vec![4.0, 0.5]],
    };
    let e = exact_shapley(&t).unwrap();
    assert_eq!(e.phi, vec![vec![3.0, 1.5]]);
    assert_eq!(e.base_value, vec![1.0, -1.0]);
    let k = kernel_shap(&t, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(k.phi, e.phi);
}

#[test]
fn kernel_matches_exact_with_full_enumeration() {
    for f in 2..=8 {
        for seed in 0..3 {
            let t = random_table(f, 3, seed * 10 + f as u64);
            let e = exact_shapley(&t).unwrap();
            let k = kernel_shap(&t, default_budget(f), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            for j in 0..f {
                for c in 0..3 {
                    assert!((e.phi[j][c] - k.phi[j][c]).abs() < 1e-6, "f={f} j={j}");
                }
            }
            let full = &t.v[(1 << f) - 1];
            for (c, r) in k.reconstructed().iter().enumerate() {
                assert!((r - full[c]).abs() <= 1e-9);
            }
            for (c, r) in e.reconstructed().iter().enumerate() {
                assert!((r - full[c]).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn dummy_feature_gets_zero() {
    let inner = random_net(3, 2, 4);
    let m = FnModel {
        classes: 2,
        f: move |x: &[f64]| (inner.f)(&[x[0], x[1], x[3]]),
    };
    let vf = Interventional::new(
        &m,
        vec![0.5, -0.5, 9.0, 1.0],
        vec![vec![0.0, 1.0, -4.0, 2.0], vec![1.0, 0.0, 3.0, -1.0]],
    )
    .unwrap();
    let e = exact_shapley(&vf).unwrap();
    for c in 0..2 {
        assert!(e.phi[2][c].abs() < 1e-9);
    }
}

#[test]
fn exact_is_linear_in_the_game() {
    let a = random_table(5, 2, 1);
    let b = random_table(5, 2, 2);
    let sum = Table {
        f: 5,
        c: 2,
        v: a.v.iter().zip(&b.v).map(|(x, y)| vec![x[0] + y[0], x[1] + y[1]]).collect(),
    };
    let (ea, eb, es) = (
        exact_shapley(&a).unwrap(),
        exact_shapley(&b).unwrap(),
        exact_shapley(&sum).unwrap(),
    );
    for j in 0..5 {
        for c in 0..2 {
            assert!((es.phi[j][c] - ea.phi[j][c] - eb.phi[j][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn enumeration_limit() {
    let t = Table {
        f: 13,
        c: 1,
        v: Vec::new(),
    };
    assert_eq!(exact_shapley(&t).unwrap_err(), OracleError::TooLarge(13));
    assert!(OracleError::TooLarge(13).to_string().starts_with("enumeration too large"));
}

#[test]
fn sampled_kernel_recovers_additive_games() {
    // Any full-rank design recovers an additive game exactly.
    let f = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let t = Table {
        f,
        c: 1,
        v: (0..1usize << f)
            .map(|bits| vec![0.5 + (0..f).filter(|j| bits >> j & 1 == 1).map(|j| w[j]).sum::<f64>()])
            .collect(),
    };
    assert_eq!(default_budget(f), 2048);
    let k = kernel_shap(&t, 300, &mut rng).unwrap();
    for j in 0..f {
        assert!((k.phi[j][0] - w[j]).abs() < 1e-9);
    }
}

#[test]
fn sampled_kernel_approximates_exact() {
    let f = 8;
    let m = random_net(f, 1, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bg: Vec<Vec<f64>> = (0..20)
        .map(|_| (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let x: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let vf = Interventional::new(&m, x, bg).unwrap();
    let e = exact_shapley(&vf).unwrap();
    let k = kernel_shap(&vf, 200, &mut rng).unwrap();
    let err: f64 = (0..f).map(|j| (e.phi[j][0] - k.phi[j][0]).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = (0..f).map(|j| e.phi[j][0].powi(2)).sum::<f64>().sqrt();
    assert!(err < 0.2 * norm, "{err} vs {norm}");
    assert!((k.reconstructed()[0] - e.reconstructed()[0]).abs() < 1e-9);
}

#[test]
fn tiny_budget_is_rank_deficient() {
    let t = random_table(3, 1, 0);
    assert!(matches!(
        kernel_shap(&t, 3, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(OracleError::RankDeficient { .. })
    ));
    assert!(matches!(
        kernel_shap(&t, 2, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(OracleError::Budget { .. })
    ));
}

#[test]
fn sampled_kernel_is_seeded() {
    let t = random_table(12, 1, 3);
    let a = kernel_shap(&t, 100, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = kernel_shap(&t, 100, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a.phi, b.phi);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn efficiency_always_holds(f in 1usize..7, seed in any::<u64>(), budget_extra in 0usize..40) {
        let t = random_table(f, 2, seed);
        let budget = f + budget_extra;
        let full = t.v[(1 << f) - 1].clone();
        if let Ok(k) = kernel_shap(&t, budget, &mut ChaCha8Rng::seed_from_u64(seed)) {
            for (c, r) in k.reconstructed().iter().enumerate() {
                prop_assert!((r - full[c]).abs() <= 1e-9);
            }
        }
        let e = exact_shapley(&t).unwrap();
        for (c, r) in e.reconstructed().iter().enumerate() {
            prop_assert!((r - full[c]).abs() <= 1e-9);
        }
    }
}
