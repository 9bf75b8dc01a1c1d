//! Reference explainers: the interventional value function, exact Shapley
//! values by enumeration, and KernelSHAP with an exact efficiency constraint.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::ModelError;
use crate::shaploss::{mask_inputs, shapley_kernel_weight, Coalition, RowModel, ShapLossError};

/// Largest feature count for 2^F enumeration.
pub const MAX_EXACT_FEATURES: usize = 12;

/// Rows handed to the model per call when evaluating coalitions.
const EVAL_ROWS: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("enumeration too large: {0} features (limit {MAX_EXACT_FEATURES})")]
    TooLarge(usize),
    #[error("rank-deficient design ({rank} of {needed}) after sampling; use a larger budget")]
    RankDeficient { rank: usize, needed: usize },
    #[error("budget {budget} is below the feature count {features}")]
    Budget { budget: usize, features: usize },
    #[error("empty background set")]
    EmptyBackground,
    #[error("no features to explain")]
    NoFeatures,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Masking(#[from] ShapLossError),
}

/// Which explainer produced an attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Kernel,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionResult {
    pub base_value: Vec<f64>,
    /// `phi[f][c]`.
    pub phi: Vec<Vec<f64>>,
    pub method: Method,
    pub wall: Duration,
}

impl AttributionResult {
    /// `base + sum(phi)` per class, ascending feature order.
    pub fn reconstructed(&self) -> Vec<f64> {
        (0..self.base_value.len())
            .map(|c| self.phi.iter().fold(0.0, |s, r| s + r[c]) + self.base_value[c])
            .collect()
    }
}

/// Coalition -> logit vector for one explained instance.
pub trait ValueFunction {
    fn num_features(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Values of every coalition, in input order.
    fn values(&self, coalitions: &[Coalition]) -> Result<Vec<Vec<f64>>, OracleError>;
}

/// Mean model output over a background set with absent features replaced.
pub struct Interventional<'a, M: RowModel + ?Sized> {
    model: &'a M,
    row: Vec<f64>,
    background: Vec<Vec<f64>>,
}

impl<'a, M: RowModel + ?Sized> Interventional<'a, M> {
    pub fn new(model: &'a M, row: Vec<f64>, background: Vec<Vec<f64>>) -> Result<Self, OracleError> {
        if background.is_empty() {
            return Err(OracleError::EmptyBackground);
        }
        if row.is_empty() {
            return Err(OracleError::NoFeatures);
        }
        Ok(Self {
            model,
            row,
            background,
        })
    }
}

impl<M: RowModel + ?Sized> ValueFunction for Interventional<'_, M> {
    fn num_features(&self) -> usize {
        self.row.len()
    }

    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn values(&self, coalitions: &[Coalition]) -> Result<Vec<Vec<f64>>, OracleError> {
        let c = self.num_classes();
        let b = self.background.len();
        let mut out = vec![vec![0.0; c]; coalitions.len()];
        // Full coalitions are the unmasked row itself, evaluated once.
        let full = self.row.len();
        let mut pending: Vec<usize> = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let flush = |pending: &mut Vec<usize>, rows: &mut Vec<Vec<f64>>, out: &mut Vec<Vec<f64>>| {
            if rows.is_empty() {
                return Ok::<(), OracleError>(());
            }
            let logits = self.model.logits(rows)?;
            for (slot, chunk) in pending.iter().zip(logits.chunks(b)) {
                let acc = &mut out[*slot];
                for l in chunk {
                    for (a, v) in acc.iter_mut().zip(l) {
                        *a += v;
                    }
                }
                for a in acc.iter_mut() {
                    *a /= b as f64;
                }
            }
            pending.clear();
            rows.clear();
            Ok(())
        };
        for (slot, s) in coalitions.iter().enumerate() {
            if s.num_features() != full {
                return Err(ShapLossError::CoalitionMismatch {
                    coalition: s.num_features(),
                    expected: full,
                }
                .into());
            }
            if s.size() == full {
                out[slot] = self.model.logits(std::slice::from_ref(&self.row))?.remove(0);
                continue;
            }
            rows.extend(mask_inputs(&self.row, s, &self.background)?);
            pending.push(slot);
            if rows.len() >= EVAL_ROWS {
                flush(&mut pending, &mut rows, &mut out)?;
            }
        }
        flush(&mut pending, &mut rows, &mut out)?;
        Ok(out)
    }
}

/// Value of a single coalition.
pub fn interventional_value<M: RowModel + ?Sized>(
    model: &M,
    row: &[f64],
    coalition: &Coalition,
    background: &[Vec<f64>],
) -> Result<Vec<f64>, OracleError> {
    let vf = Interventional::new(model, row.to_vec(), background.to_vec())?;
    Ok(vf.values(std::slice::from_ref(coalition))?.remove(0))
}

/// Shapley values by weighted marginal contributions over all 2^F coalitions.
pub fn exact_shapley<V: ValueFunction + ?Sized>(vf: &V) -> Result<AttributionResult, OracleError> {
    let start = Instant::now();
    let f = vf.num_features();
    if f == 0 {
        return Err(OracleError::NoFeatures);
    }
    if f > MAX_EXACT_FEATURES {
        return Err(OracleError::TooLarge(f));
    }
    let c = vf.num_classes();
    let all: Vec<Coalition> = (0..1u64 << f).map(|bits| Coalition::from_bits(f, bits)).collect();
    let v = vf.values(&all)?;
    // weight[k] = k! (F - k - 1)! / F!
    let mut weight = vec![0.0; f];
    for (k, w) in weight.iter_mut().enumerate() {
        let mut x = 1.0 / f as f64;
        // 1 / C(F-1, k) / F
        for i in 0..k {
            x *= (i + 1) as f64 / (f - 1 - i) as f64;
        }
        *w = x;
    }
    let mut phi = vec![vec![0.0; c]; f];
    for bits in 0..1usize << f {
        let k = bits.count_ones() as usize;
        for (j, pj) in phi.iter_mut().enumerate() {
            if bits >> j & 1 == 1 {
                continue;
            }
            let with = bits | 1 << j;
            for cc in 0..c {
                pj[cc] += weight[k] * (v[with][cc] - v[bits][cc]);
            }
        }
    }
    Ok(AttributionResult {
        base_value: v[0].clone(),
        phi,
        method: Method::Exact,
        wall: start.elapsed(),
    })
}

/// Coalition budget used when none is given: full enumeration up to 11
/// features, 2048 sampled coalitions beyond.
pub fn default_budget(f: usize) -> usize {
    if f <= 11 {
        (1usize << f).saturating_sub(2).max(f)
    } else {
        2048
    }
}

/// Proper nonempty coalitions with regression weights: every coalition with
/// its kernel weight when the budget allows, otherwise kernel-proportional
/// samples drawn in complementary pairs with unit weight.
fn design<R: Rng>(f: usize, budget: usize, rng: &mut R) -> Vec<(Coalition, f64)> {
    let proper = (1usize << f) - 2;
    if budget >= proper {
        return (1..(1u64 << f) - 1)
            .map(|bits| {
                let s = Coalition::from_bits(f, bits);
                let w = shapley_kernel_weight(f, s.size()).expect("proper size");
                (s, w)
            })
            .collect();
    }
    let mass: Vec<f64> = (1..f).map(|k| 1.0 / (k * (f - k)) as f64).collect();
    let total: f64 = mass.iter().sum();
    let mut out = Vec::with_capacity(budget);
    while out.len() + 2 <= budget.max(2) {
        let mut u = rng.gen::<f64>() * total;
        let mut k = f - 1;
        for (i, m) in mass.iter().enumerate() {
            if u < *m {
                k = i + 1;
                break;
            }
            u -= m;
        }
        let s = Coalition::new(f, &index::sample(rng, f, k).into_vec()).expect("in range");
        let comp = s.complement();
        out.push((s, 1.0));
        out.push((comp, 1.0));
    }
    out
}

/// KernelSHAP: weighted least squares of an additive surrogate with
/// `base + sum(phi) = v(full)` enforced exactly by eliminating the last
/// feature. One regression per class over a shared design.
pub fn kernel_shap<V: ValueFunction + ?Sized, R: Rng>(
    vf: &V,
    budget: usize,
    rng: &mut R,
) -> Result<AttributionResult, OracleError> {
    let start = Instant::now();
    let f = vf.num_features();
    if f == 0 {
        return Err(OracleError::NoFeatures);
    }
    if budget < f {
        return Err(OracleError::Budget {
            budget,
            features: f,
        });
    }
    let c = vf.num_classes();
    let ends = vf.values(&[Coalition::empty(f), Coalition::full(f)])?;
    let (v0, v1) = (&ends[0], &ends[1]);
    let delta: Vec<f64> = (0..c).map(|k| v1[k] - v0[k]).collect();
    if f == 1 {
        return Ok(AttributionResult {
            base_value: v0.clone(),
            phi: vec![delta],
            method: Method::Kernel,
            wall: start.elapsed(),
        });
    }
    let rows = design(f, budget, rng);
    let coalitions: Vec<Coalition> = rows.iter().map(|(s, _)| s.clone()).collect();
    let values = vf.values(&coalitions)?;

    // y_s - z_sF * delta = sum_{j<F} (z_sj - z_sF) phi_j
    let n = rows.len();
    let p = f - 1;
    let mut a = DMatrix::<f64>::zeros(n, p);
    let mut b = DMatrix::<f64>::zeros(n, c);
    for (i, ((s, w), v)) in rows.iter().zip(&values).enumerate() {
        let sw = w.sqrt();
        let last = s.contains(f - 1) as u8 as f64;
        for j in 0..p {
            a[(i, j)] = sw * (s.contains(j) as u8 as f64 - last);
        }
        for k in 0..c {
            b[(i, k)] = sw * (v[k] - v0[k] - last * delta[k]);
        }
    }
    let qr = a.qr();
    let r = qr.r();
    let rmax = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let rank = (0..p).filter(|&i| r[(i, i)].abs() > 1e-10 * rmax.max(1e-300)).count();
    if rank < p || rmax == 0.0 {
        return Err(OracleError::RankDeficient { rank, needed: p });
    }
    let qtb = qr.q().transpose() * &b;
    let sol = r
        .solve_upper_triangular(&qtb)
        .ok_or(OracleError::RankDeficient { rank, needed: p })?;
    let mut phi = vec![vec![0.0; c]; f];
    for k in 0..c {
        let mut rest = 0.0;
        for j in 0..p {
            phi[j][k] = sol[(j, k)];
            rest += sol[(j, k)];
        }
        phi[f - 1][k] = delta[k] - rest;
    }
    Ok(AttributionResult {
        base_value: v0.clone(),
        phi,
        method: Method::Kernel,
        wall: start.elapsed(),
    })
}

#[cfg(test)]
mod tests;
