use crate::model::Params;
use crate::ndcore::Tensor;

use super::TrainError;

/// Adam moments for every parameter, in parameter name order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay. Kept at zero.
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &Params<f32>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }
}

/// One bias-corrected Adam update. `grads` follows parameter name order.
pub fn optimizer_step(
    params: &mut Params<f32>,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    for ((name, p), g) in params.iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(TrainError::Gradient(format!(
                "gradient for `{name}` has shape {:?}, expected {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(TrainError::Gradient(format!("non-finite gradient for `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j] as f64;
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + state.eps);
            let wf = *w as f64;
            *w = (wf - lr * (update + state.weight_decay * wf)) as f32;
        }
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Running mean of parameter iterates.
#[derive(Debug, Clone)]
pub struct IterateAverage {
    sum: Vec<Vec<f64>>,
    count: u64,
}

impl IterateAverage {
    pub fn new(params: &Params<f32>) -> Self {
        Self {
            sum: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            count: 0,
        }
    }

    pub fn add(&mut self, params: &Params<f32>) {
        for (acc, (_, t)) in self.sum.iter_mut().zip(params.iter()) {
            for (a, &x) in acc.iter_mut().zip(t.data()) {
                *a += x as f64;
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// The averaged parameters, or `None` before the first iterate.
    pub fn average(&self, like: &Params<f32>) -> Option<Params<f32>> {
        if self.count == 0 {
            return None;
        }
        let mut out = like.clone();
        let n = self.count as f64;
        for (acc, (_, t)) in self.sum.iter().zip(out.iter_mut()) {
            for (x, a) in t.data_mut().iter_mut().zip(acc) {
                *x = (a / n) as f32;
            }
        }
        Some(out)
    }
}
