//! Minimal dense-tensor core with reverse-mode gradients.
//!
//! Only the operations the transformer and its losses need are provided:
//! affine maps, GELU, layer normalization, softmax, multi-head attention with
//! structured or dense masks, cross-entropy and a few row reductions.

mod attention;
mod scalar;
mod tape;
mod tensor;

pub use attention::AttnLayout;
pub use scalar::{gemm, Scalar, Trans};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("fully masked attention row")]
    FullyMasked,
    #[error("empty context")]
    EmptyContext,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tape was built without gradient recording")]
    NotRecording,
    #[error("non-finite analytic gradient for parameter `{0}`")]
    NonFiniteGradient(String),
}

/// Layer normalization of each row of `x` over its last axis.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let g = tape.constant(gain.clone());
    let b = tape.constant(bias.clone());
    let y = tape.layer_norm(xv, g, b, eps);
    tape.value(y).clone()
}

/// Multi-head scaled dot-product attention on projected `q`, `k`, `v`.
///
/// `mask[i * n_keys + j] == false` forbids query `i` from attending key `j`;
/// forbidden scores become `-inf` before the softmax.
pub fn multihead_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>, NdError> {
    let mut tape = Tape::no_grad();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let layout = AttnLayout::Dense {
        mask: mask.map(<[bool]>::to_vec),
    };
    let out = tape.attention(qv, kv, vv, None, heads, layout)?;
    Ok(tape.value(out).clone())
}

/// Compares reverse-mode gradients with central differences.
///
/// `program` builds a scalar from the parameter leaves it is handed. Returns
/// the largest `|analytic - numeric| / max(1, |numeric|)` over all parameter
/// entries.
pub fn grad_check<E, F>(params: &[(String, Tensor<f64>)], eps: f64, program: F) -> Result<f64, E>
where
    E: From<NdError>,
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = program(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = program(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut worst = 0.0f64;
    for (p, (name, _)) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[p])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(values[p].shape()));
        if !analytic.all_finite() {
            return Err(NdError::NonFiniteGradient(name.clone()).into());
        }
        for i in 0..values[p].len() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + eps;
            let up = eval(&values)?;
            values[p].data_mut()[i] = orig - eps;
            let down = eval(&values)?;
            values[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
