//! The self-explaining network: encoders, alternating attention with
//! train/test masking, and the base and per-feature decoders.

mod config;
mod context;
mod forward;
mod params;

pub use config::ModelConfig;
pub use context::{predict_explain, FittedContext};
pub use forward::{encode_features, encode_targets, forward_on_tape, FeatureStats, ParamVars, TapeForward};
pub use params::{param_count, param_shapes, Params};

pub(crate) use forward::{
    additive_logits, base_decode, feature_tokens, interleave, shap_decode, test_pass,
    test_target_tokens, train_pass, train_target_tokens,
};

use serde::Serialize;
use thiserror::Error;

use crate::ndcore::{NdError, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("empty context")]
    EmptyContext,
    #[error("expected {expected} features, got {got}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error(transparent)]
    Nd(NdError),
}

impl From<NdError> for ModelError {
    fn from(e: NdError) -> Self {
        match e {
            NdError::EmptyContext => ModelError::EmptyContext,
            other => ModelError::Nd(other),
        }
    }
}

/// Decomposed prediction for one test row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation<T: Scalar = f32> {
    /// Episode-level base logits, length C.
    pub base: Vec<T>,
    /// `phi[f][c]`: contribution of feature `f` to class `c`.
    pub phi: Vec<Vec<T>>,
    /// `base + (phi[0] + ... + phi[F-1])`, as emitted by the network.
    pub logits: Vec<T>,
}

impl<T: Scalar> Explanation<T> {
    /// Softmax of the logits.
    pub fn probabilities(&self) -> Vec<T> {
        let m = self
            .logits
            .iter()
            .copied()
            .fold(T::neg_infinity(), T::max);
        let e: Vec<T> = self.logits.iter().map(|&l| (l - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Largest |logit - (base + ordered phi sum)|. Zero by construction.
    pub fn additivity_residual(&self) -> T {
        let c = self.base.len();
        (0..c)
            .map(|k| {
                let mut s = T::zero();
                for row in &self.phi {
                    s = s + row[k];
                }
                (self.logits[k] - (s + self.base[k])).abs()
            })
            .fold(T::zero(), T::max)
    }

    pub fn num_features(&self) -> usize {
        self.phi.len()
    }
}
