use serde::{Deserialize, Serialize};

use super::ModelError;

/// Network shape. `Default` is the published configuration; [`ModelConfig::desk`]
/// is the reduced shape used for single-machine training runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    /// Normalized feature values are clipped to `[-clip, clip]`.
    pub clip: f64,
    /// Train-split standard deviations below this are replaced by 1.
    pub std_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 4,
            embed_dim: 96,
            hidden_dim: 192,
            classes: 2,
            clip: 10.0,
            std_floor: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Desk-scale shape: same depth pattern with a narrower embedding.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 4,
            embed_dim: 32,
            hidden_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers < 1 {
            return Err(ModelError::Config("layers must be >= 1".into()));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.classes < 2 {
            return Err(ModelError::Config("classes must be >= 2".into()));
        }
        if self.hidden_dim == 0 {
            return Err(ModelError::Config("hidden_dim must be >= 1".into()));
        }
        if !(self.clip > 0.0) || !(self.std_floor > 0.0) {
            return Err(ModelError::Config("clip and std_floor must be positive".into()));
        }
        Ok(())
    }
}
