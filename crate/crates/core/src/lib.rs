//! In-context tabular classifier whose output head emits additive per-feature
//! attributions. `logits = base + sum(phi)` holds exactly for every
//! prediction, and an auxiliary loss pulls `phi` toward interventional
//! Shapley values during pretraining on synthetic episodes.

pub mod eval;
pub mod model;
pub mod ndcore;
pub mod oracle;
pub mod prior;
pub mod shaploss;
pub mod train;

pub use eval::{fidelity_benchmark, load_csv_dataset, BenchConfig, BenchReport, EvalError, FidelityReport};
pub use model::{predict_explain, Explanation, FittedContext, ModelConfig, ModelError, Params};
pub use oracle::{exact_shapley, kernel_shap, AttributionResult, OracleError};
pub use prior::{sample_episode, Episode, PriorConfig, PriorError};
pub use shaploss::{Coalition, ShapLossConfig, ShapLossError};
pub use train::{load_checkpoint, save_checkpoint, train, Checkpoint, CheckpointError, TrainConfig, TrainError};
