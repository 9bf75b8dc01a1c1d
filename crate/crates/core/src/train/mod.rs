//! Training loop over prior episodes, the optimizer, and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use optim::{clip_global_norm, optimizer_step, AdamState, IterateAverage};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

use crate::model::{predict_explain, ModelConfig, ModelError, ParamVars, Params};
use crate::ndcore::Tape;
use crate::prior::{sample_episode, stream_rng, Episode, PriorConfig, PriorError};
use crate::shaploss::{batch_loss, ShapLossConfig, ShapLossError, ShapPlan};

const STREAM_INIT: u64 = 1;
const STREAM_SHAP: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Gradient(String),
    #[error("non-finite loss at step {step} (prior seed {prior_seed}, episodes {first_episode}..{end_episode})")]
    NonFiniteLoss {
        step: usize,
        prior_seed: u64,
        first_episode: u64,
        end_episode: u64,
    },
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Loss(#[from] ShapLossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("loss log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Episode shape. Its `seed` is replaced by one derived from `seed`.
    pub prior: PriorConfig,
    pub model: ModelConfig,
    pub shap: ShapLossConfig,
    /// Validation cadence in steps; 0 disables validation.
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Average iterates over the second half of training and checkpoint the average.
    pub iterate_averaging: bool,
}

impl Default for TrainConfig {
    /// Desk-scale run.
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            prior: PriorConfig::default(),
            model: ModelConfig::desk(),
            shap: ShapLossConfig {
                warmup_steps: 300,
                ..ShapLossConfig::default()
            },
            eval_every: 250,
            checkpoint_path: None,
            loss_log: None,
            grad_clip: 1.0,
            iterate_averaging: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps < 1 {
            return Err(TrainError::Config("steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(TrainError::Config("grad_clip must be > 0".into()));
        }
        self.prior.validate()?;
        self.model.validate()?;
        self.shap.validate()?;
        Ok(())
    }

    /// Seed of the training episode stream.
    pub fn prior_seed(&self) -> u64 {
        derive_seed(self.seed, "prior")
    }

    /// Seed of the held-out validation stream.
    pub fn validation_seed(&self) -> u64 {
        derive_seed(self.seed, "validation")
    }

    fn prior_cfg(&self, seed: u64) -> PriorConfig {
        PriorConfig {
            seed,
            ..self.prior.clone()
        }
    }
}

/// Independent 64-bit seed for the substream named `tag`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub ce: f64,
    pub l_shap: f64,
    pub total: f64,
    pub wall_ms: u128,
}

/// Validation metrics on the held-out prior episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationRecord {
    pub step: usize,
    pub ce: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
    pub validation: Vec<ValidationRecord>,
}

/// Mean test-row cross-entropy and accuracy over labelled episodes.
pub fn evaluate_episodes(
    episodes: &[Episode],
    params: &Params<f32>,
    cfg: &ModelConfig,
) -> Result<(f64, f64), ModelError> {
    let (mut ce, mut hits, mut n) = (0.0, 0usize, 0usize);
    for ep in episodes {
        let labels = ep.test_y.as_deref().unwrap_or(&[]);
        for (e, &y) in predict_explain(ep, params, cfg)?.iter().zip(labels) {
            let p = e.probabilities();
            ce -= (p[y] as f64).max(1e-12).ln();
            let argmax = (0..p.len()).fold(0, |b, c| if p[c] > p[b] { c } else { b });
            hits += (argmax == y) as usize;
            n += 1;
        }
    }
    Ok((ce / n.max(1) as f64, hits as f64 / n.max(1) as f64))
}

/// Episodes `[first, first + count)` of the stream with `seed`.
pub fn prior_episodes(prior: &PriorConfig, seed: u64, first: u64, count: usize) -> Result<Vec<Episode>, PriorError> {
    let cfg = PriorConfig {
        seed,
        ..prior.clone()
    };
    (first..first + count as u64).map(|i| sample_episode(&cfg, i)).collect()
}

/// Trains from scratch. Fully determined by `cfg`.
pub fn train(cfg: &TrainConfig) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    let prior_seed = cfg.prior_seed();
    let prior_cfg = cfg.prior_cfg(prior_seed);
    let mut params = Params::<f32>::init(&cfg.model, &mut stream_rng(cfg.seed, STREAM_INIT));
    let mut adam = AdamState::new(&params);
    let mut average = IterateAverage::new(&params);
    let average_from = cfg.steps / 2;
    let validation = if cfg.eval_every > 0 {
        prior_episodes(&cfg.prior, cfg.validation_seed(), 0, 32)?
    } else {
        Vec::new()
    };
    let mut log = match &cfg.loss_log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "step,ce,l_shap,total,wall_ms")?;
            Some(w)
        }
        None => None,
    };
    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut val_records = Vec::new();

    for step in 0..cfg.steps {
        let first = (step * cfg.batch_size) as u64;
        let batch: Vec<(Episode, Option<ShapPlan>)> = (0..cfg.batch_size)
            .map(|b| {
                let idx = first + b as u64;
                let ep = sample_episode(&prior_cfg, idx)?;
                let mut rng = stream_rng(derive_seed(cfg.seed, "shap") ^ idx, STREAM_SHAP);
                let plan = ShapPlan::sample(&ep, &cfg.shap, &mut rng);
                Ok((ep, plan))
            })
            .collect::<Result<_, PriorError>>()?;

        let mut tape = Tape::<f32>::new();
        let pv = ParamVars::register(&mut tape, &params, &cfg.model, true);
        let loss = batch_loss(&mut tape, &pv, &cfg.model, &cfg.shap, &batch, step)?;
        if !loss.total_value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                prior_seed,
                first_episode: first,
                end_episode: first + cfg.batch_size as u64,
            });
        }
        let mut grads = tape.backward(loss.total).map_err(ModelError::from)?;
        let mut gs: Vec<_> = pv
            .named()
            .iter()
            .map(|(_, v)| grads.take(*v).expect("parameter gradient"))
            .collect();
        clip_global_norm(&mut gs, cfg.grad_clip);
        optimizer_step(&mut params, &gs, &mut adam, cfg.lr)?;
        if cfg.iterate_averaging && step >= average_from {
            average.add(&params);
        }

        let rec = LossRecord {
            step,
            ce: loss.ce,
            l_shap: loss.l_shap,
            total: loss.total_value,
            wall_ms: start.elapsed().as_millis(),
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{},{},{},{},{}", rec.step, rec.ce, rec.l_shap, rec.total, rec.wall_ms)?;
        }
        losses.push(rec);

        let last = step + 1 == cfg.steps;
        if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || last) {
            let (ce, accuracy) = evaluate_episodes(&validation, &params, &cfg.model)?;
            log::info!("step {} validation ce {ce:.4} accuracy {accuracy:.3}", step + 1);
            val_records.push(ValidationRecord {
                step: step + 1,
                ce,
                accuracy,
            });
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    let final_params = if cfg.iterate_averaging {
        average.average(&params).unwrap_or(params)
    } else {
        params
    };
    let checkpoint = Checkpoint {
        model: cfg.model.clone(),
        shap: cfg.shap.clone(),
        params: final_params,
        step: cfg.steps,
        seed: cfg.seed,
    };
    if let Some(p) = &cfg.checkpoint_path {
        save_checkpoint(&checkpoint, p)?;
    }
    Ok(TrainRun {
        checkpoint,
        losses,
        validation: val_records,
    })
}
