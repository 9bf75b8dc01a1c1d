use super::{
    additive_logits, base_decode, feature_tokens, interleave, shap_decode, test_pass,
    test_target_tokens, train_pass, train_target_tokens, Explanation, FeatureStats, ModelConfig,
    ModelError, ParamVars, Params,
};
use crate::ndcore::{Scalar, Tape, Tensor};
use crate::prior::Episode;

/// Test rows evaluated per inference chunk.
const CHUNK_ROWS: usize = 256;

/// A train split encoded once: normalization statistics, the per-layer
/// keys/values test rows attend to, and the base logits.
///
/// Explaining any number of test rows against a fitted context reuses the
/// train-side computation; results are identical to a full forward pass.
#[derive(Debug, Clone)]
pub struct FittedContext<T: Scalar = f32> {
    cfg: ModelConfig,
    stats: FeatureStats,
    n_train: usize,
    kv: Vec<(Tensor<T>, Tensor<T>)>,
    base: Vec<T>,
}

fn check_rows(rows: &[Vec<f64>], f: usize) -> Result<(), ModelError> {
    for r in rows {
        if r.len() != f {
            return Err(ModelError::FeatureMismatch {
                expected: f,
                got: r.len(),
            });
        }
    }
    Ok(())
}

impl<T: Scalar> FittedContext<T> {
    pub fn fit(
        train_x: &[Vec<f64>],
        train_y: &[usize],
        params: &Params<T>,
        cfg: &ModelConfig,
    ) -> Result<Self, ModelError> {
        if train_x.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        let f = train_x[0].len();
        check_rows(train_x, f)?;
        if train_y.len() != train_x.len() {
            return Err(ModelError::Config(format!(
                "{} train rows but {} labels",
                train_x.len(),
                train_y.len()
            )));
        }
        if let Some(&label) = train_y.iter().find(|&&l| l >= cfg.classes) {
            return Err(ModelError::Label {
                label,
                classes: cfg.classes,
            });
        }
        let stats = FeatureStats::from_rows(train_x, cfg.std_floor);
        let mut tape = Tape::no_grad();
        let pv = ParamVars::register(&mut tape, params, cfg, false);
        let feat = feature_tokens(&mut tape, &pv, &stats, train_x, cfg.clip);
        let targ = train_target_tokens(&mut tape, &pv, train_y);
        let tokens = interleave(&mut tape, feat, targ, train_x.len(), f);
        let (last, ctx) = train_pass(&mut tape, &pv, cfg, tokens, f + 1)?;
        let base = base_decode(&mut tape, &pv, last, train_x.len(), f);
        Ok(Self {
            cfg: cfg.clone(),
            n_train: train_x.len(),
            kv: ctx
                .iter()
                .map(|&(k, v)| (tape.value(k).clone(), tape.value(v).clone()))
                .collect(),
            base: tape.value(base).data().to_vec(),
            stats,
        })
    }

    pub fn num_features(&self) -> usize {
        self.stats.mean.len()
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    /// Base logits shared by every test row of this context.
    pub fn base(&self) -> &[T] {
        &self.base
    }

    /// Explanations for `rows`, evaluated as test rows of this context.
    pub fn explain(&self, params: &Params<T>, rows: &[Vec<f64>]) -> Result<Vec<Explanation<T>>, ModelError> {
        let f = self.num_features();
        check_rows(rows, f)?;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(CHUNK_ROWS) {
            let (phi, logits) = self.run_chunk(params, chunk)?;
            for r in 0..chunk.len() {
                out.push(Explanation {
                    base: self.base.clone(),
                    phi: (0..f).map(|j| phi.row(r * f + j).to_vec()).collect(),
                    logits: logits.row(r).to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Logits only, one vector per row.
    pub fn logits(&self, params: &Params<T>, rows: &[Vec<f64>]) -> Result<Vec<Vec<T>>, ModelError> {
        check_rows(rows, self.num_features())?;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(CHUNK_ROWS) {
            let (_, logits) = self.run_chunk(params, chunk)?;
            out.extend((0..chunk.len()).map(|r| logits.row(r).to_vec()));
        }
        Ok(out)
    }

    fn run_chunk(&self, params: &Params<T>, rows: &[Vec<f64>]) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let f = self.num_features();
        let cfg = &self.cfg;
        let mut tape = Tape::no_grad();
        let pv = ParamVars::register(&mut tape, params, cfg, false);
        let ctx: Vec<_> = self
            .kv
            .iter()
            .map(|(k, v)| (tape.constant(k.clone()), tape.constant(v.clone())))
            .collect();
        let base = tape.constant(Tensor::matrix(1, self.base.len(), self.base.clone()));
        let feat = feature_tokens(&mut tape, &pv, &self.stats, rows, cfg.clip);
        let targ = test_target_tokens(&mut tape, &pv, rows.len());
        let tokens = interleave(&mut tape, feat, targ, rows.len(), f);
        let last = test_pass(&mut tape, &pv, cfg, tokens, &ctx, f + 1)?;
        let phi = shap_decode(&mut tape, &pv, last, rows.len(), f);
        let logits = additive_logits(&mut tape, base, phi, f);
        Ok((tape.value(phi).clone(), tape.value(logits).clone()))
    }
}

/// Explanation for every test row of `episode`.
pub fn predict_explain<T: Scalar>(
    episode: &Episode,
    params: &Params<T>,
    cfg: &ModelConfig,
) -> Result<Vec<Explanation<T>>, ModelError> {
    if episode.num_features != episode.train_x.first().map_or(0, Vec::len) && !episode.train_x.is_empty() {
        return Err(ModelError::FeatureMismatch {
            expected: episode.num_features,
            got: episode.train_x[0].len(),
        });
    }
    FittedContext::fit(&episode.train_x, &episode.train_y, params, cfg)?.explain(params, &episode.test_x)
}
