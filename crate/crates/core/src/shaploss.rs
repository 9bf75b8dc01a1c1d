//! Shapley-consistency objective: coalition sampling, interventional
//! masking, the Monte-Carlo and additive estimates, and the combined loss.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    forward_on_tape, Explanation, FeatureStats, FittedContext, ModelConfig, ModelError, ParamVars,
    Params,
};
use crate::ndcore::{Scalar, Tape, Var};
use crate::prior::Episode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapLossError {
    #[error("degenerate coalition size {size} for {features} features")]
    DegenerateSize { features: usize, size: usize },
    #[error("need at least two features")]
    TooFewFeatures,
    #[error("coalition over {coalition} features used with {expected}")]
    CoalitionMismatch { coalition: usize, expected: usize },
    #[error("feature index {index} out of range for {features} features")]
    IndexOutOfRange { index: usize, features: usize },
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::ndcore::NdError> for ShapLossError {
    fn from(e: crate::ndcore::NdError) -> Self {
        ShapLossError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapLossConfig {
    /// Coalitions sampled per explained row (S).
    pub num_subsets: usize,
    /// Background rows per coalition (K).
    pub background_k: usize,
    /// Weight of the Shapley term (lambda).
    pub loss_weight: f64,
    /// Steps over which the Shapley term ramps in.
    pub warmup_steps: usize,
    /// Test rows per episode that receive the Shapley term.
    pub max_explained_rows: usize,
}

impl Default for ShapLossConfig {
    fn default() -> Self {
        Self {
            num_subsets: 4,
            background_k: 8,
            loss_weight: 1.0,
            warmup_steps: 1200,
            max_explained_rows: 8,
        }
    }
}

impl ShapLossConfig {
    pub fn validate(&self) -> Result<(), ShapLossError> {
        if self.num_subsets < 1 || self.background_k < 1 || self.max_explained_rows < 1 {
            return Err(ShapLossError::Config(
                "num_subsets, background_k and max_explained_rows must be >= 1".into(),
            ));
        }
        if !(self.loss_weight >= 0.0) || !self.loss_weight.is_finite() {
            return Err(ShapLossError::Config(format!(
                "loss_weight must be finite and >= 0, got {}",
                self.loss_weight
            )));
        }
        Ok(())
    }
}

/// A set of "present" features over `0..F`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Coalition {
    included: Vec<bool>,
}

impl Coalition {
    /// Coalition over `f` features containing `indices` (0-based).
    pub fn new(f: usize, indices: &[usize]) -> Result<Self, ShapLossError> {
        let mut included = vec![false; f];
        for &i in indices {
            if i >= f {
                return Err(ShapLossError::IndexOutOfRange {
                    index: i,
                    features: f,
                });
            }
            included[i] = true;
        }
        Ok(Self { included })
    }

    pub fn from_mask(included: Vec<bool>) -> Self {
        Self { included }
    }

    /// Bit `j` of `bits` marks feature `j`.
    pub fn from_bits(f: usize, bits: u64) -> Self {
        Self {
            included: (0..f).map(|j| bits >> j & 1 == 1).collect(),
        }
    }

    pub fn empty(f: usize) -> Self {
        Self {
            included: vec![false; f],
        }
    }

    pub fn full(f: usize) -> Self {
        Self {
            included: vec![true; f],
        }
    }

    pub fn num_features(&self) -> usize {
        self.included.len()
    }

    pub fn size(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.included.get(j).copied().unwrap_or(false)
    }

    pub fn mask(&self) -> &[bool] {
        &self.included
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.included.len()).filter(|&j| self.included[j]).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            included: self.included.iter().map(|b| !b).collect(),
        }
    }
}

/// `(F - 1) / (C(F, k) * k * (F - k))`.
pub fn shapley_kernel_weight(f: usize, size: usize) -> Result<f64, ShapLossError> {
    if f < 2 || size < 1 || size >= f {
        return Err(ShapLossError::DegenerateSize { features: f, size });
    }
    let k = size.min(f - size);
    let mut binom = 1.0f64;
    for i in 0..k {
        binom = binom * (f - i) as f64 / (i + 1) as f64;
    }
    let binom = binom.round();
    Ok((f - 1) as f64 / (binom * size as f64 * (f - size) as f64))
}

/// `s` coalitions: size uniform on `1..F`, then a uniform subset of that size.
pub fn sample_coalitions<R: Rng>(f: usize, s: usize, rng: &mut R) -> Result<Vec<Coalition>, ShapLossError> {
    if f < 2 {
        return Err(ShapLossError::TooFewFeatures);
    }
    Ok((0..s)
        .map(|_| {
            let size = rng.gen_range(1..f);
            let picked = index::sample(rng, f, size);
            Coalition::new(f, &picked.into_vec()).expect("indices in range")
        })
        .collect())
}

/// One row per background row: `row` at included features, background elsewhere.
pub fn mask_inputs(
    row: &[f64],
    coalition: &Coalition,
    background: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, ShapLossError> {
    let f = row.len();
    if coalition.num_features() != f {
        return Err(ShapLossError::CoalitionMismatch {
            coalition: coalition.num_features(),
            expected: f,
        });
    }
    background
        .iter()
        .map(|b| {
            if b.len() != f {
                return Err(ShapLossError::CoalitionMismatch {
                    coalition: b.len(),
                    expected: f,
                });
            }
            Ok((0..f)
                .map(|j| if coalition.contains(j) { row[j] } else { b[j] })
                .collect())
        })
        .collect()
}

/// Anything that maps feature rows to logit vectors.
pub trait RowModel {
    fn num_classes(&self) -> usize;
    fn logits(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError>;
}

/// The network evaluated against a fitted train context.
pub struct ContextModel<'a, T: Scalar> {
    pub context: &'a FittedContext<T>,
    pub params: &'a Params<T>,
}

impl<T: Scalar> RowModel for ContextModel<'_, T> {
    fn num_classes(&self) -> usize {
        self.context.config().classes
    }

    fn logits(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(self
            .context
            .logits(self.params, rows)?
            .into_iter()
            .map(|r| r.into_iter().map(Scalar::f64).collect())
            .collect())
    }
}

/// A hand-written model: `classes` outputs computed row by row.
pub struct FnModel<F> {
    pub classes: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> RowModel for FnModel<F> {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn logits(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(rows.iter().map(|r| (self.f)(r)).collect())
    }
}

/// Mean model logits over the masked copies of `row`.
pub fn monte_carlo_estimate<M: RowModel + ?Sized>(
    model: &M,
    row: &[f64],
    coalition: &Coalition,
    background: &[Vec<f64>],
) -> Result<Vec<f64>, ShapLossError> {
    let masked = mask_inputs(row, coalition, background)?;
    let out = model.logits(&masked)?;
    let mut acc = vec![0.0; model.num_classes()];
    for l in &out {
        for (a, v) in acc.iter_mut().zip(l) {
            *a += v;
        }
    }
    let k = out.len() as f64;
    Ok(acc.into_iter().map(|a| a / k).collect())
}

/// `base + sum of phi over the coalition`, in ascending feature order.
pub fn additive_estimate<T: Scalar>(
    explanation: &Explanation<T>,
    coalition: &Coalition,
) -> Result<Vec<T>, ShapLossError> {
    let f = explanation.phi.len();
    if coalition.num_features() != f {
        return Err(ShapLossError::CoalitionMismatch {
            coalition: coalition.num_features(),
            expected: f,
        });
    }
    let idx = coalition.indices();
    Ok((0..explanation.base.len())
        .map(|c| match idx.split_first() {
            None => explanation.base[c],
            Some((&first, rest)) => {
                let mut s = explanation.phi[first][c];
                for &j in rest {
                    s = s + explanation.phi[j][c];
                }
                s + explanation.base[c]
            }
        })
        .collect())
}

/// Linear ramp from 0 at step 0 to 1 at `warmup`.
pub fn warmup_ramp(step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        (step as f64 / warmup as f64).min(1.0)
    }
}

/// `ce + ramp(step) * lambda * l_shap`.
pub fn total_loss(ce: f64, l_shap: f64, cfg: &ShapLossConfig, step: usize) -> f64 {
    ce + warmup_ramp(step, cfg.warmup_steps) * cfg.loss_weight * l_shap
}

/// One sampled coalition for one explained row, with its background rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    /// Test-row index within the episode.
    pub row: usize,
    pub coalition: Coalition,
    /// Train-row indices used as background.
    pub background: Vec<usize>,
}

/// Everything random about one episode's Shapley term.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapPlan {
    pub explained: Vec<usize>,
    pub subsets: usize,
    pub draws: Vec<Draw>,
}

impl ShapPlan {
    /// Samples explained rows, coalitions and background rows. `None` for
    /// single-feature episodes, which carry no Shapley term.
    pub fn sample<R: Rng>(episode: &Episode, cfg: &ShapLossConfig, rng: &mut R) -> Option<Self> {
        let f = episode.num_features;
        if f < 2 {
            log::warn!("single-feature episode: Shapley term skipped");
            return None;
        }
        let n_test = episode.test_x.len();
        let n_train = episode.train_x.len();
        let mut explained = index::sample(rng, n_test, cfg.max_explained_rows.min(n_test)).into_vec();
        explained.sort_unstable();
        let mut draws = Vec::with_capacity(explained.len() * cfg.num_subsets);
        for &row in &explained {
            for coalition in sample_coalitions(f, cfg.num_subsets, rng).expect("f >= 2") {
                let background = if n_train >= cfg.background_k {
                    index::sample(rng, n_train, cfg.background_k).into_vec()
                } else {
                    (0..cfg.background_k).map(|_| rng.gen_range(0..n_train)).collect()
                };
                draws.push(Draw {
                    row,
                    coalition,
                    background,
                });
            }
        }
        Some(Self {
            explained,
            subsets: cfg.num_subsets,
            draws,
        })
    }

    /// All masked rows, `K` per draw, in draw order.
    pub fn masked_rows(&self, episode: &Episode) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for d in &self.draws {
            let bg: Vec<Vec<f64>> = d.background.iter().map(|&i| episode.train_x[i].clone()).collect();
            out.extend(mask_inputs(&episode.test_x[d.row], &d.coalition, &bg).expect("episode shape"));
        }
        out
    }

    /// Σ over draws of `w_s * |f̄ - f̂|² / S`, evaluated independently of
    /// the tape with any row model and the unmasked explanations.
    pub fn loss_sum<M: RowModel + ?Sized, T: Scalar>(
        &self,
        model: &M,
        episode: &Episode,
        explanations: &[Explanation<T>],
    ) -> Result<f64, ShapLossError> {
        let f = episode.num_features;
        let mut total = 0.0;
        for d in &self.draws {
            let bg: Vec<Vec<f64>> = d.background.iter().map(|&i| episode.train_x[i].clone()).collect();
            let fhat = monte_carlo_estimate(model, &episode.test_x[d.row], &d.coalition, &bg)?;
            let fbar = additive_estimate(&explanations[d.row], &d.coalition)?;
            let sq: f64 = fbar.iter().zip(&fhat).map(|(a, b)| (a.f64() - b).powi(2)).sum();
            total += shapley_kernel_weight(f, d.coalition.size())? * sq / self.subsets as f64;
        }
        Ok(total)
    }
}

/// Per-episode pieces of the batch loss, still un-normalized.
pub struct LossTerms {
    /// Summed cross-entropy over the episode's labelled test rows.
    pub ce_sum: Var,
    pub n_test: usize,
    /// Σ w_s |f̄ - f̂|² / S over this episode's draws.
    pub shap_sum: Option<Var>,
    pub n_explained: usize,
}

/// Builds one episode's loss terms on `tape`. Masked rows are appended to
/// the test rows so f̂ and the unmasked explanation share one pass.
pub fn episode_loss_terms<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    episode: &Episode,
    plan: Option<&ShapPlan>,
) -> Result<LossTerms, ShapLossError> {
    let labels = episode
        .test_y
        .as_ref()
        .ok_or_else(|| ShapLossError::Config("episode has no test labels".into()))?;
    let f = episode.num_features;
    let n_test = episode.test_x.len();
    let k = plan.and_then(|p| p.draws.first()).map_or(0, |d| d.background.len());
    let mut rows = episode.test_x.clone();
    if let Some(p) = plan {
        rows.extend(p.masked_rows(episode));
    }
    let stats = FeatureStats::from_rows(&episode.train_x, cfg.std_floor);
    let out = forward_on_tape(tape, pv, cfg, &stats, &episode.train_x, &episode.train_y, &rows)?;
    let test_logits = tape.gather_rows(out.logits, &(0..n_test).collect::<Vec<_>>());
    let ce_sum = tape.cross_entropy_sum(test_logits, labels);

    let shap_sum = match plan {
        None => None,
        Some(p) if p.draws.is_empty() => None,
        Some(p) => {
            let inv_k = T::of(1.0 / k as f64);
            let fhat_terms = (0..p.draws.len())
                .map(|d| (0..k).map(|i| (n_test + d * k + i, inv_k)).collect())
                .collect();
            let fhat = tape.row_combine(out.logits, fhat_terms);
            let fbar_terms = p
                .draws
                .iter()
                .map(|d| {
                    d.coalition
                        .indices()
                        .into_iter()
                        .map(|j| (d.row * f + j, T::one()))
                        .collect()
                })
                .collect();
            let partial = tape.row_combine(out.phi, fbar_terms);
            let fbar = tape.add_row(partial, out.base);
            let diff = tape.sub(fbar, fhat);
            let weights = p
                .draws
                .iter()
                .map(|d| {
                    T::of(shapley_kernel_weight(f, d.coalition.size()).expect("sampled size") / p.subsets as f64)
                })
                .collect();
            Some(tape.weighted_sq_sum(diff, weights))
        }
    };
    Ok(LossTerms {
        ce_sum,
        n_test,
        shap_sum,
        n_explained: plan.map_or(0, |p| p.explained.len()),
    })
}

/// Batch-level loss handles and their values.
pub struct BatchLoss {
    pub total: Var,
    pub ce: f64,
    pub l_shap: f64,
    pub total_value: f64,
}

/// `ce + ramp * lambda * l_shap` over a batch of episodes, with
/// cross-entropy pooled over all test rows and the Shapley term pooled over
/// all explained rows.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    loss_cfg: &ShapLossConfig,
    batch: &[(Episode, Option<ShapPlan>)],
    step: usize,
) -> Result<BatchLoss, ShapLossError> {
    let mut ce_parts = Vec::new();
    let mut shap_parts = Vec::new();
    let (mut n_test, mut n_expl) = (0, 0);
    for (ep, plan) in batch {
        let t = episode_loss_terms(tape, pv, cfg, ep, plan.as_ref())?;
        ce_parts.push(t.ce_sum);
        n_test += t.n_test;
        if let Some(s) = t.shap_sum {
            shap_parts.push(s);
            n_expl += t.n_explained;
        }
    }
    let ce_all = tape.concat_rows(&ce_parts);
    let ce_sum = tape.sum_all(ce_all);
    let ce = tape.scale(ce_sum, T::of(1.0 / n_test as f64));
    let ce_value = tape.value(ce).data()[0].f64();
    if shap_parts.is_empty() {
        return Ok(BatchLoss {
            total: ce,
            ce: ce_value,
            l_shap: 0.0,
            total_value: ce_value,
        });
    }
    let sh_all = tape.concat_rows(&shap_parts);
    let sh_sum = tape.sum_all(sh_all);
    let l_shap = tape.scale(sh_sum, T::of(1.0 / n_expl as f64));
    let l_value = tape.value(l_shap).data()[0].f64();
    let coef = warmup_ramp(step, loss_cfg.warmup_steps) * loss_cfg.loss_weight;
    let weighted = tape.scale(l_shap, T::of(coef));
    let total = tape.add(ce, weighted);
    let total_value = tape.value(total).data()[0].f64();
    Ok(BatchLoss {
        total,
        ce: ce_value,
        l_shap: l_value,
        total_value,
    })
}

/// L_shap for one episode: pooled mean over its explained rows.
pub fn shap_consistency_loss<T: Scalar, R: Rng>(
    episode: &Episode,
    params: &Params<T>,
    cfg: &ModelConfig,
    loss_cfg: &ShapLossConfig,
    rng: &mut R,
) -> Result<f64, ShapLossError> {
    let Some(plan) = ShapPlan::sample(episode, loss_cfg, rng) else {
        return Ok(0.0);
    };
    let mut tape = Tape::no_grad();
    let pv = ParamVars::register(&mut tape, params, cfg, false);
    let mut ep = episode.clone();
    if ep.test_y.is_none() {
        ep.test_y = Some(vec![0; ep.test_x.len()]);
    }
    let t = episode_loss_terms(&mut tape, &pv, cfg, &ep, Some(&plan))?;
    Ok(t.shap_sum.map_or(0.0, |v| tape.value(v).data()[0].f64()) / t.n_explained as f64)
}
