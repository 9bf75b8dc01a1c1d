//! Synthetic in-context classification episodes.
//!
//! Each episode comes from a small structural causal model: a random DAG over
//! `F + 2` latent nodes whose edges apply an identity, `tanh` or centered
//! quadratic transform, with Gaussian noise at every node. `F` of the nodes
//! are exposed as features. A random linear-plus-interaction score over a
//! subset of those features is split at its median into binary labels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest episode the sampler produces.
pub const MIN_ROWS: usize = 16;
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("invalid prior config: {0}")]
    InvalidConfig(String),
    #[error("degenerate episode")]
    Degenerate,
    #[error("no valid episode after {MAX_ATTEMPTS} attempts (seed {seed}, index {index})")]
    Exhausted { seed: u64, index: u64 },
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub min_features: usize,
    pub max_features: usize,
    pub max_rows: usize,
    pub split_low: f64,
    pub split_high: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            min_features: 2,
            max_features: 5,
            max_rows: 200,
            split_low: 0.10,
            split_high: 0.90,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), PriorError> {
        if self.min_features < 1 || self.min_features > self.max_features {
            return Err(PriorError::InvalidConfig(format!(
                "need 1 <= min_features ({}) <= max_features ({})",
                self.min_features, self.max_features
            )));
        }
        if !(0.0 < self.split_low && self.split_low < self.split_high && self.split_high < 1.0) {
            return Err(PriorError::InvalidConfig(format!(
                "need 0 < split_low ({}) < split_high ({}) < 1",
                self.split_low, self.split_high
            )));
        }
        if self.max_rows < 4 {
            return Err(PriorError::InvalidConfig(format!(
                "max_rows {} is below 4",
                self.max_rows
            )));
        }
        Ok(())
    }
}

/// One in-context task: labelled train rows plus test rows to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<usize>,
    pub test_x: Vec<Vec<f64>>,
    pub test_y: Option<Vec<usize>>,
    pub num_features: usize,
    pub num_classes: usize,
    pub feature_names: Vec<String>,
}

impl Episode {
    /// Builds an episode with default feature names `x1..xF`, checking the
    /// shape invariants.
    pub fn new(
        train_x: Vec<Vec<f64>>,
        train_y: Vec<usize>,
        test_x: Vec<Vec<f64>>,
        test_y: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self, PriorError> {
        let num_features = train_x
            .first()
            .or(test_x.first())
            .map_or(0, Vec::len);
        let ep = Self {
            train_x,
            train_y,
            test_x,
            test_y,
            num_features,
            num_classes,
            feature_names: default_feature_names(num_features),
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        let bad = |m: String| Err(PriorError::InvalidEpisode(m));
        if self.train_x.is_empty() {
            return bad("no train rows".into());
        }
        if self.test_x.is_empty() {
            return bad("no test rows".into());
        }
        if self.num_features == 0 {
            return bad("no features".into());
        }
        if self.train_y.len() != self.train_x.len() {
            return bad(format!(
                "{} train rows but {} labels",
                self.train_x.len(),
                self.train_y.len()
            ));
        }
        if let Some(ty) = &self.test_y {
            if ty.len() != self.test_x.len() {
                return bad(format!(
                    "{} test rows but {} labels",
                    self.test_x.len(),
                    ty.len()
                ));
            }
        }
        if let Some(r) = self
            .train_x
            .iter()
            .chain(&self.test_x)
            .find(|r| r.len() != self.num_features)
        {
            return bad(format!(
                "row with {} columns, expected {}",
                r.len(),
                self.num_features
            ));
        }
        if self.feature_names.len() != self.num_features {
            return bad("feature name count disagrees with feature count".into());
        }
        let labels = self.train_y.iter().chain(self.test_y.iter().flatten());
        if let Some(l) = labels.clone().find(|&&l| l >= self.num_classes) {
            return bad(format!("label {l} outside {} classes", self.num_classes));
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        self.train_x.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_x.len()
    }

    /// True when every class `0..num_classes` occurs among the train labels.
    pub fn train_has_all_classes(&self) -> bool {
        let mut seen = vec![false; self.num_classes];
        for &y in &self.train_y {
            seen[y] = true;
        }
        seen.into_iter().all(|s| s)
    }

    /// Same train context with a different set of test rows.
    pub fn with_test_rows(&self, test_x: Vec<Vec<f64>>, test_y: Option<Vec<usize>>) -> Self {
        Self {
            test_x,
            test_y,
            ..self.clone()
        }
    }
}

pub fn default_feature_names(f: usize) -> Vec<String> {
    (1..=f).map(|i| format!("x{i}")).collect()
}

/// Deterministic generator for substream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples episode `index` of the stream defined by `cfg.seed`.
pub fn sample_episode(cfg: &PriorConfig, index: u64) -> Result<Episode, PriorError> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, index);
    for _ in 0..MAX_ATTEMPTS {
        let f = rng.gen_range(cfg.min_features..=cfg.max_features);
        let n = rng.gen_range(MIN_ROWS.min(cfg.max_rows)..=cfg.max_rows);
        let frac = rng.gen_range(cfg.split_low..=cfg.split_high);
        let n_train = ((frac * n as f64).round() as usize).clamp(1, n - 1);
        let (x, score) = sample_scm_table(f, n, &mut rng);
        let Ok(labels) = label_binarize(&score) else {
            continue;
        };
        let mut x = x;
        let test_x = x.split_off(n_train);
        let mut train_y = labels;
        let test_y = train_y.split_off(n_train);
        let ep = Episode {
            train_x: x,
            train_y,
            test_x,
            test_y: Some(test_y),
            num_features: f,
            num_classes: 2,
            feature_names: default_feature_names(f),
        };
        if ep.train_has_all_classes() {
            return Ok(ep);
        }
    }
    Err(PriorError::Exhausted {
        seed: cfg.seed,
        index,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EdgeFn {
    Identity,
    Squash,
    Quadratic,
}

impl EdgeFn {
    fn apply(self, x: f64) -> f64 {
        match self {
            EdgeFn::Identity => x,
            EdgeFn::Squash => x.tanh(),
            EdgeFn::Quadratic => x * x - 1.0,
        }
    }
}

/// Samples an `n x f` feature table and a per-row score from a random SCM.
pub fn sample_scm_table<R: Rng>(f: usize, n: usize, rng: &mut R) -> (Vec<Vec<f64>>, Vec<f64>) {
    assert!(f >= 1 && n >= 1, "sample_scm_table needs f >= 1 and n >= 1");
    let nodes = f + 2;
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(nodes);
    for j in 0..nodes {
        let mut edges = Vec::new();
        for i in 0..j {
            if rng.gen_bool(0.5) {
                let func = match rng.gen_range(0..3) {
                    0 => EdgeFn::Identity,
                    1 => EdgeFn::Squash,
                    _ => EdgeFn::Quadratic,
                };
                let magnitude = rng.gen_range(0.5..1.5);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                edges.push((i, func, sign * magnitude));
            }
        }
        let noise_std = if edges.is_empty() {
            1.0
        } else {
            rng.gen_range(0.1..1.0)
        };
        let mut col = Vec::with_capacity(n);
        for r in 0..n {
            let parent_sum: f64 = edges
                .iter()
                .map(|&(i, func, w)| w * func.apply(values[i][r]))
                .sum();
            let eps: f64 = rng.sample(StandardNormal);
            col.push(parent_sum + noise_std * eps);
        }
        standardize(&mut col);
        values.push(col);
    }

    let mut order: Vec<usize> = (0..nodes).collect();
    order.shuffle(rng);
    let feature_nodes = &order[..f];
    let table: Vec<Vec<f64>> = (0..n)
        .map(|r| feature_nodes.iter().map(|&j| values[j][r]).collect())
        .collect();

    let k = rng.gen_range(1..=f);
    let mut cols: Vec<usize> = (0..f).collect();
    cols.shuffle(rng);
    let subset = &cols[..k];
    let coefs: Vec<f64> = subset.iter().map(|_| rng.sample(StandardNormal)).collect();
    let interaction = if k >= 2 {
        let c: f64 = rng.sample(StandardNormal);
        Some((subset[0], subset[1], c))
    } else {
        None
    };
    let score = table
        .iter()
        .map(|row| {
            let lin: f64 = subset.iter().zip(&coefs).map(|(&j, &a)| a * row[j]).sum();
            lin + interaction.map_or(0.0, |(a, b, c)| c * row[a] * row[b])
        })
        .collect();
    (table, score)
}

fn standardize(col: &mut [f64]) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
    for v in col.iter_mut() {
        *v = (*v - mean) * scale;
    }
}

/// Median split: 1 where the score is strictly above the median, else 0.
pub fn label_binarize(scores: &[f64]) -> Result<Vec<usize>, PriorError> {
    if scores.len() < 2 {
        return Err(PriorError::Degenerate);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let labels: Vec<usize> = scores.iter().map(|&s| usize::from(s > median)).collect();
    let ones = labels.iter().sum::<usize>();
    if ones == 0 || ones == n {
        return Err(PriorError::Degenerate);
    }
    Ok(labels)
}
