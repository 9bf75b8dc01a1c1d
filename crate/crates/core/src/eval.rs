//! Metrics, CSV ingestion, one-vs-all scoring and the fidelity/timing
//! benchmark against KernelSHAP.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{predict_explain, FittedContext, ModelConfig, ModelError, Params};
use crate::oracle::{default_budget, kernel_shap, Interventional, OracleError, MAX_EXACT_FEATURES};
use crate::prior::{Episode, PriorError};
use crate::shaploss::ContextModel;

/// Splits tried before a single-class split is reported.
const SPLIT_ATTEMPTS: u64 = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("undefined AUC: scores need both a positive and a negative label")]
    UndefinedAuc,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two values, got {0}")]
    TooShort(usize),
    #[error("reference vector is constant")]
    ConstantReference,
    #[error("candidate vector is constant")]
    ConstantCandidate,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("missing target column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric cell {value:?} at ({row}, {col})")]
    Parse { row: usize, col: usize, value: String },
    #[error("invalid label {value:?} at ({row}, {col}): labels must be integers")]
    Label { row: usize, col: usize, value: String },
    #[error("dataset has {0} rows; need at least 2")]
    TooFewRows(usize),
    #[error("split fraction must lie in (0, 1), got {0}")]
    Fraction(f64),
    #[error("every split over {SPLIT_ATTEMPTS} seeds left a side with a single class")]
    SingleClass,
    #[error("{features} features exceed the kernel baseline limit of {limit}")]
    TooManyFeatures { features: usize, limit: usize },
    #[error("dataset has {found} classes; the model handles {supported}")]
    Classes { found: usize, supported: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Episode(#[from] PriorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Average ranks, 1-based, ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outranks a random negative, ties half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::UndefinedAuc);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Ok((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

/// One-vs-rest AUC averaged over classes that have both positives and
/// negatives among `labels`. `scores[i][c]`.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64, EvalError> {
    let c = scores.first().map_or(0, Vec::len);
    let mut aucs = Vec::new();
    for k in 0..c {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let l: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        match roc_auc(&s, &l) {
            Ok(a) => aucs.push(a),
            Err(EvalError::UndefinedAuc) => {}
            Err(e) => return Err(e),
        }
    }
    if aucs.is_empty() {
        return Err(EvalError::UndefinedAuc);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::TooShort(a.len()));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Coefficient of determination of `candidate` as a predictor of `reference`.
pub fn r2_score(candidate: &[f64], reference: &[f64]) -> Result<f64, EvalError> {
    check_pair(candidate, reference)?;
    let m = mean(reference);
    let tot: f64 = reference.iter().map(|r| (r - m).powi(2)).sum();
    if tot == 0.0 {
        return Err(EvalError::ConstantReference);
    }
    let res: f64 = reference.iter().zip(candidate).map(|(r, c)| (r - c).powi(2)).sum();
    Ok(1.0 - res / tot)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    check_pair(a, b)?;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Pearson correlation of the average ranks.
pub fn spearman(candidate: &[f64], reference: &[f64]) -> Result<f64, EvalError> {
    check_pair(candidate, reference)?;
    let rr = average_ranks(reference);
    let rc = average_ranks(candidate);
    let (mr, mc) = (mean(&rr), mean(&rc));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in rr.iter().zip(&rc) {
        sxy += (x - mr) * (y - mc);
        sxx += (x - mr).powi(2);
        syy += (y - mc).powi(2);
    }
    if sxx == 0.0 {
        return Err(EvalError::ConstantReference);
    }
    if syy == 0.0 {
        return Err(EvalError::ConstantCandidate);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fidelity {
    pub r2: f64,
    pub cosine: f64,
    pub spearman: f64,
}

pub fn fidelity_metrics(candidate: &[f64], reference: &[f64]) -> Result<Fidelity, EvalError> {
    Ok(Fidelity {
        r2: r2_score(candidate, reference)?,
        cosine: cosine_similarity(candidate, reference)?,
        spearman: spearman(candidate, reference)?,
    })
}

/// A parsed CSV: numeric features and the raw integer target.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<i64>,
}

impl CsvTable {
    /// Parses CSV text with a header row. `target` names the label column;
    /// `None` takes the last column. Coordinates in errors are 1-based data
    /// row and column numbers, the header excluded.
    pub fn parse(text: &str, target: Option<&str>) -> Result<Self, EvalError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let t = match target {
            Some(name) => header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| EvalError::MissingColumn(name.to_string()))?,
            None => header
                .len()
                .checked_sub(1)
                .ok_or_else(|| EvalError::MissingColumn("<last>".into()))?,
        };
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut row = Vec::with_capacity(header.len() - 1);
            for (c, cell) in rec.iter().enumerate() {
                if c == t {
                    let label = cell
                        .parse::<i64>()
                        .ok()
                        .or_else(|| cell.parse::<f64>().ok().filter(|v| v.fract() == 0.0).map(|v| v as i64));
                    y.push(label.ok_or_else(|| EvalError::Label {
                        row: r + 1,
                        col: c + 1,
                        value: cell.to_string(),
                    })?);
                } else {
                    let v = cell.parse::<f64>().ok().filter(|v| v.is_finite());
                    row.push(v.ok_or_else(|| EvalError::Parse {
                        row: r + 1,
                        col: c + 1,
                        value: cell.to_string(),
                    })?);
                }
            }
            x.push(row);
        }
        let target_name = header[t].clone();
        let feature_names = header
            .into_iter()
            .enumerate()
            .filter(|&(c, _)| c != t)
            .map(|(_, h)| h)
            .collect();
        Ok(Self {
            feature_names,
            target_name,
            x,
            y,
        })
    }

    /// Sorted distinct raw labels; position in this list is the class index.
    pub fn classes(&self) -> Vec<i64> {
        self.y.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Shuffles by `seed`, puts `round(fraction * n)` rows (at least one on
    /// each side) in train, and labels classes by sorted raw value. A split
    /// leaving either side with one class (when the data has two or more)
    /// is redrawn with seeds `seed + 1, ...` up to ten attempts.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<Episode, EvalError> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(EvalError::Fraction(fraction));
        }
        let n = self.x.len();
        if n < 2 {
            return Err(EvalError::TooFewRows(n));
        }
        let classes = self.classes();
        let label: Vec<usize> = self
            .y
            .iter()
            .map(|v| classes.binary_search(v).expect("label listed"))
            .collect();
        let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        let distinct = |idx: &[usize]| idx.iter().map(|&i| label[i]).collect::<BTreeSet<_>>().len();
        for attempt in 0..SPLIT_ATTEMPTS {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt)));
            let (tr, te) = order.split_at(n_train);
            if classes.len() < 2 || distinct(tr) < 2 || (te.len() >= 2 && distinct(te) < 2) {
                continue;
            }
            let mut ep = Episode::new(
                tr.iter().map(|&i| self.x[i].clone()).collect(),
                tr.iter().map(|&i| label[i]).collect(),
                te.iter().map(|&i| self.x[i].clone()).collect(),
                Some(te.iter().map(|&i| label[i]).collect()),
                classes.len(),
            )?;
            ep.feature_names = self.feature_names.clone();
            return Ok(ep);
        }
        Err(EvalError::SingleClass)
    }
}

/// Reads, parses and splits one CSV file.
pub fn load_csv_dataset(
    path: &Path,
    target_column: Option<&str>,
    split_fraction: f64,
    seed: u64,
) -> Result<Episode, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    CsvTable::parse(&text, target_column)?.split(split_fraction, seed)
}

/// `*.csv` files under `dir`, sorted by name; a file path is returned as is.
pub fn csv_files(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let io_err = |source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err)? {
        let p = entry.map_err(io_err)?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Per-class scores from one binary context per class.
#[derive(Debug, Clone, PartialEq)]
pub struct OvaScores {
    /// `scores[i][c]`: positive-class probability of "class c vs rest".
    pub scores: Vec<Vec<f64>>,
    /// Classes absent from the train split; their column is 0.5.
    pub missing: Vec<usize>,
}

/// One-vs-all prediction with a binary model. Scores are not renormalized.
pub fn ova_predict(episode: &Episode, params: &Params<f32>, cfg: &ModelConfig) -> Result<OvaScores, EvalError> {
    let n = episode.n_test();
    let c = episode.num_classes;
    let mut scores = vec![vec![0.5; c]; n];
    let mut missing = Vec::new();
    for k in 0..c {
        if !episode.train_y.contains(&k) {
            missing.push(k);
            continue;
        }
        let mut binary = episode.clone();
        binary.num_classes = 2;
        binary.train_y = episode.train_y.iter().map(|&y| (y == k) as usize).collect();
        binary.test_y = episode.test_y.as_ref().map(|t| t.iter().map(|&y| (y == k) as usize).collect());
        for (row, e) in scores.iter_mut().zip(predict_explain(&binary, params, cfg)?) {
            row[k] = e.probabilities()[1] as f64;
        }
    }
    Ok(OvaScores { scores, missing })
}

/// Test-set AUC of one episode: the positive-class probability for binary
/// episodes, macro one-vs-all otherwise.
pub fn episode_auc(episode: &Episode, params: &Params<f32>, cfg: &ModelConfig) -> Result<f64, EvalError> {
    let labels = episode.test_y.as_deref().ok_or(EvalError::UndefinedAuc)?;
    if episode.num_classes == 2 {
        let scores: Vec<f64> = predict_explain(episode, params, cfg)?
            .iter()
            .map(|e| e.probabilities()[1] as f64)
            .collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        roc_auc(&scores, &pos)
    } else {
        macro_auc(&ova_predict(episode, params, cfg)?.scores, labels)
    }
}

/// Benchmark protocol.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchConfig {
    /// Background rows drawn from the train split for the kernel baseline.
    pub background: usize,
    /// Test rows explained per dataset.
    pub instances: usize,
    /// Kernel coalition budget; `None` uses [`default_budget`].
    pub budget: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            background: 150,
            instances: 50,
            budget: None,
            seed: 0,
        }
    }
}

/// One benchmarked dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityReport {
    pub dataset: String,
    pub n: usize,
    pub f: usize,
    pub time_kernel_s: f64,
    pub time_model_s: f64,
    pub speedup: f64,
    pub r2: f64,
    pub cosine: f64,
    pub spearman: f64,
    pub background: usize,
    pub budget: usize,
    pub instances: usize,
    /// Explained classes: `[1]` for binary data.
    pub classes: Vec<usize>,
}

/// Means of the metric columns and the geometric-mean speedup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub datasets: usize,
    pub time_kernel_s: f64,
    pub time_model_s: f64,
    pub speedup: f64,
    pub r2: f64,
    pub cosine: f64,
    pub spearman: f64,
}

#[derive(Debug)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<FidelityReport>,
    pub failures: Vec<(String, String)>,
    pub aggregate: Option<Aggregate>,
}

/// Flattened attributions `phi[f][c]` of the given classes, instance-major.
fn flatten<T: Copy + Into<f64>>(phis: &[Vec<Vec<T>>], classes: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for phi in phis {
        for row in phi {
            for &c in classes {
                out.push(row[c].into());
            }
        }
    }
    out
}

/// Explains the first `instances` test rows with the model and with
/// KernelSHAP over a shared background and compares the attributions.
pub fn benchmark_dataset(
    name: &str,
    episode: &Episode,
    params: &Params<f32>,
    cfg: &ModelConfig,
    bench: &BenchConfig,
) -> Result<FidelityReport, EvalError> {
    let f = episode.num_features;
    if f > MAX_EXACT_FEATURES {
        return Err(EvalError::TooManyFeatures {
            features: f,
            limit: MAX_EXACT_FEATURES,
        });
    }
    if episode.num_classes > cfg.classes {
        return Err(EvalError::Classes {
            found: episode.num_classes,
            supported: cfg.classes,
        });
    }
    let classes: Vec<usize> = if cfg.classes == 2 { vec![1] } else { (0..cfg.classes).collect() };
    let instances = bench.instances.min(episode.n_test());
    let explained = episode.with_test_rows(episode.test_x[..instances].to_vec(), None);
    let mut rng = ChaCha8Rng::seed_from_u64(bench.seed);
    let bg_n = bench.background.min(episode.n_train());
    let background: Vec<Vec<f64>> = index::sample(&mut rng, episode.n_train(), bg_n)
        .into_iter()
        .map(|i| episode.train_x[i].clone())
        .collect();
    let budget = bench.budget.unwrap_or_else(|| default_budget(f));

    let start = Instant::now();
    let model = predict_explain(&explained, params, cfg)?;
    let time_model_s = start.elapsed().as_secs_f64();

    let context = FittedContext::fit(&episode.train_x, &episode.train_y, params, cfg)?;
    let runner = ContextModel {
        context: &context,
        params,
    };
    let mut kernel = Vec::with_capacity(instances);
    let mut time_kernel_s = 0.0;
    for row in &explained.test_x {
        let start = Instant::now();
        let vf = Interventional::new(&runner, row.clone(), background.clone())?;
        kernel.push(kernel_shap(&vf, budget, &mut rng)?.phi);
        time_kernel_s += start.elapsed().as_secs_f64();
    }
    let model_phi: Vec<Vec<Vec<f32>>> = model.into_iter().map(|e| e.phi).collect();
    let m = fidelity_metrics(&flatten(&model_phi, &classes), &flatten(&kernel, &classes))?;
    Ok(FidelityReport {
        dataset: name.to_string(),
        n: episode.n_train() + episode.n_test(),
        f,
        time_kernel_s,
        time_model_s,
        speedup: time_kernel_s / time_model_s.max(1e-9),
        r2: m.r2,
        cosine: m.cosine,
        spearman: m.spearman,
        background: bg_n,
        budget,
        instances,
        classes,
    })
}

pub fn aggregate(rows: &[FidelityReport]) -> Option<Aggregate> {
    if rows.is_empty() {
        return None;
    }
    let avg = |g: fn(&FidelityReport) -> f64| rows.iter().map(g).sum::<f64>() / rows.len() as f64;
    Some(Aggregate {
        datasets: rows.len(),
        time_kernel_s: avg(|r| r.time_kernel_s),
        time_model_s: avg(|r| r.time_model_s),
        speedup: avg(|r| r.speedup.ln()).exp(),
        r2: avg(|r| r.r2),
        cosine: avg(|r| r.cosine),
        spearman: avg(|r| r.spearman),
    })
}

/// Benchmarks every dataset in order. Datasets run sequentially, so the
/// reported times are wall clock. Failures are kept in the report.
pub fn fidelity_benchmark(
    datasets: &[(String, Result<Episode, EvalError>)],
    params: &Params<f32>,
    cfg: &ModelConfig,
    bench: &BenchConfig,
) -> BenchReport {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (name, ep) in datasets {
        let res = ep
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|ep| benchmark_dataset(name, ep, params, cfg, bench).map_err(|e| e.to_string()));
        match res {
            Ok(r) => {
                log::info!("{name}: speedup {:.1}x cosine {:.3}", r.speedup, r.cosine);
                rows.push(r);
            }
            Err(e) => {
                log::warn!("{name}: {e}");
                failures.push((name.clone(), e));
            }
        }
    }
    BenchReport {
        config: bench.clone(),
        aggregate: aggregate(&rows),
        rows,
        failures,
    }
}

pub const REPORT_COLUMNS: &str = "dataset,n,F,time_kernel_s,time_model_s,speedup,r2,cosine,spearman";

impl BenchReport {
    /// `#` metadata lines, the header, one row per dataset and an
    /// `aggregate` row with empty `n` and `F`.
    pub fn write_csv<W: Write>(&self, mut w: W, checkpoint: &str) -> io::Result<()> {
        let c = &self.config;
        writeln!(w, "# checkpoint {checkpoint}")?;
        writeln!(
            w,
            "# background {} instances {} budget {} seed {}",
            c.background,
            c.instances,
            c.budget.map_or("default".into(), |b| b.to_string()),
            c.seed
        )?;
        writeln!(w, "# metrics pooled over flattened phi; positive class only for binary data")?;
        writeln!(w, "# timing sequential wall clock; aggregate speedup is a geometric mean")?;
        for (name, err) in &self.failures {
            writeln!(w, "# failed {name}: {}", err.replace('\n', " "))?;
        }
        writeln!(w, "{REPORT_COLUMNS}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                csv_field(&r.dataset),
                r.n,
                r.f,
                r.time_kernel_s,
                r.time_model_s,
                r.speedup,
                r.r2,
                r.cosine,
                r.spearman
            )?;
        }
        if let Some(a) = &self.aggregate {
            writeln!(
                w,
                "aggregate,,,{},{},{},{},{},{}",
                a.time_kernel_s, a.time_model_s, a.speedup, a.r2, a.cosine, a.spearman
            )?;
        }
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>6} {:>3} {:>10} {:>10} {:>9} {:>7} {:>7} {:>8}",
            "dataset", "n", "F", "Kernel s", "Model s", "Speedup", "R2", "Cosine", "Spearman"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>3} {:>10.3} {:>10.4} {:>8.1}x {:>7.3} {:>7.3} {:>8.3}",
                r.dataset, r.n, r.f, r.time_kernel_s, r.time_model_s, r.speedup, r.r2, r.cosine, r.spearman
            );
        }
        if let Some(a) = &self.aggregate {
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>3} {:>10.3} {:>10.4} {:>8.1}x {:>7.3} {:>7.3} {:>8.3}",
                "aggregate", "", "", a.time_kernel_s, a.time_model_s, a.speedup, a.r2, a.cosine, a.spearman
            );
        }
        for (name, err) in &self.failures {
            let _ = writeln!(s, "{name}: FAILED {err}");
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
