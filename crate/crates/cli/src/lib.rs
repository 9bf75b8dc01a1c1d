//! Argument parsing and the subcommand drivers behind the `shappfn` binary.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use shappfn_core::eval::{csv_files, episode_auc, fidelity_benchmark, load_csv_dataset, BenchConfig, EvalError};
use shappfn_core::train::{evaluate_episodes, prior_episodes};
use shappfn_core::{load_checkpoint, predict_explain, train, Checkpoint, Episode, TrainConfig};
use shappfn_serve::{AppState, ServeConfig, DEFAULT_PORT};

/// Environment variable that replaces `--seed` when set.
pub const SEED_ENV: &str = "SHAPPFN_SEED";

#[derive(Debug, Parser)]
#[command(name = "shappfn", version, about = "Self-explaining in-context tabular classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain on synthetic episodes and write a checkpoint.
    Train(TrainArgs),
    /// Report test-split ROC-AUC on CSV datasets or held-out prior episodes.
    Eval(EvalArgs),
    /// Print base, per-feature contributions, logits and the additivity
    /// residual for every test row.
    Explain(ExplainArgs),
    /// Compare model attributions with KernelSHAP and time both.
    Bench(BenchArgs),
    /// Serve sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weight of the attribution-consistency loss.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Coalitions sampled per explained row.
    #[arg(long, default_value_t = 4)]
    pub subsets: usize,
    /// Background rows per coalition.
    #[arg(long = "bg-k", default_value_t = 8)]
    pub bg_k: usize,
    /// Steps over which the attribution loss ramps up linearly.
    #[arg(long, default_value_t = 300)]
    pub warmup: usize,
    /// Output checkpoint.
    #[arg(long, default_value = "shappfn.ckpt")]
    pub checkpoint: PathBuf,
    /// Per-step loss CSV.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Validation cadence in steps; 0 disables it.
    #[arg(long, default_value_t = 250)]
    pub eval_every: usize,
    /// Test rows per episode that enter the attribution loss.
    #[arg(long, default_value_t = 8)]
    pub explained_rows: usize,
    /// Checkpoint the mean of the second-half iterates.
    #[arg(long)]
    pub iterate_averaging: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Label column; the last column when omitted.
    #[arg(long = "target-col")]
    pub target_col: Option<String>,
    /// Fraction of rows in the train split.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV file or directory of CSV files.
    #[arg(long, required_unless_present = "prior")]
    pub data: Option<PathBuf>,
    /// Evaluate on this many held-out prior episodes instead of CSV data.
    #[arg(long, conflicts_with = "data")]
    pub prior: Option<usize>,
    #[command(flatten)]
    pub data_args: DataArgs,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV file; its test split is explained.
    #[arg(long)]
    pub data: PathBuf,
    /// Explain at most this many test rows.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub data_args: DataArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV file or directory of CSV files.
    #[arg(long)]
    pub data: PathBuf,
    /// Test rows explained per dataset.
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    /// Background rows for KernelSHAP, drawn from the train split.
    #[arg(long, default_value_t = 150)]
    pub background: usize,
    /// Kernel coalition budget; full enumeration up to 11 features, 2048 above.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Time explainers sequentially on one thread. Always the case in this
    /// build; accepted for script compatibility.
    #[arg(long)]
    pub deterministic_timing: bool,
    /// Report CSV path.
    #[arg(long, default_value = "bench_report.csv")]
    pub report: PathBuf,
    #[command(flatten)]
    pub data_args: DataArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    /// Directory that session `path` requests may read from.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Idle seconds before a session is dropped.
    #[arg(long, default_value_t = 1800)]
    pub idle_secs: u64,
    #[arg(long, default_value_t = 64)]
    pub max_features: usize,
}

pub fn parse_cli<I, T>(args: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Cli::try_parse_from(args)
}

/// `--seed`, unless the environment override is set.
pub fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(std::env::VarError::NotPresent) => Ok(flag),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

impl TrainArgs {
    pub fn to_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig {
            steps: self.steps,
            batch_size: self.batch,
            lr: self.lr,
            seed: effective_seed(self.seed)?,
            eval_every: self.eval_every,
            checkpoint_path: Some(self.checkpoint.clone()),
            loss_log: self.loss_log.clone(),
            iterate_averaging: self.iterate_averaging,
            ..TrainConfig::default()
        };
        cfg.shap.loss_weight = self.lambda;
        cfg.shap.num_subsets = self.subsets;
        cfg.shap.background_k = self.bg_k;
        cfg.shap.warmup_steps = self.warmup;
        cfg.shap.max_explained_rows = self.explained_rows;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn checkpoint(path: &Path) -> Result<Checkpoint> {
    require_file(path, "checkpoint")?;
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn datasets(path: &Path, args: &DataArgs) -> Result<Vec<(String, Result<Episode, EvalError>)>> {
    require_exists(path, "data path")?;
    let seed = effective_seed(args.seed)?;
    let files = csv_files(path)?;
    if files.is_empty() {
        bail!("no CSV files in {}", path.display());
    }
    Ok(files
        .iter()
        .map(|f| {
            let name = f.file_stem().map_or_else(|| f.display().to_string(), |s| s.to_string_lossy().into_owned());
            (name, load_csv_dataset(f, args.target_col.as_deref(), args.split, seed))
        })
        .collect())
}

fn fmt_vec(v: &[f32]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.to_config()?;
    if let Some(dir) = args.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let run = train(&cfg)?;
    for v in &run.validation {
        println!("step {:>5}  validation ce {:.4}  accuracy {:.3}", v.step, v.ce, v.accuracy);
    }
    if let Some(last) = run.losses.last() {
        println!(
            "final step {}: ce {:.4} l_shap {:.4} total {:.4} ({:.1} s)",
            last.step + 1,
            last.ce,
            last.l_shap,
            last.total,
            last.wall_ms as f64 / 1000.0
        );
    }
    println!(
        "checkpoint {} ({} parameters, sha256 {})",
        args.checkpoint.display(),
        run.checkpoint.param_count(),
        run.checkpoint.fingerprint()
    );
    Ok(())
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let ck = checkpoint(&args.checkpoint)?;
    if let Some(count) = args.prior {
        let seed = shappfn_core::train::derive_seed(effective_seed(args.data_args.seed)?, "heldout");
        let eps = prior_episodes(&Default::default(), seed, 0, count)?;
        let mut aucs = Vec::new();
        for ep in &eps {
            if let Ok(a) = episode_auc(ep, &ck.params, &ck.model) {
                aucs.push(a);
            }
        }
        let (ce, acc) = evaluate_episodes(&eps, &ck.params, &ck.model)?;
        let auc = aucs.iter().sum::<f64>() / aucs.len().max(1) as f64;
        println!("prior episodes {count}: roc_auc {auc:.4} ({} scored) ce {ce:.4} accuracy {acc:.3}", aucs.len());
        return Ok(());
    }
    let data = args.data.as_deref().expect("clap requires --data without --prior");
    let mut scored = Vec::new();
    let mut failed = 0;
    for (name, ep) in datasets(data, &args.data_args)? {
        match ep.map_err(anyhow::Error::from).and_then(|ep| Ok(episode_auc(&ep, &ck.params, &ck.model)?)) {
            Ok(a) => {
                println!("{name}: roc_auc {a:.4}");
                scored.push(a);
            }
            Err(e) => {
                println!("{name}: FAILED {e}");
                failed += 1;
            }
        }
    }
    if !scored.is_empty() {
        println!("mean roc_auc {:.4} over {} datasets", scored.iter().sum::<f64>() / scored.len() as f64, scored.len());
    }
    if scored.is_empty() || failed > 0 {
        bail!("{failed} of {} datasets failed", failed + scored.len());
    }
    Ok(())
}

pub fn run_explain(args: &ExplainArgs) -> Result<()> {
    let ck = checkpoint(&args.checkpoint)?;
    require_file(&args.data, "data file")?;
    let mut ep = load_csv_dataset(&args.data, args.data_args.target_col.as_deref(), args.data_args.split, effective_seed(args.data_args.seed)?)?;
    if let Some(limit) = args.limit {
        ep.test_x.truncate(limit.max(1));
        ep.test_y = ep.test_y.map(|mut y| {
            y.truncate(limit.max(1));
            y
        });
    }
    let out = predict_explain(&ep, &ck.params, &ck.model)?;
    let width = ep.feature_names.iter().map(String::len).max().unwrap_or(0);
    let stdout = io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    for (i, e) in out.iter().enumerate() {
        writeln!(w, "row {i}")?;
        writeln!(w, "  base      {}", fmt_vec(&e.base))?;
        for (name, phi) in ep.feature_names.iter().zip(&e.phi) {
            writeln!(w, "  phi {name:<width$} {}", fmt_vec(phi))?;
        }
        writeln!(w, "  logits    {}", fmt_vec(&e.logits))?;
        writeln!(w, "  residual  {}", e.additivity_residual())?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_bench(args: &BenchArgs) -> Result<()> {
    let ck = checkpoint(&args.checkpoint)?;
    let sets = datasets(&args.data, &args.data_args)?;
    let bench = BenchConfig {
        background: args.background,
        instances: args.instances,
        budget: args.budget,
        seed: effective_seed(args.data_args.seed)?,
    };
    let report = fidelity_benchmark(&sets, &ck.params, &ck.model, &bench);
    print!("{}", report.table());
    if let Some(dir) = args.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(&args.report).with_context(|| format!("creating {}", args.report.display()))?;
    report.write_csv(BufWriter::new(file), &ck.fingerprint())?;
    println!("report {}", args.report.display());
    if report.rows.is_empty() {
        bail!("every dataset failed");
    }
    Ok(())
}

pub fn run_serve(args: &ServeArgs) -> Result<()> {
    let ck = checkpoint(&args.checkpoint)?;
    if let Some(d) = &args.data {
        if !d.is_dir() {
            bail!("data root {} is not a directory", d.display());
        }
    }
    let state = AppState::new(
        ck,
        ServeConfig {
            idle_ttl: Duration::from_secs(args.idle_secs),
            data_root: args.data.clone(),
            max_features: args.max_features,
        },
    );
    eprintln!("serving checkpoint {} on port {}", state.fingerprint(), args.port);
    let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, args.port));
    tokio::runtime::Runtime::new()?.block_on(shappfn_serve::run(addr, state))?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Explain(a) => run_explain(a),
        Command::Bench(a) => run_bench(a),
        Command::Serve(a) => run_serve(a),
    }
}
