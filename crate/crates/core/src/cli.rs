//! `gsa` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, LevelFilter};

use crate::bench::{self, BenchConfig, BenchMechanism, DEFAULT_LENGTHS};
use crate::config::RunConfig;
use crate::data::{self, SynthKind, TimeSeries, WindowSet};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, tiny_preset, GradCheckConfig};
use crate::model::ForecasterModel;
use crate::train::{self, evaluate, load_training_checkpoint, save_training_checkpoint};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "gsa",
    version,
    about = "Grouped self-attention forecaster: train, evaluate, benchmark, gradient-check",
    after_help = "Logging: set GSA_LOG to quiet, info (default) or debug."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a forecaster on a CSV file or a synthetic series
    Train(TrainArgs),
    /// Evaluate a checkpoint on one data split
    Eval(EvalArgs),
    /// Sweep sequence lengths and record attention cost
    Bench(BenchArgs),
    /// Compare analytic gradients with central differences
    Gradcheck(GradcheckArgs),
    /// Write a synthetic series as CSV
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Config file of `key = value` lines [default: built-in defaults]
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config key, applied after the file; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Random seed; replaces the `seed` config key [default: config value, 0]
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Input CSV with a `date,<feature>...` header [default: synthetic series from config]
    #[arg(long, value_name = "CSV")]
    pub data: Option<PathBuf>,
    /// Resume from a checkpoint written by `train` [default: fresh initialization]
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to evaluate
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// Input CSV [default: synthetic series from config]
    #[arg(long, value_name = "CSV")]
    pub data: Option<PathBuf>,
    /// Split to score
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated sequence lengths
    #[arg(long, value_delimiter = ',', default_value = "180,360,720,1440,2880")]
    pub lengths: Vec<usize>,
    /// Comma-separated mechanisms: grouped, grouped_local_only, canonical
    #[arg(long, value_delimiter = ',', default_value = "grouped,grouped_local_only,canonical")]
    pub mechanisms: Vec<String>,
    /// Minimum timed duration per cell in milliseconds
    #[arg(long, value_name = "MS", default_value_t = 500)]
    pub min_time_ms: u64,
    /// Skip timing; wall_ms_per_iter is left empty so the CSV is reproducible
    #[arg(long, default_value_t = false)]
    pub no_timing: bool,
    /// Skip cells whose estimated score buffers exceed this many MiB
    #[arg(long, value_name = "MIB", default_value_t = 4096)]
    pub memory_budget_mb: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Tiny,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Model preset to check
    #[arg(long, value_enum, default_value = "tiny")]
    pub preset: Preset,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// Maximum allowed relative error
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Sampled coordinates per tensor
    #[arg(long, default_value_t = 32)]
    pub coords: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    SineMix,
    TrendPlusSeason,
    WhiteNoise,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::SineMix => SynthKind::SineMix,
            KindArg::TrendPlusSeason => SynthKind::TrendPlusSeason,
            KindArg::WhiteNoise => SynthKind::WhiteNoise,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Series shape
    #[arg(long, value_enum, default_value = "sine-mix")]
    pub kind: KindArg,
    /// Number of rows
    #[arg(long, default_value_t = 2000)]
    pub length: usize,
    /// Number of feature columns; the last one is named OT
    #[arg(long, default_value_t = 2)]
    pub features: usize,
    /// Output file name inside the output directory [default: <kind>.csv]
    #[arg(long, value_name = "FILE")]
    pub name: Option<String>,
}

/// Failure split into usage errors (exit 1) and runtime errors (exit 2).
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

pub fn init_logging() {
    let level = match std::env::var("GSA_LOG").as_deref() {
        Ok("quiet") => LevelFilter::Off,
        Ok("debug") => LevelFilter::Debug,
        _ => LevelFilter::Info,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

/// Parses `argv` (program name first), runs the verb, returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if e.kind() == clap::error::ErrorKind::InvalidSubcommand {
                eprintln!("available verbs: train, eval, bench, gradcheck, synth");
            }
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `gsa --help` for usage");
            EXIT_USAGE
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(common: &CommonArgs, base: RunConfig) -> CliResult<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config file {}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    cfg.apply_overrides(&common.set).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_series(cfg: &RunConfig, csv: Option<&Path>) -> Result<TimeSeries> {
    let d = &cfg.data;
    let ts = match csv {
        Some(path) => data::load_csv(path, &d.target)?,
        None => data::synthetic_series(d.synth_kind, d.synth_len, d.synth_features, cfg.train.seed)?,
    };
    Ok(if d.univariate { ts.target_only() } else { ts })
}

struct Prepared {
    model: ForecasterModel,
    train: WindowSet,
    val: WindowSet,
    test: WindowSet,
}

fn prepare(cfg: &RunConfig, csv: Option<&Path>) -> Result<Prepared> {
    let ts = load_series(cfg, csv)?;
    let mcfg = cfg.resolved_model(ts.n_features());
    if mcfg.n_features_in != ts.n_features() || mcfg.n_features_out != ts.n_features() {
        return Err(Error::Config(format!(
            "data has {} features but the config asks for n_features_in={} n_features_out={}",
            ts.n_features(),
            mcfg.n_features_in,
            mcfg.n_features_out
        )));
    }
    let (train, val, test) = data::make_windows(&ts, mcfg.seq_len, mcfg.pred_len, cfg.data.split, cfg.data.stride)?;
    let model = ForecasterModel::new(mcfg, cfg.train.seed)?;
    Ok(Prepared { model, train, val, test })
}

fn metrics_csv(rows: &[(&str, usize, Option<f64>)]) -> String {
    let mut s = String::from("split,windows,mse\n");
    for (split, n, mse) in rows {
        s.push_str(&format!("{split},{n},{}\n", mse.map_or(String::new(), |v| v.to_string())));
    }
    s
}

fn score(model: &ForecasterModel, set: &WindowSet) -> Result<Option<f64>> {
    if set.is_empty() {
        Ok(None)
    } else {
        evaluate(model, set).map(Some)
    }
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = load_config(&a.common, RunConfig::default())?;
    let Prepared {
        mut model,
        train: train_set,
        val,
        test,
    } = prepare(&cfg, a.data.as_deref())?;
    let adam = match &a.resume {
        Some(path) => load_training_checkpoint(path, &mut model)?
            .unwrap_or_else(|| train::AdamState::new(&model.params)),
        None => train::AdamState::new(&model.params),
    };
    let out = &a.common.out;
    ensure_out(out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    info!(
        "training on {} windows ({} val, {} test), {} parameters",
        train_set.len(),
        val.len(),
        test.len(),
        model.params.num_scalars()
    );
    let best = out.join("best.ckpt");
    let outcome = train::train_resume(&mut model, adam, &train_set, Some(&val), &cfg.train, Some(&best))?;
    train::write_history_csv(out.join("history.csv"), &outcome.history)?;
    save_training_checkpoint(&out.join("final.ckpt"), &model, Some(&outcome.adam))?;

    let val_mse = score(&model, &val)?;
    let test_mse = score(&model, &test)?;
    write_text(
        &out.join("metrics.csv"),
        &metrics_csv(&[("val", val.len(), val_mse), ("test", test.len(), test_mse)]),
    )?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
    println!(
        "trained {} epochs ({} iterations); val_mse={} test_mse={}",
        outcome.history.len(),
        outcome.iterations,
        show(val_mse),
        show(test_mse)
    );
    println!("outputs written to {}", out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let cfg = load_config(&a.common, RunConfig::default())?;
    let Prepared {
        mut model,
        train: train_set,
        val,
        test,
    } = prepare(&cfg, a.data.as_deref())?;
    load_training_checkpoint(&a.checkpoint, &mut model)?;
    let (name, set) = match a.split {
        SplitArg::Train => ("train", &train_set),
        SplitArg::Val => ("val", &val),
        SplitArg::Test => ("test", &test),
    };
    let mse = evaluate(&model, set)?;
    let out = &a.common.out;
    ensure_out(out)?;
    write_text(&out.join("eval.csv"), &metrics_csv(&[(name, set.len(), Some(mse))]))?;
    println!("{name}_mse={mse:.6} over {} windows", set.len());
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let defaults = BenchConfig::default();
    let cfg = load_config(&a.common, RunConfig::with_model(defaults.model.clone()))?;
    let mechanisms = a
        .mechanisms
        .iter()
        .map(|m| m.trim().parse::<BenchMechanism>())
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let mut lengths = a.lengths.clone();
    if lengths.is_empty() {
        lengths = DEFAULT_LENGTHS.to_vec();
    }
    lengths.sort_unstable();
    lengths.dedup();
    let bcfg = BenchConfig {
        model: cfg.model.clone(),
        min_time: Duration::from_millis(a.min_time_ms),
        timing: !a.no_timing,
        memory_budget_bytes: a.memory_budget_mb.saturating_mul(1 << 20),
        seed: cfg.train.seed,
    };
    let report = bench::run_scaling_benchmark(&lengths, &mechanisms, &bcfg)?;
    let out = &a.common.out;
    ensure_out(out)?;
    let path = out.join("bench.csv");
    bench::emit_csv_report(&report, &path)?;
    println!("{} rows written to {}", report.rows.len(), path.display());
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let cfg = load_config(&a.common, RunConfig::default())?;
    let mut obj = match a.preset {
        Preset::Tiny => tiny_preset(cfg.train.seed)?,
    };
    let gc = GradCheckConfig {
        epsilon: a.epsilon,
        tolerance: a.tolerance,
        max_coords_per_tensor: a.coords,
        seed: cfg.train.seed,
    };
    let report = grad_check(&mut obj, &gc)?;
    let out = &a.common.out;
    ensure_out(out)?;
    write_text(&out.join("gradcheck.csv"), &report.to_csv())?;
    println!(
        "{} tensors checked, max relative error {:e} (tolerance {:e})",
        report.tensors.len(),
        report.max_rel_error(),
        a.tolerance
    );
    let failures: Vec<String> = report
        .failures()
        .map(|t| format!("{} ({:e})", t.name, t.max_rel_error))
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "{} tensors over tolerance: {}",
            failures.len(),
            failures.join(", ")
        )))
    }
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let cfg = load_config(&a.common, RunConfig::default())?;
    let kind = SynthKind::from(a.kind);
    let ts = data::synthetic_series(kind, a.length, a.features, cfg.train.seed)?;
    let out = &a.common.out;
    ensure_out(out)?;
    let name = a.name.clone().unwrap_or_else(|| format!("{}.csv", kind.name()));
    let path = out.join(name);
    data::write_csv(&ts, &path)?;
    println!("{} rows x {} features written to {}", ts.len(), ts.n_features(), path.display());
    Ok(())
}
