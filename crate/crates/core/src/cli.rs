//! `topk-uncert` command line: `generate`, `evaluate`, `report`.
//!
//! Exit codes: 0 success, 2 usage/config/incompatible inputs, 3 I/O failure,
//! 4 input schema error, 5 strategy precondition failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregation::{AggregationError, AggregationOptions, StrategyId};
use crate::btrank::BtConfig;
use crate::metrics::{MetricsError, ThresholdGrid};
use crate::model::{parse_dataset, serialize_dataset};
use crate::par::Exec;
use crate::report::{
    build_report, to_canonical_json, ComparisonTable, EvalReport, EvalSettings, InputInfo,
    PipelineError,
};
use crate::synthgen::{generate_with_truth, GeneratorConfig, SynthError};

pub const THREADS_ENV: &str = "TOPK_UNCERT_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("strategy precondition failed: {0}")]
    Precondition(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Schema(_) => 4,
            CliError::Precondition(_) => 5,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "topk-uncert",
    version,
    about = "Aggregate multi-run Top-K predictions and evaluate their uncertainty"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic JSONL dataset from a generator config (TOML or JSON).
    Generate(GenerateArgs),
    /// Aggregate a JSONL dataset and write evaluation reports.
    Evaluate(EvaluateArgs),
    /// Build a comparison table from evaluation reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Consistency,
    Weighted,
    Pairrank,
    Single,
    All,
}

impl StrategyArg {
    pub fn strategies(self) -> Vec<StrategyId> {
        match self {
            StrategyArg::Consistency => vec![StrategyId::Consistency],
            StrategyArg::Weighted => vec![StrategyId::ConfidenceWeighted],
            StrategyArg::Pairrank => vec![StrategyId::PairRank],
            StrategyArg::Single => vec![StrategyId::SingleRun],
            StrategyArg::All => StrategyId::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSONL prediction log.
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Threshold grid as start:stop:step.
    #[arg(long, default_value = "0:1:0.01")]
    pub grid: String,
    /// Bradley–Terry pseudo-count.
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    /// Use 1.0 for missing verbalized confidences in the weighted vote.
    #[arg(long)]
    pub default_conf: bool,
    /// Do not elect the same action at two ranks.
    #[arg(long)]
    pub dedup: bool,
    /// Generator seed to record in the manifest.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// CSV output path; an aligned text table is written next to it with a `.txt` extension.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a.config, &a.out, a.seed),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::Report(a) => cmd_report(&a.reports, &a.out).map(|_| ()),
    }
}

/// Runs `f` on a pool capped by `TOPK_UNCERT_THREADS` when that variable is set.
pub fn with_worker_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(f());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        CliError::Usage(format!(
            "{THREADS_ENV} must be a positive integer, got `{raw}`"
        ))
    })?;
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(pool.install(f))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        Ok(f())
    }
}

pub fn load_generator_config(path: &Path) -> Result<GeneratorConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let cfg: GeneratorConfig = if is_json {
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn cmd_generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = load_generator_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (ds, _) = generate_with_truth(&cfg, Exec::Parallel).map_err(|e| match e {
        SynthError::InvalidConfig { .. } => CliError::Config(e.to_string()),
        SynthError::InvalidWeights(_) => CliError::Config(e.to_string()),
    })?;
    let file = fs::File::create(out).map_err(|e| io_err(out, e))?;
    let mut writer = std::io::BufWriter::new(file);
    serialize_dataset(&ds, &mut writer).map_err(|e| io_err(out, e))?;
    std::io::Write::flush(&mut writer).map_err(|e| io_err(out, e))?;
    println!(
        "generated N={} M={} K={} seed={} -> {}",
        cfg.n_samples,
        cfg.m_runs,
        cfg.k,
        cfg.seed,
        out.display()
    );
    Ok(())
}

fn pipeline_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::Aggregation { ref source, .. } => match source {
            AggregationError::InvalidK => CliError::Usage(e.to_string()),
            _ => CliError::Precondition(e.to_string()),
        },
        PipelineError::Metrics(
            MetricsError::InvalidK | MetricsError::InvalidBins | MetricsError::InvalidGrid(_),
        ) => CliError::Usage(e.to_string()),
        PipelineError::Metrics(_) => CliError::Schema(e.to_string()),
    }
}

/// File stem used for every output of one strategy.
pub fn report_stem(strategy: StrategyId) -> &'static str {
    strategy.as_str()
}

/// Writes `<strategy>.report.json` plus plotting CSVs for each requested strategy into
/// `args.out`. Returns the report paths.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Vec<PathBuf>, CliError> {
    if args.k == 0 {
        return Err(CliError::Usage("--k must be >= 1".into()));
    }
    if args.bins == 0 {
        return Err(CliError::Usage("--bins must be >= 1".into()));
    }
    if !(args.epsilon.is_finite() && args.epsilon >= 0.0) {
        return Err(CliError::Usage("--epsilon must be finite and >= 0".into()));
    }
    let grid = ThresholdGrid::parse(&args.grid).map_err(|e| CliError::Usage(e.to_string()))?;

    let bytes = fs::read(&args.input).map_err(|e| io_err(&args.input, e))?;
    let path_text = args.input.display().to_string();
    let ds =
        parse_dataset(bytes.as_slice(), &path_text).map_err(|e| CliError::Schema(e.to_string()))?;
    let input = InputInfo {
        path: path_text,
        sha256: hex::encode(Sha256::digest(&bytes)),
        seed: args.seed,
    };
    let options = AggregationOptions {
        default_confidence: args.default_conf,
        dedup: args.dedup,
        bt: BtConfig::with_epsilon(args.epsilon),
    };

    let mut reports = Vec::new();
    for strategy in args.strategy.strategies() {
        let settings = EvalSettings {
            strategy,
            k: args.k,
            bins: args.bins,
            grid,
            options,
        };
        let report =
            build_report(&ds, &settings, &input, Exec::Parallel).map_err(pipeline_error)?;
        reports.push(report);
    }

    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let mut paths = Vec::new();
    for report in &reports {
        let stem = report_stem(report.manifest.strategy);
        let json = to_canonical_json(report).map_err(|e| CliError::Io(e.to_string()))?;
        let files = [
            (format!("{stem}.report.json"), json),
            (format!("{stem}.selective.csv"), report.selective_csv()),
            (format!("{stem}.set_ece.csv"), report.set_ece_csv()),
            (format!("{stem}.rankwise.csv"), report.rankwise_csv()),
            (format!("{stem}.reliability.csv"), report.reliability_csv()),
        ];
        for (name, contents) in files {
            let p = args.out.join(name);
            fs::write(&p, contents).map_err(|e| io_err(&p, e))?;
        }
        let s = report.summary();
        println!(
            "{:<20} top1={:.3} recall@{}={:.3} ece={:.4} set-ece@{}={:.3} entropy={}",
            s.method,
            s.top1,
            args.k,
            s.recall_at_k,
            s.top1_ece,
            args.k,
            s.set_ece_at_k,
            s.entropy
                .map(|e| format!("{e:.3}"))
                .unwrap_or_else(|| "-".into())
        );
        paths.push(args.out.join(format!("{stem}.report.json")));
    }
    Ok(paths)
}

pub fn load_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

pub fn cmd_report(paths: &[PathBuf], out: &Path) -> Result<ComparisonTable, CliError> {
    if paths.is_empty() {
        return Err(CliError::Usage("at least one report is required".into()));
    }
    let reports = paths
        .iter()
        .map(|p| load_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    let table =
        ComparisonTable::from_reports(&reports).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(out, table.to_csv()).map_err(|e| io_err(out, e))?;
    let text_path = out.with_extension("txt");
    let text = table.to_text();
    fs::write(&text_path, &text).map_err(|e| io_err(&text_path, e))?;
    print!("{text}");
    Ok(table)
}
