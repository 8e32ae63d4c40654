//! Command-line driver: `gen`, `train-probe`, `distill`, `report`, `sweep`.
//!
//! Every command validates its arguments before writing anything. Failures
//! print one JSON object on stderr and exit with 1 (usage), 2 (data or
//! format) or 3 (run failure).

mod plan;

pub use plan::{
    distill_one, run_id, run_sweep, ExperimentPlan, PlannedRun, SweepSummary, TeacherRef,
    OUT_DIR_ENV, PLAN_VERSION,
};

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::cache::{read_cache, split_train_eval, write_cache, CacheError, HiddenStateCache};
use crate::distill::{DistillError, DistillSpec, Method, RunRecord};
use crate::metrics::{aggregate, GroupKey, MetricsError};
use crate::probes::{
    read_probe, train_probe, write_probe, LayerSelection, ProbeError, ProbeKind, ProbeTrainConfig,
};
use crate::teachsim::{generate, generate_per_choice, TeachSimError, TeacherSpec, DEFAULT_N};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Run(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Run(_) => "run",
        }
    }

    /// Single-line JSON form written to stderr.
    pub fn to_json_line(&self) -> String {
        json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

impl From<CacheError> for CliError {
    fn from(e: CacheError) -> Self {
        match e {
            CacheError::Stratification { .. } => CliError::Run(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Format(_) | ProbeError::Io(_) | ProbeError::MissingPerChoice => {
                CliError::Data(e.to_string())
            }
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Config(m) => CliError::Usage(format!("configuration error: {m}")),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Io(_) => CliError::Data(e.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<TeachSimError> for CliError {
    fn from(e: TeachSimError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "probekd", version, about = "Probe-based distillation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic hidden-state cache.
    Gen(GenArgs),
    /// Train a probe on a cache and write it as a probe file.
    TrainProbe(TrainProbeArgs),
    /// Train one student and write its run record.
    Distill(DistillArgs),
    /// Aggregate run records into a table.
    Report(ReportArgs),
    /// Run every (method, fraction, seed) of an experiment plan.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Teacher spec JSON; defaults are used when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_N)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also store per-choice states for CCS.
    #[arg(long)]
    pub per_choice: bool,
}

/// Train/eval split shared by probe and student training.
#[derive(Debug, Clone, Copy, Args)]
pub struct SplitArgs {
    #[arg(long, default_value_t = 0.3)]
    pub eval_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainProbeArgs {
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Temperature stored with the probe for soft-label export.
    #[arg(long)]
    pub tau: Option<f64>,
    /// `all`, `a..b` (end exclusive) or `a-b` (inclusive).
    #[arg(long)]
    pub layers: Option<String>,
    /// Probe training config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub method: String,
    /// Probe file; required for probe_kd.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Distill spec JSON; `method` and `seed` flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "method,fraction")]
    pub by: String,
    /// CSV path; a JSON mirror is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// Maximum concurrent runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

pub(crate) fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

pub(crate) fn load_cache(path: &Path) -> Result<HiddenStateCache, CliError> {
    let f = fs::File::open(path)
        .map_err(|e| CliError::Usage(format!("cannot open cache {}: {e}", path.display())))?;
    read_cache(std::io::BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Writes via a temporary file so readers never see a partial artifact.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Data(format!("cannot write {}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn check_fraction(name: &str, f: f64, allow_one: bool) -> Result<(), CliError> {
    let ok = f > 0.0 && (if allow_one { f <= 1.0 } else { f < 1.0 });
    if ok {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{name} {f} out of range")))
    }
}

fn cmd_gen(a: &GenArgs) -> Result<String, CliError> {
    let spec = match &a.spec {
        Some(p) => TeacherSpec::from_json(&read_text(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => TeacherSpec::default(),
    };
    spec.validate()?;
    let cache = if a.per_choice {
        generate_per_choice(&spec, a.n)?
    } else {
        generate(&spec, a.n)?
    };
    let mut bytes = Vec::with_capacity(cache.encoded_len());
    write_cache(&cache, &mut bytes)?;
    write_atomic(&a.out, &bytes)?;
    Ok(json!({
        "out": a.out.display().to_string(),
        "n_examples": cache.n_examples(),
        "per_choice": cache.has_per_choice(),
        "digest": cache.digest()?,
    })
    .to_string())
}

fn cmd_train_probe(a: &TrainProbeArgs) -> Result<String, CliError> {
    let kind: ProbeKind = a.kind.parse().map_err(|e: ProbeError| CliError::Usage(e.to_string()))?;
    let mut config: ProbeTrainConfig = match &a.config {
        Some(p) => parse_json(p)?,
        None => ProbeTrainConfig::default(),
    };
    if let Some(t) = a.tau {
        config.tau = t;
    }
    if let Some(l) = &a.layers {
        config.layers = l
            .parse::<LayerSelection>()
            .map_err(|e| CliError::Usage(format!("--layers {l}: {e}")))?;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    check_fraction("eval-fraction", a.split.eval_fraction, false)?;
    let cache = load_cache(&a.cache)?;
    let (train, eval) = split_train_eval(&cache.labels, a.split.eval_fraction, a.split.split_seed)?;
    let fit = train_probe(&cache, &train, &eval, kind, &config)?;
    let mut bytes = Vec::new();
    write_probe(&fit.model, &mut bytes)?;
    write_atomic(&a.out, &bytes)?;
    Ok(json!({
        "kind": kind.as_str(),
        "train_accuracy": fit.train_accuracy,
        "eval_accuracy": fit.eval_accuracy,
        "final_loss": fit.final_loss,
        "tau": fit.model.tau,
        "out": a.out.display().to_string(),
    })
    .to_string())
}

fn cmd_distill(a: &DistillArgs) -> Result<String, CliError> {
    let method: Method = a.method.parse().map_err(|e: DistillError| CliError::Usage(e.to_string()))?;
    let mut spec: DistillSpec = match &a.spec {
        Some(p) => parse_json(p)?,
        None => DistillSpec::default(),
    };
    spec.method = method;
    spec.seed = a.seed;
    spec.validate()?;
    check_fraction("fraction", a.fraction, true)?;
    check_fraction("eval-fraction", a.split.eval_fraction, false)?;
    if method.uses_probe() && a.probe.is_none() {
        return Err(CliError::Usage(
            "configuration error: probe_kd needs a probe file (--probe)".into(),
        ));
    }
    let cache = load_cache(&a.cache)?;
    let probe = match (&a.probe, method.uses_probe()) {
        (Some(p), true) => {
            let f = fs::File::open(p)
                .map_err(|e| CliError::Usage(format!("cannot open probe {}: {e}", p.display())))?;
            Some(read_probe(std::io::BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?)
        }
        _ => None,
    };
    let (train, eval) = split_train_eval(&cache.labels, a.split.eval_fraction, a.split.split_seed)?;
    let record = distill_one(&cache, probe.as_ref(), &train, &eval, a.fraction, &spec)?;
    let text = serde_json::to_string(&record).expect("records serialize");
    write_atomic(&a.out, text.as_bytes())?;
    Ok(text)
}

fn read_record(path: &Path) -> Result<RunRecord, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_report(a: &ReportArgs) -> Result<String, CliError> {
    let keys = GroupKey::parse_list(&a.by).map_err(|e| CliError::Usage(format!("--by: {e}")))?;
    let records = a.inputs.iter().map(|p| read_record(p)).collect::<Result<Vec<_>, _>>()?;
    let table = aggregate(&records, &keys)?;
    write_atomic(&a.out, table.to_csv_string()?.as_bytes())?;
    write_atomic(&a.out.with_extension("json"), table.to_json()?.as_bytes())?;
    Ok(json!({ "rows": table.rows.len(), "out": a.out.display().to_string() }).to_string())
}

fn cmd_sweep(a: &SweepArgs) -> Result<String, CliError> {
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let plan = ExperimentPlan::from_json(&read_text(&a.plan)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", a.plan.display())))?;
    let base = a.plan.parent().unwrap_or(Path::new("."));
    let summary = run_sweep(&plan, base, a.jobs)?;
    let line = serde_json::to_string(&summary).expect("summary serializes");
    if summary.failed > 0 {
        return Err(CliError::Run(format!(
            "{} of {} runs failed; see {}",
            summary.failed,
            summary.total,
            summary.failure_manifest.as_deref().unwrap_or("the failure manifest")
        )));
    }
    Ok(line)
}

/// Dispatches a parsed command; returns the line printed on success.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::TrainProbe(a) => cmd_train_probe(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Report(a) => cmd_report(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// Parses `args`, runs the command, reports to stdout/stderr and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let err = CliError::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", err.to_json_line());
            return err.exit_code();
        }
    };
    match run(&cli) {
        Ok(line) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{line}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.exit_code()
        }
    }
}
