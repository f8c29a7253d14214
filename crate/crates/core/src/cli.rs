//! Command-line entry point.
//!
//! Exit status is 0 on success, 1 on a domain error (reported on stderr as a
//! JSON object with a module-qualified code) and 2 on a usage error.

use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::eval::{self, EvalSummary};
use crate::model::checkpoint;
use crate::model::gradcheck::gradient_check;
use crate::molgraph::parse_smiles;
use crate::tasks::synth::{synth_tasks, task_type_of, verify_labels, CatalogConfig};
use crate::tasks::{load_dataset, save_dataset, TaskRecord};
use crate::train::{few_shot_tune_head, pretrain, Precision, TrainConfig};

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(
    name = "gimlet",
    version,
    about = "Graph-text transformer for instruction-based molecule property prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a SMILES string and print the graph as JSON.
    Parse { smiles: String },
    /// Write synthetic pretraining and evaluation datasets.
    MakeSynth(MakeSynthArgs),
    /// Pretrain a model on a dataset and save a checkpoint.
    Pretrain(PretrainArgs),
    /// Zero-shot evaluation of a checkpoint.
    EvalZeroShot(EvalArgs),
    /// Tune only the output projection on a few labeled shots.
    FewShot(FewShotArgs),
    /// Export encoder attention maps as CSV.
    ExportAttn(ExportArgs),
    /// Compare analytic and finite-difference gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct MakeSynthArgs {
    /// Output directory for pretrain.jsonl and eval.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Molecule pool seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_molecules: Option<usize>,
    /// Catalog config (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training config (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Progress log (JSON lines); stderr when absent.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Evaluation dataset; the default synthetic evaluation catalog when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Task id or synthetic task type; every task when absent.
    #[arg(long)]
    task: Option<String>,
    /// Molecule pool seed for the default catalog.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FewShotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    task: String,
    /// Shots per class.
    #[arg(long, default_value_t = 8)]
    shots: usize,
    /// Tuned checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    smiles: String,
    #[arg(long)]
    instruction: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 20)]
    per_family: usize,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Domain failure with a module-qualified code.
#[derive(Debug, Serialize)]
struct CliError {
    code: String,
    message: String,
}

impl CliError {
    fn new(module: &str, code: &str, err: impl Display) -> Self {
        Self {
            code: format!("{module}.{code}"),
            message: err.to_string(),
        }
    }
}

macro_rules! domain {
    ($module:literal, $e:expr) => {{
        let e = $e;
        CliError::new($module, e.code(), &e)
    }};
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::new("cli", "IoError", e)
}

fn write_json(value: &impl Serialize, out: Option<&Path>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    if let Some(path) = out {
        std::fs::write(path, format!("{text}\n")).map_err(io_err)?;
    }
    writeln!(stdout, "{text}").map_err(io_err)
}

fn load_tasks(path: &Path) -> Result<Vec<TaskRecord>, CliError> {
    let tasks = load_dataset(path).map_err(|e| domain!("tasks", e))?;
    verify_labels(&tasks).map_err(|e| CliError::new("tasks", "LabelMismatch", e))?;
    Ok(tasks)
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    match path {
        Some(p) => TrainConfig::from_file(p).map_err(|e| CliError::new("train", "ConfigError", e)),
        None => Ok(TrainConfig::default()),
    }
}

fn load_checkpoint(path: &Path) -> Result<checkpoint::Checkpoint, CliError> {
    let ckpt = checkpoint::load(path).map_err(|e| domain!("model", e))?;
    if ckpt.vocab.is_none() {
        return Err(CliError::new("cli", "MissingVocab", "checkpoint carries no vocabulary"));
    }
    Ok(ckpt)
}

fn eval_tasks(data: Option<&Path>, seed: u64) -> Result<Vec<TaskRecord>, CliError> {
    match data {
        Some(p) => load_tasks(p),
        None => Ok(synth_tasks(&CatalogConfig::default(), seed).eval),
    }
}

fn select<'a>(tasks: &'a [TaskRecord], name: Option<&str>) -> Result<Vec<&'a TaskRecord>, CliError> {
    let Some(name) = name else {
        return Ok(tasks.iter().collect());
    };
    let exact: Vec<_> = tasks.iter().filter(|t| t.task_id == name).collect();
    if !exact.is_empty() {
        return Ok(exact);
    }
    let by_type: Vec<_> = tasks
        .iter()
        .filter(|t| task_type_of(&t.task_id).is_some_and(|ty| ty.name() == name))
        .collect();
    if by_type.is_empty() {
        Err(CliError::new("cli", "UnknownTask", format!("no task named {name:?}")))
    } else {
        Ok(by_type)
    }
}

fn init_threads() {
    let Some(n) = std::env::var("GIMLET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    else {
        return;
    };
    // A second initialization in the same process is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
}

fn execute(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32, CliError> {
    match cli.command {
        Command::Parse { smiles } => {
            let g = parse_smiles(&smiles).map_err(|e| domain!("molgraph", e))?;
            write_json(&g, None, stdout)?;
        }
        Command::MakeSynth(a) => {
            let mut catalog: CatalogConfig = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(io_err)?;
                    if p.extension().is_some_and(|e| e == "json") {
                        serde_json::from_str(&text).map_err(|e| CliError::new("tasks", "ConfigError", e))?
                    } else {
                        toml::from_str(&text).map_err(|e| CliError::new("tasks", "ConfigError", e))?
                    }
                }
                None => CatalogConfig::default(),
            };
            if let Some(n) = a.n_molecules {
                catalog.n_molecules = n;
            }
            let corpus = synth_tasks(&catalog, a.seed);
            std::fs::create_dir_all(&a.out).map_err(io_err)?;
            let (pre, ev) = (a.out.join("pretrain.jsonl"), a.out.join("eval.jsonl"));
            save_dataset(&corpus.pretrain, &pre).map_err(|e| domain!("tasks", e))?;
            save_dataset(&corpus.eval, &ev).map_err(|e| domain!("tasks", e))?;
            write_json(
                &json!({"pretrain": pre, "eval": ev,
                        "pretrain_tasks": corpus.pretrain.len(), "eval_tasks": corpus.eval.len()}),
                None,
                stdout,
            )?;
        }
        Command::Pretrain(a) => {
            let mut config = load_train_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                config.seed = s;
            }
            if let Some(p) = a.precision {
                config.precision = p.into();
            }
            if let Some(e) = a.epochs {
                config.epochs = e;
            }
            let tasks = load_tasks(&a.data)?;
            let mut log: Box<dyn Write + '_> = match &a.log {
                Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p).map_err(io_err)?)),
                None => Box::new(&mut *stderr),
            };
            let result = pretrain(&tasks, &config, Some(&a.out), &mut log).map_err(|e| domain!("train", e))?;
            log.flush().map_err(io_err)?;
            drop(log);
            write_json(&result.report, None, stdout)?;
        }
        Command::EvalZeroShot(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let vocab = ckpt.vocab.as_ref().expect("checked");
            let tasks = eval_tasks(a.data.as_deref(), a.seed)?;
            let mut reports = Vec::new();
            for t in select(&tasks, a.task.as_deref())? {
                reports.push(eval::evaluate(t, &ckpt.params, vocab, a.split_seed).map_err(|e| domain!("eval", e))?);
            }
            write_json(&EvalSummary::new(reports), a.out.as_deref(), stdout)?;
        }
        Command::FewShot(a) => {
            let mut config = load_train_config(a.config.as_deref())?;
            config.seed = a.seed;
            config.split_seed = a.split_seed;
            if let Some(p) = a.precision {
                config.precision = p.into();
            }
            let ckpt = load_checkpoint(&a.ckpt)?;
            let vocab = ckpt.vocab.as_ref().expect("checked");
            let tasks = eval_tasks(a.data.as_deref(), a.seed)?;
            let task = select(&tasks, Some(&a.task))?[0];
            let before = eval::evaluate(task, &ckpt.params, vocab, a.split_seed).map_err(|e| domain!("eval", e))?;
            let (tuned, report) =
                few_shot_tune_head(&ckpt.params, vocab, task, a.shots, &config).map_err(|e| domain!("train", e))?;
            let after = eval::evaluate(task, &tuned, vocab, a.split_seed).map_err(|e| domain!("eval", e))?;
            checkpoint::save(&a.out, &tuned, Some(vocab), config.precision.dtype()).map_err(|e| domain!("model", e))?;
            write_json(
                &json!({"tuning": report, "before": before, "after": after, "checkpoint": a.out}),
                None,
                stdout,
            )?;
        }
        Command::ExportAttn(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let g = parse_smiles(&a.smiles).map_err(|e| domain!("molgraph", e))?;
            let dump = eval::export_attention(
                &g,
                &a.instruction,
                &ckpt.params,
                ckpt.vocab.as_ref().expect("checked"),
                &a.out,
            )
            .map_err(|e| domain!("eval", e))?;
            write_json(
                &json!({"dir": a.out, "labels": dump.labels, "layers": dump.maps.len(),
                        "heads": ckpt.params.config.n_heads}),
                None,
                stdout,
            )?;
        }
        Command::GradCheck(a) => {
            let report = gradient_check(a.seed, a.step, a.per_family).map_err(|e| domain!("model", e))?;
            write_json(
                &json!({"seed": report.seed, "step": report.step, "max_rel_error": report.max_rel_error,
                        "tolerance": GRAD_CHECK_TOLERANCE, "checks": report.checks.len()}),
                a.out.as_deref(),
                stdout,
            )?;
            if report.max_rel_error > GRAD_CHECK_TOLERANCE {
                let e = CliError::new(
                    "model",
                    "GradientMismatch",
                    format!(
                        "max relative error {:e} exceeds {GRAD_CHECK_TOLERANCE:e}",
                        report.max_rel_error
                    ),
                );
                writeln!(stderr, "{}", json!({ "error": e })).map_err(io_err)?;
                return Ok(1);
            }
        }
    }
    Ok(0)
}

/// Runs one command; returns the process exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(stderr, "{}", e.render());
                    2
                }
            };
        }
    };
    init_threads();
    match execute(cli, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "{}", json!({ "error": e }));
            1
        }
    }
}
