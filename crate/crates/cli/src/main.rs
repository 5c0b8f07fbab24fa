//! `provts`: the task-classification pipeline as one binary.
//!
//! Exit codes: 0 success, 1 invalid input or configuration (usage errors
//! included), 2 filesystem failure.

mod jobs;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use provts::importance::PermfitMode;
use provts::model::{ModelConfig, ModelKind};
use provts::synth::{Preset, SignalScope};
use provts::{Environment, FeatureGroup, Scale};

use jobs::*;
use manifest::{read_config, OutputDir, RunManifest, Runtime, MANIFEST_FILE, MANIFEST_FORMAT};

#[derive(Parser, Debug)]
#[command(name = "provts", version, about = "Classify visualization tasks from interaction and behavior logs")]
struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration (or a previous run's manifest); flags override it.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Worker threads (default: PROVTS_JOBS, else all logical cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate labeled (or open-exploration) synthetic logs.
    Synth(SynthArgs),
    /// Parse logs, apply exclusions and cleaning filters.
    Ingest(IngestArgs),
    /// Segment traces into a feature tensor.
    Transform(TransformArgs),
    /// Fit a classifier on a tensor.
    Train(TrainArgs),
    /// Cross-validate a configuration, or score a trained model.
    Eval(EvalArgs),
    /// Leave-group-out and PermFIT feature importance.
    Importance(ImportanceArgs),
    /// Annotate open sessions with a task-scale model.
    Interpret(InterpretArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    preset: Option<Preset>,
    /// Traces per class (total traces for openmix).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    env: Option<Environment>,
    #[arg(long, value_enum)]
    format: Option<LogFormatName>,
    /// `all` or `immersive_only`.
    #[arg(long, value_parser = parse_scope)]
    scope: Option<SignalScope>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Log file (CSV or JSONL); repeatable.
    #[arg(long = "in", value_name = "PATH")]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    env: Option<Environment>,
    #[arg(long, value_name = "JSON")]
    golden: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    exclusions: Option<PathBuf>,
    #[arg(long, value_name = "SECONDS")]
    min_duration: Option<f64>,
    /// Keep interaction-space trials.
    #[arg(long)]
    keep_interaction: bool,
}

#[derive(Args, Debug)]
struct TransformArgs {
    #[arg(long = "in", value_name = "LOG")]
    input: Option<PathBuf>,
    #[arg(long)]
    env: Option<Environment>,
    #[arg(long)]
    segments: Option<usize>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    scale: Option<Scale>,
    /// kNN neighbor count.
    #[arg(long)]
    k: Option<usize>,
    /// CNN training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// ROCKET kernel count.
    #[arg(long)]
    kernels: Option<usize>,
}

impl ModelArgs {
    fn apply(&self, model: &mut Option<ModelConfig>, scale: &mut Scale) {
        let mut cfg = match (model.take(), self.model) {
            (Some(c), Some(k)) if c.kind() != k => ModelConfig::default_for(k),
            (Some(c), _) => c,
            (None, k) => ModelConfig::default_for(k.unwrap_or(ModelKind::Rocket)),
        };
        match &mut cfg {
            ModelConfig::Knn(c) => set(&mut c.k, self.k),
            ModelConfig::Cnn(c) => set(&mut c.epochs, self.epochs),
            ModelConfig::Rocket(c) => set(&mut c.n_kernels, self.kernels),
        }
        *model = Some(cfg);
        set(scale, self.scale);
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long = "in", value_name = "TENSOR")]
    input: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long = "in", value_name = "TENSOR")]
    input: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Score this trained model instead of cross-validating.
    #[arg(long, value_name = "MODEL", conflicts_with = "model")]
    model_file: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args, Debug)]
struct ImportanceArgs {
    #[arg(long = "in", value_name = "TENSOR")]
    input: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated groups for leave-group-out.
    #[arg(long, value_delimiter = ',')]
    groups: Vec<FeatureGroup>,
    /// Comma-separated raw features for PermFIT.
    #[arg(long, value_delimiter = ',')]
    features: Vec<String>,
    #[arg(long)]
    repeats: Option<usize>,
    /// `retrain` (default) or `inference`.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<PermfitMode>,
    #[arg(long)]
    no_groups: bool,
    #[arg(long)]
    no_permfit: bool,
}

#[derive(Args, Debug)]
struct InterpretArgs {
    #[arg(long = "in", value_name = "LOG")]
    input: Option<PathBuf>,
    #[arg(long, value_name = "MODEL")]
    model_file: Option<PathBuf>,
    /// Only this trace id (`participant/trial`).
    #[arg(long)]
    trace: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Frames added per window.
    #[arg(long)]
    step: Option<usize>,
    /// Frames in the first window.
    #[arg(long)]
    start_len: Option<usize>,
    #[arg(long)]
    indicator: Option<String>,
}

fn parse_scope(s: &str) -> Result<SignalScope, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("unknown scope `{s}`"))
}

fn parse_mode(s: &str) -> Result<PermfitMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("unknown mode `{s}`"))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load<T: DeserializeOwned + Default>(cli: &Cli) -> Result<T> {
    match &cli.config {
        Some(path) => {
            let value = read_config(path)?;
            Ok(serde_json::from_value(value).map_err(provts::Error::from)?)
        }
        None => Ok(T::default()),
    }
}

/// Resolved job plus what the manifest needs to know about it.
struct Plan {
    name: &'static str,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    config: serde_json::Value,
    run: Box<dyn FnOnce(&mut OutputDir) -> Result<()>>,
}

fn plan<T: Serialize + Clone + 'static>(
    name: &'static str,
    job: T,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    run: fn(&T, &mut OutputDir) -> Result<()>,
) -> Result<Plan> {
    Ok(Plan {
        name,
        seed,
        inputs,
        config: serde_json::to_value(&job)?,
        run: Box::new(move |out| run(&job, out)),
    })
}

fn resolve(cli: &Cli) -> Result<Plan> {
    match &cli.command {
        Command::Synth(a) => {
            let mut job: SynthJob = load(cli)?;
            set(&mut job.preset, a.preset);
            set(&mut job.n, a.n);
            set(&mut job.environment, a.env);
            set(&mut job.format, a.format);
            set(&mut job.scope, a.scope);
            set(&mut job.seed, cli.seed);
            plan("synth", job.clone(), Some(job.seed), Vec::new(), SynthJob::run)
        }
        Command::Ingest(a) => {
            let mut job: IngestJob = load(cli)?;
            if !a.inputs.is_empty() {
                job.inputs = a.inputs.clone();
            }
            set(&mut job.environment, a.env);
            set(&mut job.golden_rules, a.golden.clone().map(Some));
            set(&mut job.exclusions, a.exclusions.clone().map(Some));
            set(&mut job.clean.min_duration_s, a.min_duration);
            if a.keep_interaction {
                job.clean.exclude_interaction = false;
            }
            let inputs = job.all_inputs();
            plan("ingest", job, None, inputs, IngestJob::run)
        }
        Command::Transform(a) => {
            let mut job: TransformJob = load(cli)?;
            set(&mut job.input, a.input.clone().map(Some));
            set(&mut job.environment, a.env);
            set(&mut job.transform.segments, a.segments);
            let inputs = job.input.iter().cloned().collect();
            plan("transform", job, None, inputs, TransformJob::run)
        }
        Command::Train(a) => {
            let mut job: TrainJob = load(cli)?;
            set(&mut job.input, a.input.clone().map(Some));
            a.model.apply(&mut job.model, &mut job.scale);
            set(&mut job.seed, cli.seed);
            let inputs = job.input.iter().cloned().collect();
            plan("train", job.clone(), Some(job.seed), inputs, TrainJob::run)
        }
        Command::Eval(a) => {
            let mut job: EvalJob = load(cli)?;
            set(&mut job.input, a.input.clone().map(Some));
            set(&mut job.model_file, a.model_file.clone().map(Some));
            if job.model_file.is_none() {
                a.model.apply(&mut job.model, &mut job.scale);
            } else {
                job.model = None;
            }
            set(&mut job.folds, a.folds);
            set(&mut job.seed, cli.seed);
            let inputs = job.all_inputs();
            plan("eval", job.clone(), Some(job.seed), inputs, EvalJob::run)
        }
        Command::Importance(a) => {
            let mut job: ImportanceJob = load(cli)?;
            set(&mut job.input, a.input.clone().map(Some));
            a.model.apply(&mut job.model, &mut job.scale);
            if !a.groups.is_empty() {
                job.groups = a.groups.clone();
            }
            if !a.features.is_empty() {
                job.features = a.features.clone();
            }
            set(&mut job.permfit.repeats, a.repeats);
            set(&mut job.permfit.mode, a.mode);
            if a.no_groups {
                job.leave_group_out = false;
            }
            if a.no_permfit {
                job.run_permfit = false;
            }
            set(&mut job.seed, cli.seed);
            let inputs = job.input.iter().cloned().collect();
            plan("importance", job.clone(), Some(job.seed), inputs, ImportanceJob::run)
        }
        Command::Interpret(a) => {
            let mut job: InterpretJob = load(cli)?;
            set(&mut job.input, a.input.clone().map(Some));
            set(&mut job.model_file, a.model_file.clone().map(Some));
            set(&mut job.trace, a.trace.clone().map(Some));
            set(&mut job.annotate.threshold, a.threshold);
            set(&mut job.annotate.step, a.step.map(Some));
            set(&mut job.annotate.start_len, a.start_len);
            set(&mut job.annotate.indicator_feature, a.indicator.clone().map(Some));
            let inputs = job.all_inputs();
            plan("interpret", job, None, inputs, InterpretJob::run)
        }
    }
}

fn jobs(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("PROVTS_JOBS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| provts::Error::InvalidConfig(format!("PROVTS_JOBS=`{v}` is not a thread count")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(provts::Error::InvalidConfig("--jobs must be at least 1".into()).into());
    }
    Ok(n)
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let threads = jobs(cli.jobs)?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    let plan = resolve(&cli)?;
    let mut out = OutputDir::create(&cli.out, plan.name, &plan.inputs)?;
    (plan.run)(&mut out)?;
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        command: plan.name.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: plan.seed,
        config: plan.config,
        inputs: plan.inputs,
        outputs: out.files.clone(),
        runtime: Runtime {
            argv,
            jobs: threads,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
    };
    out.write(MANIFEST_FILE, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>().is_some() || e.downcast_ref::<provts::Error>().is_some_and(|e| e.is_io())
    });
    if io {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(1);
        }
    };
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
