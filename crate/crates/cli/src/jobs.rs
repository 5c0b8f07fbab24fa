//! Per-command configurations and their execution.
//!
//! Each job is a serde struct: `--config` fills it, flags override fields,
//! and the final value is snapshotted into the manifest.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use provts::clean::{clean, load_golden_rules, CleanConfig};
use provts::eval::{cross_validate, evaluate_model, EvalReport, DEFAULT_FOLDS};
use provts::importance::{leave_group_out, permfit, ImportanceReport, PermfitConfig};
use provts::ingest::{apply_exclusions, parse_log, read_exclusions, write_csv, write_jsonl, LogFormat};
use provts::interpret::{annotate, AnnotateConfig};
use provts::model::{fit_model, ModelConfig, ModelKind, TrainedModel};
use provts::synth::{generate, generate_openmix, Preset, SignalScope, SynthConfig, TruthSegment};
use provts::transform::{build_dataset, FeatureTensor, TransformConfig};
use provts::{Environment, Error, FeatureGroup, FeatureSchema, Scale, SessionTrace};

use crate::manifest::OutputDir;

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidConfig(msg.into()).into()
}

/// A required argument came from neither the flags nor `--config`.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn require_input(input: &Option<PathBuf>) -> Result<&Path> {
    input
        .as_deref()
        .ok_or_else(|| UsageError("missing input: pass --in <path>".into()).into())
}

fn read_logs(path: &Path, environment: Environment, schema: &FeatureSchema) -> Result<Vec<SessionTrace>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(parse_log(BufReader::new(file), LogFormat::from_path(path), environment, schema)?)
}

fn load_tensor(path: &Path) -> Result<FeatureTensor> {
    FeatureTensor::load(path).with_context(|| format!("loading tensor {}", path.display()))
}

fn model_or_default(model: &Option<ModelConfig>) -> ModelConfig {
    model.clone().unwrap_or_else(|| ModelConfig::default_for(ModelKind::Rocket))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LogFormatName {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthJob {
    pub preset: Preset,
    /// Traces per class (or total open traces for `openmix`).
    pub n: usize,
    pub environment: Environment,
    pub seed: u64,
    pub format: LogFormatName,
    pub scope: SignalScope,
    /// Replaces the preset's archetypes and layout when given.
    pub synth: Option<SynthConfig>,
}

impl Default for SynthJob {
    fn default() -> Self {
        SynthJob {
            preset: Preset::Spaces3,
            n: 30,
            environment: Environment::Immersive,
            seed: 0,
            format: LogFormatName::Csv,
            scope: SignalScope::All,
            synth: None,
        }
    }
}

#[derive(Serialize)]
struct TruthRecord<'a> {
    trace_id: String,
    segments: &'a [TruthSegment],
}

impl SynthJob {
    pub fn run(&self, out: &mut OutputDir) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("--n must be at least 1"));
        }
        let mut config = self.synth.clone().unwrap_or_else(|| SynthConfig::preset(self.preset));
        config.scope = self.scope;
        let schema = FeatureSchema::for_environment(self.environment);
        let (traces, truth) = if self.preset == Preset::Openmix && self.synth.is_none() {
            let open = generate_openmix(&config, self.n, self.seed, self.environment)?;
            let truth: Vec<(String, Vec<TruthSegment>)> =
                open.iter().map(|o| (o.trace.id(), o.truth.clone())).collect();
            (open.into_iter().map(|o| o.trace).collect(), Some(truth))
        } else {
            (generate(&config, self.n, self.seed, self.environment)?, None)
        };
        let name = match self.format {
            LogFormatName::Csv => "logs.csv",
            LogFormatName::Jsonl => "logs.jsonl",
        };
        let path = out.path(name)?;
        let file = std::io::BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        match self.format {
            LogFormatName::Csv => write_csv(file, &schema, &traces)?,
            LogFormatName::Jsonl => write_jsonl(file, &schema, &traces)?,
        }
        if let Some(truth) = truth {
            let records: Vec<TruthRecord> = truth
                .iter()
                .map(|(id, segments)| TruthRecord {
                    trace_id: id.clone(),
                    segments,
                })
                .collect();
            out.write("truth.json", serde_json::to_string_pretty(&records)?)?;
        }
        eprintln!("wrote {} traces to {}", traces.len(), path.display());
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestJob {
    pub inputs: Vec<PathBuf>,
    pub environment: Environment,
    pub golden_rules: Option<PathBuf>,
    pub exclusions: Option<PathBuf>,
    pub clean: CleanConfig,
}

impl Default for IngestJob {
    fn default() -> Self {
        IngestJob {
            inputs: Vec::new(),
            environment: Environment::Immersive,
            golden_rules: None,
            exclusions: None,
            clean: CleanConfig::default(),
        }
    }
}

impl IngestJob {
    pub fn all_inputs(&self) -> Vec<PathBuf> {
        self.inputs
            .iter()
            .chain(&self.golden_rules)
            .chain(&self.exclusions)
            .cloned()
            .collect()
    }

    pub fn run(&self, out: &mut OutputDir) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(UsageError("missing input: pass --in <log> (repeatable)".into()).into());
        }
        let schema = FeatureSchema::for_environment(self.environment);
        let mut traces = Vec::new();
        for path in &self.inputs {
            traces.extend(read_logs(path, self.environment, &schema)?);
        }
        if let Some(path) = &self.exclusions {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            apply_exclusions(&mut traces, &read_exclusions(file)?);
        }
        let rules = match &self.golden_rules {
            Some(path) => load_golden_rules(path, &schema).with_context(|| format!("loading {}", path.display()))?,
            None => Vec::new(),
        };
        let (kept, report) = clean(traces, &rules, &self.clean);
        let path = out.path("clean.csv")?;
        let file = std::io::BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_csv(file, &schema, &kept)?;
        out.write("clean_report.json", serde_json::to_string_pretty(&report)?)?;
        eprintln!(
            "kept {} of {} traces (short {}, golden {}, interaction {})",
            report.kept, report.total_in, report.dropped_short, report.dropped_golden, report.dropped_interaction
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformJob {
    pub input: Option<PathBuf>,
    pub environment: Environment,
    pub transform: TransformConfig,
}

impl Default for TransformJob {
    fn default() -> Self {
        TransformJob {
            input: None,
            environment: Environment::Immersive,
            transform: TransformConfig::default(),
        }
    }
}

impl TransformJob {
    pub fn run(&self, out: &mut OutputDir) -> Result<()> {
        let input = require_input(&self.input)?;
        let schema = FeatureSchema::for_environment(self.environment);
        let traces = read_logs(input, self.environment, &schema)?;
        let tensor = build_dataset(&traces, &schema, &self.transform)?;
        let path = out.path("tensor.bin")?;
        out.path("tensor.json")?;
        tensor.save(&path)?;
        let (n, l, d) = tensor.data.dim();
        eprintln!("tensor {n} x {l} x {d} written to {}", path.display());
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainJob {
    pub input: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    pub scale: Scale,
    pub seed: u64,
}

impl Default for TrainJob {
    fn default() -> Self {
        TrainJob {
            input: None,
            model: None,
            scale: Scale::Space,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct ModelSummary<'a> {
    id: String,
    meta: &'a provts::model::ModelMeta,
}

impl TrainJob {
    pub fn run(&self, out: &mut OutputDir) -> Result<()> {
        let input = require_input(&self.input)?;
        let tensor = load_tensor(input)?;
        let config = model_or_default(&self.model);
        config.validate()?;
        let model = fit_model(&tensor, self.scale, &config, self.seed)?;
        let path = out.path("model.bin")?;
        model.save(&path)?;
        let summary = ModelSummary {
            id: model.id()?,
            meta: &model.meta,
        };
        out.write("model.json", serde_json::to_string_pretty(&summary)?)?;
        eprintln!("{} model {} trained on {} traces", config.kind().name(), summary.id, tensor.len());
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalJob {
    pub input: Option<PathBuf>,
    /// Cross-validates this configuration when no `model_file` is given.
    pub model: Option<ModelConfig>,
    /// Scores a trained model on the input tensor instead.
    pub model_file: Option<PathBuf>,
    pub scale: Scale,
    pub folds: usize,
    pub seed: u64,
}

impl Default for EvalJob {
    fn default() -> Self {
        EvalJob {
            input: None,
            model: None,
            model_file: None,
            scale: Scale::Space,
            folds: DEFAULT_FOLDS,
            seed: 0,
        }
    }
}

impl EvalJob {
    pub fn all_inputs(&self) -> Vec<PathBuf> {
        self.input.iter().chain(&self.model_file).cloned().collect()
    }

    pub fn run(&self, out: &mut OutputDir) -> Result<()> {
        let input = require_input(&self.input)?;
        let tensor = load_tensor(input)?;
        let report: EvalReport = match &self.model_file {
            Some(path) => {
                let model = TrainedModel::load(path).with_context(|| format!("loading model {}", path.display()))?;
                evaluate_model(&model, &tensor)?
            }
            None => {
                let config = model_or_default(&self.model);
                cross_validate(&tensor, &config, self.scale, self.folds, self.seed)?
            }
        };
        out.write("eval.json", report.to_json()?)?;
        out.write("eval.csv", report.to_csv())?;
        out.write("confusion.csv", report.confusion.to_csv())?;
        let png = out.path("confusion.png")?;
        report.confusion.write_png(&png)?;
        println!(
            "{} {}-scale: accuracy {:.4}, macro-F1 {:.4} (n = {}, folds = {})",
            report.model, report.scale.name(), report.accuracy, report.macro_f1, report.n, report.folds
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceJob {
    pub input: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    pub scale: Scale,
    pub seed: u64,
    /// Leave-group-out groups; empty means every group in the schema.
    pub groups: Vec<FeatureGroup>,
    pub leave_group_out: bool,
    /// PermFIT features; empty means the immersive features, or all when there are none.
    pub features: Vec<String>,
    pub run_permfit: bool,
    pub permfit: PermfitConfig,
}

impl Default for ImportanceJob {
    fn default() -> Self {
        ImportanceJob {
            input: None,
            model: None,
            scale: Scale::Space,
            seed: 0,
            groups: Vec::new(),
            leave_group_out: true,
            features: Vec::new(),
            run_permfit: true,
            permfit: PermfitConfig::default(),
        }
    }
}

impl ImportanceJob {
    pub fn run(&self, out: &mut OutputDir) -> Result<()> {
        let input = require_input(&self.input)?;
        let tensor = load_tensor(input)?;
        let config = model_or_default(&self.model);
        config.validate()?;
        let schema = &tensor.raw_schema;

        let mut groups = Vec::new();
        if self.leave_group_out {
            let wanted: Vec<FeatureGroup> = if self.groups.is_empty() {
                FeatureGroup::ALL
                    .into_iter()
                    .filter(|g| !schema.indices_in_group(*g).is_empty())
                    .collect()
            } else {
                self.groups.clone()
            };
            let full = cross_validate(&tensor, &config, self.scale, DEFAULT_FOLDS, self.seed)?;
            for g in wanted {
                groups.push(leave_group_out(&tensor, &config, self.scale, g, self.seed, Some(&full))?);
            }
        }

        let mut ranked = Vec::new();
        if self.run_permfit {
            let features: Vec<String> = if self.features.is_empty() {
                let immersive = schema.indices_in_group(FeatureGroup::Immersive);
                let idx: Vec<usize> = if immersive.is_empty() { (0..schema.dim()).collect() } else { immersive };
                idx.iter().map(|&i| schema.features[i].name.clone()).collect()
            } else {
                self.features.clone()
            };
            ranked = permfit(&tensor, &config, self.scale, &features, &self.permfit, self.seed)?;
        }

        let report = ImportanceReport {
            model: config.kind().name().to_string(),
            scale: self.scale,
            groups,
            permfit: ranked,
        };
        out.write("importance.json", report.to_json()?)?;
        if self.leave_group_out {
            out.write("groups.csv", report.groups_csv())?;
            for g in &report.groups {
                println!(
                    "without {:<12} delta accuracy {:+.4}  delta macro-F1 {:+.4}",
                    g.group.name(),
                    g.delta_accuracy,
                    g.delta_macro_f1
                );
            }
        }
        if self.run_permfit {
            out.write("permfit.csv", report.permfit_csv())?;
            print!("{}", report.table());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretJob {
    pub input: Option<PathBuf>,
    pub model_file: Option<PathBuf>,
    /// Annotates only this trace id (`participant/trial`) when given.
    pub trace: Option<String>,
    pub annotate: AnnotateConfig,
}

impl Default for InterpretJob {
    fn default() -> Self {
        InterpretJob {
            input: None,
            model_file: None,
            trace: None,
            annotate: AnnotateConfig::default(),
        }
    }
}

impl InterpretJob {
    pub fn all_inputs(&self) -> Vec<PathBuf> {
        self.input.iter().chain(&self.model_file).cloned().collect()
    }

    pub fn run(&self, out: &mut OutputDir) -> Result<()> {
        let input = require_input(&self.input)?;
        let model_path = self
            .model_file
            .as_deref()
            .ok_or_else(|| UsageError("missing model: pass --model-file <model.bin>".into()))?;
        let model = TrainedModel::load(model_path).with_context(|| format!("loading model {}", model_path.display()))?;
        if !(0.0..=1.0).contains(&self.annotate.threshold) {
            return Err(invalid("threshold must lie in [0, 1]"));
        }
        let schema = model.meta.raw_schema.clone();
        let mut traces = read_logs(input, model.meta.environment, &schema)?;
        if let Some(id) = &self.trace {
            traces.retain(|t| &t.id() == id);
            if traces.is_empty() {
                return Err(invalid(format!("trace `{id}` not found in {}", input.display())));
            }
        }
        let mut timelines = Vec::with_capacity(traces.len());
        for (i, trace) in traces.iter().enumerate() {
            let timeline = annotate(trace, &model, &self.annotate)?;
            out.write(&format!("timeline_{i:03}.csv"), timeline.to_csv())?;
            out.write(&format!("timeline_{i:03}.svg"), timeline.to_svg(trace, &schema))?;
            let codes: Vec<String> = timeline.segments.iter().map(|s| s.code.to_string()).collect();
            println!("{}: {}", timeline.trace_id, codes.join(" "));
            timelines.push(timeline);
        }
        out.write("timelines.json", serde_json::to_string_pretty(&timelines)?)?;
        Ok(())
    }
}
