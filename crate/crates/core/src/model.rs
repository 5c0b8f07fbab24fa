//! Model configuration, fitting and the on-disk model container shared by the
//! three classifiers.
//!
//! A [`TrainedModel`] bundles the min-max normalizer fitted on its training
//! tensor with the classifier, so callers always pass unnormalized tensors.
//!
//! Container layout: magic `PVTSMDL\x01`, little-endian u64 header length,
//! JSON header, then the binary sections listed in the header in order
//! (little-endian `f64` or `u32`).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnn::{train_cnn, CnnConfig, CnnModel, Layout};
use crate::error::{Error, Result};
use crate::knn::{KnnConfig, KnnModel};
use crate::ridge::{RidgeClassifier, Standardizer};
use crate::rocket::{Kernel, KernelSet, RocketConfig, RocketModel};
use crate::transform::{FeatureTensor, Normalizer, Statistic, TransformConfig};
use crate::types::{hex_digest, Environment, FeatureSchema, Scale};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Knn,
    Cnn,
    Rocket,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Knn => "knn",
            ModelKind::Cnn => "cnn",
            ModelKind::Rocket => "rocket",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "knn" => Ok(ModelKind::Knn),
            "cnn" => Ok(ModelKind::Cnn),
            "rocket" => Ok(ModelKind::Rocket),
            other => Err(Error::InvalidConfig(format!("unknown model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Knn(KnnConfig),
    Cnn(CnnConfig),
    Rocket(RocketConfig),
}

impl ModelConfig {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Knn => ModelConfig::Knn(KnnConfig::default()),
            ModelKind::Cnn => ModelConfig::Cnn(CnnConfig::default()),
            ModelKind::Rocket => ModelConfig::Rocket(RocketConfig::default()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Knn(_) => ModelKind::Knn,
            ModelConfig::Cnn(_) => ModelKind::Cnn,
            ModelConfig::Rocket(_) => ModelKind::Rocket,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Knn(c) => c.validate(),
            ModelConfig::Cnn(c) => c.validate(),
            ModelConfig::Rocket(c) => c.validate(),
        }
    }
}

/// Labels, per-class scores (columns follow `classes()`) and confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub labels: Vec<i32>,
    pub scores: Array2<f64>,
    pub confidence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Knn(KnnModel),
    Cnn(CnnModel),
    Rocket(RocketModel),
}

/// Maps a nonnegative top-2 score margin into [0, 1): `2σ(m) − 1`.
pub fn margin_confidence(margin: f64) -> f64 {
    (margin / 2.0).tanh().max(0.0)
}

impl Classifier {
    /// Fits on an already normalized tensor.
    pub fn fit(config: &ModelConfig, data: ArrayView3<f64>, labels: &[i32], seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(match config {
            ModelConfig::Knn(c) => Classifier::Knn(KnnModel::fit(data.to_owned(), labels, c.clone())?),
            ModelConfig::Cnn(c) => Classifier::Cnn(train_cnn(data, labels, c, seed)?),
            ModelConfig::Rocket(c) => Classifier::Rocket(RocketModel::fit(data, labels, c, seed)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Classifier::Knn(_) => ModelKind::Knn,
            Classifier::Cnn(_) => ModelKind::Cnn,
            Classifier::Rocket(_) => ModelKind::Rocket,
        }
    }

    pub fn classes(&self) -> &[i32] {
        match self {
            Classifier::Knn(m) => &m.classes,
            Classifier::Cnn(m) => &m.classes,
            Classifier::Rocket(m) => m.classes(),
        }
    }

    /// Continuous per-class scores: vote fractions, probabilities or ridge scores.
    pub fn scores(&self, data: ArrayView3<f64>) -> Result<Array2<f64>> {
        Ok(self.predict(data)?.scores)
    }

    pub fn predict(&self, data: ArrayView3<f64>) -> Result<Predictions> {
        match self {
            Classifier::Knn(m) => {
                let preds = m.predict_all(data)?;
                let scores = KnnModel::vote_fractions(&preds, m.classes.len());
                let labels: Vec<i32> = preds.iter().map(|p| p.label).collect();
                let confidence = labels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| scores[[i, m.classes.binary_search(l).expect("known class")]])
                    .collect();
                Ok(Predictions {
                    labels,
                    scores,
                    confidence,
                })
            }
            Classifier::Cnn(m) => {
                let (labels, scores) = m.predict(data)?;
                let confidence = scores
                    .rows()
                    .into_iter()
                    .map(|r| r.iter().copied().fold(0.0, f64::max))
                    .collect();
                Ok(Predictions {
                    labels,
                    scores,
                    confidence,
                })
            }
            Classifier::Rocket(m) => {
                let scores = m.decision_function(data)?;
                let mut labels = Vec::with_capacity(scores.nrows());
                let mut confidence = Vec::with_capacity(scores.nrows());
                for row in scores.rows() {
                    let r = row.as_slice().expect("standard layout");
                    let best = argmax(r);
                    let second = r
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != best)
                        .map(|(_, v)| *v)
                        .fold(f64::NEG_INFINITY, f64::max);
                    labels.push(m.classes()[best]);
                    confidence.push(if second.is_finite() {
                        margin_confidence(r[best] - second)
                    } else {
                        1.0
                    });
                }
                Ok(Predictions {
                    labels,
                    scores,
                    confidence,
                })
            }
        }
    }

    /// `scores(permuted) − scores(data)` for each block permutation of `columns`.
    pub fn permutation_score_shifts(
        &self,
        data: ArrayView3<f64>,
        columns: &[usize],
        perms: &[Vec<usize>],
    ) -> Result<Vec<Array2<f64>>> {
        if let Classifier::Rocket(m) = self {
            return m.permutation_score_shifts(data, columns, perms);
        }
        let base = self.scores(data)?;
        perms
            .iter()
            .map(|perm| {
                let permuted = permute_columns(data, columns, perm)?;
                Ok(self.scores(permuted.view())? - &base)
            })
            .collect()
    }
}

/// Copies `data` with the given columns' whole time series moved between
/// samples: sample `i` receives sample `perm[i]`'s values.
pub fn permute_columns(data: ArrayView3<f64>, columns: &[usize], perm: &[usize]) -> Result<Array3<f64>> {
    let (n, _, d) = data.dim();
    if perm.len() != n {
        return Err(Error::ShapeMismatch("permutation length differs from sample count".into()));
    }
    if let Some(&c) = columns.iter().find(|&&c| c >= d) {
        return Err(Error::ShapeMismatch(format!("column {c} out of range for {d} features")));
    }
    let mut out = data.to_owned();
    for (i, &j) in perm.iter().enumerate() {
        for &c in columns {
            out.index_axis_mut(Axis(0), i)
                .column_mut(c)
                .assign(&data.index_axis(Axis(0), j).column(c));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub scale: Scale,
    pub environment: Environment,
    pub raw_schema: FeatureSchema,
    pub statistics: Vec<Statistic>,
    pub segments: usize,
    pub feature_names: Vec<String>,
    pub schema_hash: String,
    pub seed: u64,
    pub classes: Vec<i32>,
    pub n_train: usize,
}

impl ModelMeta {
    pub fn transform_config(&self) -> TransformConfig {
        TransformConfig {
            segments: self.segments,
            statistics: self.statistics.clone(),
            ..TransformConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub meta: ModelMeta,
    pub normalizer: Normalizer,
    pub classifier: Classifier,
}

/// Fits the normalizer and classifier on an unnormalized training tensor.
pub fn fit_model(tensor: &FeatureTensor, scale: Scale, config: &ModelConfig, seed: u64) -> Result<TrainedModel> {
    let labels = tensor.labels(scale);
    if labels.iter().any(|&l| l < 0) {
        return Err(Error::InvalidLabel("training tensor contains unlabeled traces".into()));
    }
    let normalizer = Normalizer::fit(tensor.data.view());
    let data = normalizer.apply(tensor.data.view())?;
    let classifier = Classifier::fit(config, data.view(), labels, seed)?;
    Ok(TrainedModel {
        meta: ModelMeta {
            kind: config.kind(),
            scale,
            environment: tensor.raw_schema.environment,
            raw_schema: tensor.raw_schema.clone(),
            statistics: tensor.statistics.clone(),
            segments: tensor.segments(),
            feature_names: tensor.feature_names(),
            schema_hash: tensor.schema_hash(),
            seed,
            classes: classifier.classes().to_vec(),
            n_train: tensor.len(),
        },
        normalizer,
        classifier,
    })
}

impl TrainedModel {
    pub fn classes(&self) -> &[i32] {
        &self.meta.classes
    }

    /// Rejects tensors whose derived feature layout differs from training.
    pub fn check_tensor(&self, tensor: &FeatureTensor) -> Result<()> {
        if tensor.schema_hash() != self.meta.schema_hash {
            return Err(Error::SchemaMismatch(format!(
                "tensor schema hash {} does not match model schema hash {}",
                tensor.schema_hash(),
                self.meta.schema_hash
            )));
        }
        if tensor.segments() != self.meta.segments && !tensor.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} segments, tensor has {}",
                self.meta.segments,
                tensor.segments()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, data: ArrayView3<f64>) -> Result<Array3<f64>> {
        self.normalizer.apply(data)
    }

    /// Predictions for an unnormalized data block with the training layout.
    pub fn predict_data(&self, data: ArrayView3<f64>) -> Result<Predictions> {
        let normalized = self.normalize(data)?;
        self.classifier.predict(normalized.view())
    }

    pub fn predict(&self, tensor: &FeatureTensor) -> Result<Predictions> {
        self.check_tensor(tensor)?;
        self.predict_data(tensor.data.view())
    }

    pub fn permutation_score_shifts(
        &self,
        tensor: &FeatureTensor,
        columns: &[usize],
        perms: &[Vec<usize>],
    ) -> Result<Vec<Array2<f64>>> {
        self.check_tensor(tensor)?;
        let normalized = self.normalize(tensor.data.view())?;
        self.classifier.permutation_score_shifts(normalized.view(), columns, perms)
    }

    /// Short content hash of the serialized model.
    pub fn id(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_bytes()?);
        Ok(hex_digest(h)[..16].to_string())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections = Sections::default();
        let body = match &self.classifier {
            Classifier::Knn(m) => {
                let (n, l, d) = m.train.dim();
                sections.f64("train", m.train.iter().copied());
                serde_json::json!({
                    "config": m.config,
                    "labels": m.labels,
                    "shape": [n, l, d],
                })
            }
            Classifier::Cnn(m) => {
                sections.f64("params", m.params.iter().copied());
                serde_json::json!({
                    "config": m.config,
                    "layout": m.layout,
                    "loss_history": m.loss_history,
                })
            }
            Classifier::Rocket(m) => {
                let ks = &m.kernels;
                sections.f64(
                    "kernel_table",
                    ks.kernels.iter().flat_map(|k| {
                        [
                            k.length as f64,
                            k.dilation as f64,
                            k.padding as f64,
                            k.bias,
                            k.channels.len() as f64,
                        ]
                    }),
                );
                sections.u32(
                    "kernel_channels",
                    ks.kernels.iter().flat_map(|k| k.channels.iter().map(|&c| c as u32)),
                );
                sections.f64("kernel_weights", ks.kernels.iter().flat_map(|k| k.weights.iter().copied()));
                sections.f64("standardizer_mean", m.ridge.standardizer.mean.iter().copied());
                sections.f64("standardizer_scale", m.ridge.standardizer.scale.iter().copied());
                sections.f64("coef", m.ridge.coef.iter().copied());
                serde_json::json!({
                    "config": m.config,
                    "segments": ks.segments,
                    "channels": ks.channels,
                    "n_kernels": ks.kernels.len(),
                    "alpha": m.ridge.alpha,
                    "cv_accuracy": m.ridge.cv_accuracy,
                    "intercept": m.ridge.intercept,
                })
            }
        };
        let header = ContainerHeader {
            format: MODEL_FORMAT.to_string(),
            meta: self.meta.clone(),
            normalizer: self.normalizer.clone(),
            body,
            sections: sections.index.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + sections.bytes.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&sections.bytes);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidModel(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MODEL_MAGIC {
            return Err(bad("not a model file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: ContainerHeader = serde_json::from_slice(json)?;
        if header.format != MODEL_FORMAT {
            return Err(bad("unknown model format"));
        }
        let mut reader = SectionReader::new(&header.sections, &bytes[16 + len..])?;
        let body = header.body;
        let field = |name: &str| -> Result<serde_json::Value> {
            body.get(name).cloned().ok_or_else(|| bad(&format!("missing field {name}")))
        };
        let classifier = match header.meta.kind {
            ModelKind::Knn => {
                let config: KnnConfig = serde_json::from_value(field("config")?)?;
                let labels: Vec<i32> = serde_json::from_value(field("labels")?)?;
                let [n, l, d]: [usize; 3] = serde_json::from_value(field("shape")?)?;
                let train = Array3::from_shape_vec((n, l, d), reader.f64("train")?)
                    .map_err(|e| bad(&e.to_string()))?;
                Classifier::Knn(KnnModel::fit(train, &labels, config)?)
            }
            ModelKind::Cnn => {
                let config: CnnConfig = serde_json::from_value(field("config")?)?;
                let layout: Layout = serde_json::from_value(field("layout")?)?;
                let params = reader.f64("params")?;
                if params.len() != layout.total {
                    return Err(bad("parameter count does not match layout"));
                }
                Classifier::Cnn(CnnModel {
                    config,
                    layout,
                    params,
                    classes: header.meta.classes.clone(),
                    loss_history: serde_json::from_value(field("loss_history")?)?,
                })
            }
            ModelKind::Rocket => {
                let config: RocketConfig = serde_json::from_value(field("config")?)?;
                let segments: usize = serde_json::from_value(field("segments")?)?;
                let channels: usize = serde_json::from_value(field("channels")?)?;
                let n_kernels: usize = serde_json::from_value(field("n_kernels")?)?;
                let table = reader.f64("kernel_table")?;
                let chans = reader.u32("kernel_channels")?;
                let weights = reader.f64("kernel_weights")?;
                if table.len() != 5 * n_kernels {
                    return Err(bad("kernel table size"));
                }
                let (mut ci, mut wi) = (0, 0);
                let mut kernels = Vec::with_capacity(n_kernels);
                for row in table.chunks_exact(5) {
                    let (length, nc) = (row[0] as usize, row[4] as usize);
                    let channel_list = chans.get(ci..ci + nc).ok_or_else(|| bad("kernel channels"))?;
                    let w = weights.get(wi..wi + nc * length).ok_or_else(|| bad("kernel weights"))?;
                    kernels.push(Kernel {
                        length,
                        dilation: row[1] as usize,
                        padding: row[2] as usize,
                        bias: row[3],
                        channels: channel_list.iter().map(|&c| c as usize).collect(),
                        weights: w.to_vec(),
                    });
                    ci += nc;
                    wi += nc * length;
                }
                let classes = header.meta.classes.clone();
                let p = 2 * n_kernels;
                let coef = Array2::from_shape_vec((classes.len(), p), reader.f64("coef")?)
                    .map_err(|e| bad(&e.to_string()))?;
                let ridge = RidgeClassifier {
                    classes,
                    standardizer: Standardizer {
                        mean: reader.f64("standardizer_mean")?,
                        scale: reader.f64("standardizer_scale")?,
                    },
                    coef,
                    intercept: serde_json::from_value(field("intercept")?)?,
                    alpha: serde_json::from_value(field("alpha")?)?,
                    cv_accuracy: serde_json::from_value(field("cv_accuracy")?)?,
                };
                Classifier::Rocket(RocketModel {
                    config,
                    kernels: KernelSet {
                        segments,
                        channels,
                        kernels,
                    },
                    ridge,
                })
            }
        };
        Ok(TrainedModel {
            meta: header.meta,
            normalizer: header.normalizer,
            classifier,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub const MODEL_MAGIC: &[u8; 8] = b"PVTSMDL\x01";
pub const MODEL_FORMAT: &str = "provts-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SectionInfo {
    name: String,
    dtype: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    format: String,
    meta: ModelMeta,
    normalizer: Normalizer,
    body: serde_json::Value,
    sections: Vec<SectionInfo>,
}

#[derive(Default)]
struct Sections {
    index: Vec<SectionInfo>,
    bytes: Vec<u8>,
}

impl Sections {
    fn f64(&mut self, name: &str, values: impl Iterator<Item = f64>) {
        let start = self.bytes.len();
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.index.push(SectionInfo {
            name: name.into(),
            dtype: "f64".into(),
            len: (self.bytes.len() - start) / 8,
        });
    }

    fn u32(&mut self, name: &str, values: impl Iterator<Item = u32>) {
        let start = self.bytes.len();
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.index.push(SectionInfo {
            name: name.into(),
            dtype: "u32".into(),
            len: (self.bytes.len() - start) / 4,
        });
    }
}

struct SectionReader<'a> {
    slices: Vec<(&'a SectionInfo, &'a [u8])>,
}

impl<'a> SectionReader<'a> {
    fn new(index: &'a [SectionInfo], mut bytes: &'a [u8]) -> Result<Self> {
        let mut slices = Vec::new();
        for info in index {
            let width = match info.dtype.as_str() {
                "f64" => 8,
                "u32" => 4,
                other => return Err(Error::InvalidModel(format!("unknown section type {other}"))),
            };
            let size = info.len * width;
            if bytes.len() < size {
                return Err(Error::InvalidModel(format!("section {} truncated", info.name)));
            }
            let (head, rest) = bytes.split_at(size);
            slices.push((info, head));
            bytes = rest;
        }
        if !bytes.is_empty() {
            return Err(Error::InvalidModel("trailing bytes after sections".into()));
        }
        Ok(SectionReader { slices })
    }

    fn raw(&self, name: &str, dtype: &str) -> Result<&'a [u8]> {
        self.slices
            .iter()
            .find(|(i, _)| i.name == name && i.dtype == dtype)
            .map(|(_, b)| *b)
            .ok_or_else(|| Error::InvalidModel(format!("missing section {name}")))
    }

    fn f64(&mut self, name: &str) -> Result<Vec<f64>> {
        Ok(self
            .raw(name, "f64")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn u32(&mut self, name: &str) -> Result<Vec<u32>> {
        Ok(self
            .raw(name, "u32")?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::SessionTrace;
    use crate::transform::build_dataset;
    use crate::types::{BehaviorFrame, TaskLabel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_tensor() -> FeatureTensor {
        let schema = FeatureSchema::for_environment(Environment::Desktop);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut traces = Vec::new();
        for i in 0..18 {
            let code = [9, 19, 29][i % 3];
            let frames = (0..40)
                .map(|t| {
                    let mut values = vec![0.0; schema.dim()];
                    values[2] = (t as f64 / 40.0) * (1 + i % 3) as f64 % 1.0;
                    values[3] = (i % 3) as f64 * 0.4 + 0.05 * rng.random::<f64>();
                    values[4] = rng.random();
                    BehaviorFrame {
                        timestamp: t as f64 / 10.0,
                        values,
                    }
                })
                .collect();
            traces.push(SessionTrace {
                participant_id: format!("P{i}"),
                environment: Environment::Desktop,
                trial_index: i as i64,
                label: Some(TaskLabel::from_code(code).unwrap()),
                frames,
                sample_rate_hint: 10.0,
            });
        }
        let cfg = TransformConfig {
            segments: 20,
            ..TransformConfig::default()
        };
        build_dataset(&traces, &schema, &cfg).unwrap()
    }

    fn configs() -> Vec<ModelConfig> {
        vec![
            ModelConfig::Knn(KnnConfig {
                k: 3,
                band: None,
            }),
            ModelConfig::Cnn(CnnConfig {
                epochs: 5,
                ..CnnConfig::default()
            }),
            ModelConfig::Rocket(RocketConfig {
                n_kernels: 50,
                ..RocketConfig::default()
            }),
        ]
    }

    #[test]
    fn container_round_trip() {
        let tensor = toy_tensor();
        for cfg in configs() {
            let model = fit_model(&tensor, Scale::Task, &cfg, 3).unwrap();
            let bytes = model.to_bytes().unwrap();
            let back = TrainedModel::from_bytes(&bytes).unwrap();
            assert_eq!(back, model, "{:?}", cfg.kind());
            assert_eq!(back.to_bytes().unwrap(), bytes);
            let a = model.predict(&tensor).unwrap();
            let b = back.predict(&tensor).unwrap();
            assert_eq!(a, b);
            assert!(a.confidence.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn rejects_other_layouts() {
        let tensor = toy_tensor();
        let model = fit_model(&tensor, Scale::Space, &configs()[0], 0).unwrap();
        let reduced = tensor.select_raw_features(&[0, 1, 2]);
        assert!(matches!(model.predict(&reduced), Err(Error::SchemaMismatch(_))));
        assert!(matches!(TrainedModel::from_bytes(b"nonsense"), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn generic_permutation_path_is_exact_for_identity() {
        let tensor = toy_tensor();
        let model = fit_model(&tensor, Scale::Task, &configs()[1], 0).unwrap();
        let identity: Vec<usize> = (0..tensor.len()).collect();
        let shifts = model
            .permutation_score_shifts(&tensor, &tensor.columns_of(3), &[identity])
            .unwrap();
        assert!(shifts[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn margin_confidence_range() {
        assert_eq!(margin_confidence(0.0), 0.0);
        assert!(margin_confidence(100.0) <= 1.0);
        assert!(margin_confidence(1.0) > margin_confidence(0.5));
    }

    #[test]
    fn config_json_uses_kind_tag() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"kind":"rocket","n_kernels":10}"#).unwrap();
        match cfg {
            ModelConfig::Rocket(c) => assert_eq!(c.n_kernels, 10),
            _ => panic!("wrong kind"),
        }
    }
}
