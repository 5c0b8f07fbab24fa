//! Stratified cross-validation, confusion matrices and summary metrics.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::sorted_classes;
use crate::model::{fit_model, ModelConfig, TrainedModel};
use crate::seed::derive_seed;
use crate::transform::FeatureTensor;
use crate::types::{Environment, Scale};

pub const DEFAULT_FOLDS: usize = 5;

/// Fold index per sample. Each class is shuffled with its own seeded stream and
/// dealt round-robin, continuing where the previous class stopped, so every
/// fold holds floor or ceil of each class's share.
pub fn stratified_folds(labels: &[i32], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidConfig("cross-validation needs at least 2 folds".into()));
    }
    let mut assignment = vec![0usize; labels.len()];
    let mut next = 0usize;
    for class in sorted_classes(labels) {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::ClassTooSmall {
                class,
                count: members.len(),
                folds: k,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = next % k;
            next += 1;
        }
    }
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<i32>,
    /// `counts[i][j]`: truth `classes[i]` predicted as `classes[j]`.
    #[serde(with = "nested_rows")]
    pub counts: Array2<u64>,
}

pub fn confusion_matrix(truth: &[i32], predicted: &[i32], classes: &[i32]) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} truths vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let index = |c: i32| classes.iter().position(|&x| x == c).ok_or(Error::UnknownClass(c));
    let mut counts = Array2::zeros((classes.len(), classes.len()));
    for (&t, &p) in truth.iter().zip(predicted) {
        counts[[index(t)?, index(p)?]] += 1;
    }
    Ok(ConfusionMatrix {
        classes: classes.to_vec(),
        counts,
    })
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.counts.diag().sum() as f64 / total as f64
    }

    /// Per-class F1; a class with no true and no predicted samples scores 0.
    pub fn f1_per_class(&self) -> Vec<f64> {
        (0..self.classes.len())
            .map(|c| {
                let tp = self.counts[[c, c]] as f64;
                let fn_ = self.counts.row(c).sum() as f64 - tp;
                let fp = self.counts.column(c).sum() as f64 - tp;
                let denom = 2.0 * tp + fp + fn_;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        let f1 = self.f1_per_class();
        if f1.is_empty() {
            return 0.0;
        }
        f1.iter().sum::<f64>() / f1.len() as f64
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth\\pred");
        for c in &self.classes {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (i, c) in self.classes.iter().enumerate() {
            let _ = write!(s, "{c}");
            for v in self.counts.row(i) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Row-normalized heatmap, white (0) to dark blue (1), one block per cell.
    pub fn heatmap(&self, cell: u32) -> RgbImage {
        let k = self.classes.len() as u32;
        let mut img = RgbImage::from_pixel(k.max(1) * cell, k.max(1) * cell, Rgb([255, 255, 255]));
        for i in 0..self.classes.len() {
            let row_total = self.counts.row(i).sum();
            for j in 0..self.classes.len() {
                let frac = if row_total == 0 {
                    0.0
                } else {
                    self.counts[[i, j]] as f64 / row_total as f64
                };
                let color = Rgb([
                    (255.0 * (1.0 - frac)) as u8,
                    (255.0 * (1.0 - 0.8 * frac)) as u8,
                    (255.0 * (1.0 - 0.45 * frac)) as u8,
                ]);
                for y in 0..cell {
                    for x in 0..cell {
                        img.put_pixel(j as u32 * cell + x, i as u32 * cell + y, color);
                    }
                }
            }
        }
        img
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let cell = (480 / self.classes.len().max(1) as u32).clamp(8, 64);
        self.heatmap(cell).save(path)?;
        Ok(())
    }
}

/// Serializes a matrix as a list of rows.
mod nested_rows {
    use ndarray::Array2;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<u64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<u64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<u64>, D::Error> {
        let rows = Vec::<Vec<u64>>::deserialize(d)?;
        let cols = rows.first().map_or(0, Vec::len);
        let flat: Vec<u64> = rows.iter().flatten().copied().collect();
        Array2::from_shape_vec((rows.len(), cols), flat).map_err(D::Error::custom)
    }
}

/// Anything that can be fitted on one fold and predict the held-out part.
pub trait FoldLearner: Sync {
    fn fit_predict(&self, train: &FeatureTensor, test: &FeatureTensor, scale: Scale, seed: u64) -> Result<Vec<i32>>;
}

impl FoldLearner for ModelConfig {
    fn fit_predict(&self, train: &FeatureTensor, test: &FeatureTensor, scale: Scale, seed: u64) -> Result<Vec<i32>> {
        let model = fit_model(train, scale, self, seed)?;
        Ok(model.predict(test)?.labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub scale: Scale,
    pub environment: Environment,
    pub folds: usize,
    pub seed: u64,
    pub n: usize,
    pub fold_accuracy: Vec<f64>,
    pub fold_macro_f1: Vec<f64>,
    pub mean_fold_accuracy: f64,
    pub mean_fold_macro_f1: f64,
    /// Pooled over all held-out predictions: equals trace(CM)/n.
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per fold plus a pooled row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,accuracy,macro_f1\n");
        for (i, (a, f)) in self.fold_accuracy.iter().zip(&self.fold_macro_f1).enumerate() {
            let _ = writeln!(s, "{i},{a},{f}");
        }
        let _ = writeln!(s, "mean,{},{}", self.mean_fold_accuracy, self.mean_fold_macro_f1);
        let _ = writeln!(s, "pooled,{},{}", self.accuracy, self.macro_f1);
        s
    }
}

/// Fold `f` trains with `derive_seed(seed, f)`; shared with retraining PermFIT.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, 0x0f01d + fold as u64)
}

/// Train and test indices of `fold`.
pub fn split(assignment: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    let train = (0..assignment.len()).filter(|&i| assignment[i] != fold).collect();
    let test = (0..assignment.len()).filter(|&i| assignment[i] == fold).collect();
    (train, test)
}

pub fn cross_validate_with(
    dataset: &FeatureTensor,
    learner: &dyn FoldLearner,
    model_name: &str,
    scale: Scale,
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    let labels = dataset.labels(scale);
    if labels.iter().any(|&l| l < 0) {
        return Err(Error::InvalidLabel("dataset contains unlabeled traces".into()));
    }
    let classes = sorted_classes(labels);
    let assignment = stratified_folds(labels, k, seed)?;
    let folds: Vec<ConfusionMatrix> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let (train, test) = split(&assignment, fold);
            let test_set = dataset.subset(&test);
            let pred = learner.fit_predict(&dataset.subset(&train), &test_set, scale, fold_seed(seed, fold))?;
            confusion_matrix(test_set.labels(scale), &pred, &classes)
        })
        .collect::<Result<_>>()?;
    let mut confusion = ConfusionMatrix {
        classes: classes.clone(),
        counts: Array2::zeros((classes.len(), classes.len())),
    };
    for f in &folds {
        confusion.merge(f);
    }
    let fold_accuracy: Vec<f64> = folds.iter().map(|f| f.accuracy()).collect();
    let fold_macro_f1: Vec<f64> = folds.iter().map(|f| f.macro_f1()).collect();
    Ok(EvalReport {
        model: model_name.to_string(),
        scale,
        environment: dataset.raw_schema.environment,
        folds: k,
        seed,
        n: dataset.len(),
        mean_fold_accuracy: fold_accuracy.iter().sum::<f64>() / k as f64,
        mean_fold_macro_f1: fold_macro_f1.iter().sum::<f64>() / k as f64,
        fold_accuracy,
        fold_macro_f1,
        accuracy: confusion.accuracy(),
        macro_f1: confusion.macro_f1(),
        confusion,
    })
}

pub fn cross_validate(
    dataset: &FeatureTensor,
    config: &ModelConfig,
    scale: Scale,
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    config.validate()?;
    cross_validate_with(dataset, config, config.kind().name(), scale, k, seed)
}

/// Scores a trained model on a labeled held-out tensor, reported as a single fold.
pub fn evaluate_model(model: &TrainedModel, tensor: &FeatureTensor) -> Result<EvalReport> {
    let scale = model.meta.scale;
    let labels = tensor.labels(scale);
    if labels.iter().any(|&l| l < 0) {
        return Err(Error::InvalidLabel("evaluation tensor contains unlabeled traces".into()));
    }
    let pred = model.predict(tensor)?.labels;
    let mut classes = model.classes().to_vec();
    classes.extend(sorted_classes(labels));
    classes.sort_unstable();
    classes.dedup();
    let confusion = confusion_matrix(labels, &pred, &classes)?;
    let (accuracy, macro_f1) = (confusion.accuracy(), confusion.macro_f1());
    Ok(EvalReport {
        model: model.meta.kind.name().to_string(),
        scale,
        environment: tensor.raw_schema.environment,
        folds: 1,
        seed: model.meta.seed,
        n: tensor.len(),
        fold_accuracy: vec![accuracy],
        fold_macro_f1: vec![macro_f1],
        mean_fold_accuracy: accuracy,
        mean_fold_macro_f1: macro_f1,
        accuracy,
        macro_f1,
        confusion,
    })
}

/// Out-of-fold score matrix (`n × classes`, columns in sorted class order):
/// every sample is scored by the model that did not see it.
pub fn out_of_fold_scores(
    dataset: &FeatureTensor,
    config: &ModelConfig,
    scale: Scale,
    k: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let labels = dataset.labels(scale);
    let classes = sorted_classes(labels);
    let assignment = stratified_folds(labels, k, seed)?;
    let parts: Vec<(Vec<usize>, Array2<f64>, Vec<i32>)> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let (train, test) = split(&assignment, fold);
            let model = fit_model(&dataset.subset(&train), scale, config, fold_seed(seed, fold))?;
            let scores = model.predict(&dataset.subset(&test))?.scores;
            Ok((test, scores, model.classes().to_vec()))
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((dataset.len(), classes.len()));
    for (test, scores, model_classes) in parts {
        for (row, &i) in test.iter().enumerate() {
            for (c, mc) in model_classes.iter().enumerate() {
                let col = classes.binary_search(mc).map_err(|_| Error::UnknownClass(*mc))?;
                out[[i, col]] = scores[[row, c]];
            }
        }
    }
    Ok(out)
}
