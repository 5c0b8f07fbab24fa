//! Feature importance: leave-group-out retraining and PermFIT.
//!
//! PermFIT moves one raw feature's whole derived time series (all of its
//! statistic columns) between samples as a block, and scores the feature by
//! the mean squared change of the per-class score vector, averaged over
//! repeats.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{cross_validate, fold_seed, out_of_fold_scores, split, stratified_folds, EvalReport, DEFAULT_FOLDS};
use crate::model::{fit_model, permute_columns, ModelConfig, TrainedModel};
use crate::seed::derive_seed;
use crate::transform::FeatureTensor;
use crate::types::{FeatureGroup, Scale};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupImportance {
    pub group: FeatureGroup,
    pub delta_accuracy: f64,
    pub delta_macro_f1: f64,
    pub full_accuracy: f64,
    pub reduced_accuracy: f64,
    pub full_macro_f1: f64,
    pub reduced_macro_f1: f64,
}

/// Cross-validates on the tensor without `group` and reports the drop
/// relative to `full` (computed here when not supplied).
pub fn leave_group_out(
    dataset: &FeatureTensor,
    config: &ModelConfig,
    scale: Scale,
    group: FeatureGroup,
    seed: u64,
    full: Option<&EvalReport>,
) -> Result<GroupImportance> {
    require_group(dataset, group)?;
    let reduced_set = dataset.without_group(group)?;
    let owned;
    let full = match full {
        Some(f) => f,
        None => {
            owned = cross_validate(dataset, config, scale, DEFAULT_FOLDS, seed)?;
            &owned
        }
    };
    let reduced = cross_validate(&reduced_set, config, scale, DEFAULT_FOLDS, seed)?;
    Ok(GroupImportance {
        group,
        delta_accuracy: full.accuracy - reduced.accuracy,
        delta_macro_f1: full.macro_f1 - reduced.macro_f1,
        full_accuracy: full.accuracy,
        reduced_accuracy: reduced.accuracy,
        full_macro_f1: full.macro_f1,
        reduced_macro_f1: reduced.macro_f1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermfitMode {
    /// Re-run cross-validation on the permuted data and compare out-of-fold scores.
    #[default]
    Retrain,
    /// Cross-fitted: each fold's model, trained on unpermuted data, scores
    /// its held-out samples with the feature permuted among them.
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PermfitConfig {
    pub repeats: usize,
    pub mode: PermfitMode,
    pub folds: usize,
}

impl Default for PermfitConfig {
    fn default() -> Self {
        PermfitConfig {
            repeats: 100,
            mode: PermfitMode::Retrain,
            folds: DEFAULT_FOLDS,
        }
    }
}

/// Permutation `r` of `n` samples; shared by every feature so scores are
/// comparable.
pub fn repeat_permutations(n: usize, repeats: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..repeats)
        .map(|r| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64)));
            p
        })
        .collect()
}

fn mean_squared_norm(delta: &Array2<f64>) -> f64 {
    if delta.nrows() == 0 {
        return 0.0;
    }
    delta.iter().map(|v| v * v).sum::<f64>() / delta.nrows() as f64
}

/// PermFIT score of one raw feature with a fixed model (inference mode),
/// given explicit permutations.
pub fn permfit_with_model(
    dataset: &FeatureTensor,
    model: &TrainedModel,
    feature: &str,
    perms: &[Vec<usize>],
) -> Result<f64> {
    let columns = dataset.columns_of_name(feature)?;
    if perms.is_empty() {
        return Ok(0.0);
    }
    let shifts = model.permutation_score_shifts(dataset, &columns, perms)?;
    Ok(shifts.iter().map(mean_squared_norm).sum::<f64>() / perms.len() as f64)
}

/// PermFIT score of one raw feature in retraining mode, given explicit
/// permutations: every repeat re-runs the same seeded cross-validation.
pub fn permfit_retrain(
    dataset: &FeatureTensor,
    config: &ModelConfig,
    scale: Scale,
    feature: &str,
    perms: &[Vec<usize>],
    folds: usize,
    seed: u64,
) -> Result<f64> {
    let base = out_of_fold_scores(dataset, config, scale, folds, seed)?;
    retrain_score(dataset, config, scale, feature, perms, folds, seed, &base)
}

#[allow(clippy::too_many_arguments)]
fn retrain_score(
    dataset: &FeatureTensor,
    config: &ModelConfig,
    scale: Scale,
    feature: &str,
    perms: &[Vec<usize>],
    folds: usize,
    seed: u64,
    base: &Array2<f64>,
) -> Result<f64> {
    let columns = dataset.columns_of_name(feature)?;
    if perms.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for perm in perms {
        let mut permuted = dataset.clone();
        permuted.data = permute_columns(dataset.data.view(), &columns, perm)?;
        let scores = out_of_fold_scores(&permuted, config, scale, folds, seed)?;
        total += mean_squared_norm(&(scores - base));
    }
    Ok(total / perms.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub score: f64,
    /// 1 = most important.
    pub rank: usize,
}

/// PermFIT for several features, ranked by descending score (ties by name order given).
pub fn permfit(
    dataset: &FeatureTensor,
    config: &ModelConfig,
    scale: Scale,
    features: &[String],
    permfit: &PermfitConfig,
    seed: u64,
) -> Result<Vec<FeatureImportance>> {
    for f in features {
        dataset.columns_of_name(f)?;
    }
    let scores: Vec<f64> = match permfit.mode {
        PermfitMode::Inference => crossfit_scores(dataset, config, scale, features, permfit, seed)?,
        PermfitMode::Retrain => {
            let perms = repeat_permutations(dataset.len(), permfit.repeats, derive_seed(seed, 0x9e4f));
            let base = out_of_fold_scores(dataset, config, scale, permfit.folds, seed)?;
            features
                .iter()
                .map(|f| retrain_score(dataset, config, scale, f, &perms, permfit.folds, seed, &base))
                .collect::<Result<_>>()?
        }
    };
    Ok(rank(features, &scores))
}

/// Inference-mode scores: mean squared score shift per sample and repeat,
/// every sample scored by the fold model that did not train on it.
fn crossfit_scores(
    dataset: &FeatureTensor,
    config: &ModelConfig,
    scale: Scale,
    features: &[String],
    permfit: &PermfitConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if permfit.repeats == 0 {
        return Ok(vec![0.0; features.len()]);
    }
    let columns: Vec<Vec<usize>> = features
        .iter()
        .map(|f| dataset.columns_of_name(f))
        .collect::<Result<_>>()?;
    let assignment = stratified_folds(dataset.labels(scale), permfit.folds, seed)?;
    let mut totals = vec![0.0; features.len()];
    for fold in 0..permfit.folds {
        let (train, test) = split(&assignment, fold);
        let model = fit_model(&dataset.subset(&train), scale, config, fold_seed(seed, fold))?;
        let held = dataset.subset(&test);
        let perms = repeat_permutations(test.len(), permfit.repeats, derive_seed(seed, 0x9e4f + fold as u64));
        for (total, cols) in totals.iter_mut().zip(&columns) {
            let shifts = model.permutation_score_shifts(&held, cols, &perms)?;
            *total += shifts.iter().map(|d| d.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
        }
    }
    let denom = (dataset.len() * permfit.repeats) as f64;
    Ok(totals.into_iter().map(|t| t / denom).collect())
}

pub fn rank(features: &[String], scores: &[f64]) -> Vec<FeatureImportance> {
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .enumerate()
        .map(|(r, i)| FeatureImportance {
            feature: features[i].clone(),
            score: scores[i],
            rank: r + 1,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub model: String,
    pub scale: Scale,
    pub groups: Vec<GroupImportance>,
    pub permfit: Vec<FeatureImportance>,
}

impl ImportanceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn groups_csv(&self) -> String {
        let mut s = String::from("group,delta_accuracy,delta_macro_f1,full_accuracy,reduced_accuracy\n");
        for g in &self.groups {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                g.group.name(),
                g.delta_accuracy,
                g.delta_macro_f1,
                g.full_accuracy,
                g.reduced_accuracy
            ));
        }
        s
    }

    pub fn permfit_csv(&self) -> String {
        let mut s = String::from("rank,feature,score\n");
        for f in &self.permfit {
            s.push_str(&format!("{},{},{}\n", f.rank, f.feature, f.score));
        }
        s
    }

    /// Ranked list for terminal output.
    pub fn table(&self) -> String {
        let mut s = String::from("rank  feature                 score\n");
        for f in &self.permfit {
            s.push_str(&format!("{:>4}  {:<22}  {:.6e}\n", f.rank, f.feature, f.score));
        }
        s
    }
}

/// Checks that `group` has at least one feature in the tensor.
pub fn require_group(dataset: &FeatureTensor, group: FeatureGroup) -> Result<()> {
    if dataset.raw_schema.indices_in_group(group).is_empty() {
        return Err(Error::EmptyFeatureSet(format!("group {} is not in the schema", group.name())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::KnnConfig;
    use crate::rocket::RocketConfig;
    use crate::synth::{generate, SynthConfig};
    use crate::transform::{build_dataset, TransformConfig};
    use crate::types::{Environment, FeatureSchema};

    fn small_tensor(env: Environment) -> FeatureTensor {
        let traces = generate(&SynthConfig::default(), 6, 3, env).unwrap();
        let cfg = TransformConfig {
            segments: 20,
            ..TransformConfig::default()
        };
        build_dataset(&traces, &FeatureSchema::for_environment(env), &cfg).unwrap()
    }

    fn rocket(n: usize) -> ModelConfig {
        ModelConfig::Rocket(RocketConfig {
            n_kernels: n,
            ..RocketConfig::default()
        })
    }

    #[test]
    fn identity_permutation_scores_zero() {
        let t = small_tensor(Environment::Desktop);
        let identity = vec![(0..t.len()).collect::<Vec<_>>()];
        let model = fit_model(&t, Scale::Space, &rocket(40), 1).unwrap();
        assert_eq!(permfit_with_model(&t, &model, "mouse.x", &identity).unwrap(), 0.0);
        let knn = ModelConfig::Knn(KnnConfig { k: 3, band: None });
        assert_eq!(
            permfit_retrain(&t, &knn, Scale::Space, "mouse.x", &identity, 3, 1).unwrap(),
            0.0
        );
    }

    #[test]
    fn constant_feature_scores_zero() {
        let t = small_tensor(Environment::Desktop);
        // No clears in two-second windows is not guaranteed; force a constant.
        let mut t2 = t.clone();
        for c in t.columns_of_name("linechart.slot3").unwrap() {
            t2.data.slice_mut(ndarray::s![.., .., c]).fill(0.25);
        }
        let model = fit_model(&t2, Scale::Space, &rocket(40), 1).unwrap();
        let perms = repeat_permutations(t2.len(), 5, 2);
        assert_eq!(permfit_with_model(&t2, &model, "linechart.slot3", &perms).unwrap(), 0.0);
    }

    #[test]
    fn unknown_feature_and_group() {
        let t = small_tensor(Environment::Desktop);
        let model = fit_model(&t, Scale::Space, &rocket(10), 1).unwrap();
        let perms = repeat_permutations(t.len(), 1, 0);
        assert!(matches!(
            permfit_with_model(&t, &model, "objPosition.y", &perms),
            Err(Error::UnknownFeature(_))
        ));
        assert!(leave_group_out(&t, &rocket(10), Scale::Space, FeatureGroup::Immersive, 1, None).is_err());
        assert!(require_group(&t, FeatureGroup::Immersive).is_err());
    }

    #[test]
    fn ranks_are_a_permutation() {
        let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let r = rank(&names, &[0.5, 2.0, 0.5, 0.0]);
        let order: Vec<&str> = r.iter().map(|f| f.feature.as_str()).collect();
        assert_eq!(order, ["b", "a", "c", "d"]);
        assert_eq!(r.iter().map(|f| f.rank).collect::<Vec<_>>(), [1, 2, 3, 4]);
    }

    #[test]
    fn more_repeats_lower_variance() {
        let t = small_tensor(Environment::Immersive);
        let model = fit_model(&t, Scale::Space, &rocket(100), 1).unwrap();
        let spread = |repeats: usize| {
            let runs: Vec<f64> = (0..10)
                .map(|s| {
                    let perms = repeat_permutations(t.len(), repeats, 100 + s);
                    permfit_with_model(&t, &model, "objPosition.x", &perms).unwrap()
                })
                .collect();
            let m = runs.iter().sum::<f64>() / runs.len() as f64;
            runs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / runs.len() as f64
        };
        assert!(spread(100) < spread(1));
    }

    #[test]
    fn deterministic_rankings() {
        let t = small_tensor(Environment::Desktop);
        let features: Vec<String> = ["mouse.x", "mouse.y", "click"].iter().map(|s| s.to_string()).collect();
        let cfg = PermfitConfig {
            repeats: 3,
            mode: PermfitMode::Inference,
            folds: 3,
        };
        let a = permfit(&t, &rocket(30), Scale::Space, &features, &cfg, 5).unwrap();
        let b = permfit(&t, &rocket(30), Scale::Space, &features, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|f| f.score >= 0.0));
    }
}
