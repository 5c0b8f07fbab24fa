//! One-vs-rest ridge classifier with cross-validated regularization.
//!
//! Features are z-scored with training statistics, targets are ±1 per class
//! and each class gets its own intercept (the mean target, since standardized
//! columns are centered). The penalized normal equations are solved by
//! Cholesky in whichever space is smaller: `(ZᵀZ + αI)β = ZᵀY` when there are
//! fewer features than samples, otherwise the dual `(ZZᵀ + αI)A = Y` with
//! `β = ZᵀA`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::stratified_folds;
use crate::knn::sorted_classes;
use crate::model::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RidgeConfig {
    pub alphas: Vec<f64>,
    pub cv_folds: usize,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig {
            alphas: (-3..=3).map(|k| 10f64.powi(k)).collect(),
            cv_folds: 5,
        }
    }
}

impl RidgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::InvalidConfig("alpha grid is empty".into()));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::SingularSystem);
        }
        Ok(())
    }
}

/// In-place Cholesky factorization of a symmetric positive-definite matrix.
/// Only the lower triangle of the result is meaningful.
pub fn cholesky(a: &mut Array2<f64>) -> Result<()> {
    let n = a.nrows();
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= a[[j, k]] * a[[j, k]];
        }
        if !(diag > 0.0) {
            return Err(Error::SingularSystem);
        }
        let diag = diag.sqrt();
        a[[j, j]] = diag;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / diag;
        }
    }
    Ok(())
}

/// Solves `L Lᵀ X = B` given the factor from [`cholesky`].
pub fn cholesky_solve(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for col in 0..x.ncols() {
        for i in 0..n {
            let mut v = x[[i, col]];
            for k in 0..i {
                v -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = v / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut v = x[[i, col]];
            for k in i + 1..n {
                v -= l[[k, i]] * x[[k, col]];
            }
            x[[i, col]] = v / l[[i, i]];
        }
    }
    x
}

/// Precomputed Gram matrix of a (centered) design, reusable across alphas.
pub struct RidgeSystem<'a> {
    z: ArrayView2<'a, f64>,
    gram: Array2<f64>,
    dual: bool,
}

impl<'a> RidgeSystem<'a> {
    pub fn new(z: ArrayView2<'a, f64>) -> Self {
        let (n, p) = z.dim();
        let dual = p > n;
        let gram = if dual { z.dot(&z.t()) } else { z.t().dot(&z) };
        RidgeSystem { z, gram, dual }
    }

    pub fn is_dual(&self) -> bool {
        self.dual
    }

    /// Coefficients (p × targets) for `(ZᵀZ + αI)β = ZᵀY`.
    pub fn solve(&self, alpha: f64, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        if !(alpha > 0.0) {
            return Err(Error::SingularSystem);
        }
        let mut a = self.gram.clone();
        for i in 0..a.nrows() {
            a[[i, i]] += alpha;
        }
        cholesky(&mut a)?;
        if self.dual {
            let dual_coef = cholesky_solve(&a, &y.to_owned());
            Ok(self.z.t().dot(&dual_coef))
        } else {
            let rhs = self.z.t().dot(&y);
            Ok(cholesky_solve(&a, &rhs))
        }
    }
}

/// Solves a single ridge system directly (no intercept, no scaling).
pub fn ridge_solve(z: ArrayView2<f64>, y: ArrayView1<f64>, alpha: f64) -> Result<Array1<f64>> {
    let y2 = y.insert_axis(Axis(1));
    let beta = RidgeSystem::new(z).solve(alpha, y2)?;
    Ok(beta.column(0).to_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = vec![0.0; x.ncols()];
        let mut scale = vec![0.0; x.ncols()];
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[j] = m;
            scale[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.to_owned();
        for mut row in z.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        z
    }
}

fn one_vs_rest(labels: &[i32], classes: &[i32]) -> Array2<f64> {
    Array2::from_shape_fn((labels.len(), classes.len()), |(i, c)| {
        if labels[i] == classes[c] {
            1.0
        } else {
            -1.0
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeClassifier {
    pub classes: Vec<i32>,
    pub standardizer: Standardizer,
    /// Coefficients in standardized space, one row per class.
    pub coef: Array2<f64>,
    pub intercept: Vec<f64>,
    pub alpha: f64,
    /// Internal CV accuracy per grid alpha (empty when CV was skipped).
    pub cv_accuracy: Vec<f64>,
}

fn fit_fixed(
    x: ArrayView2<f64>,
    labels: &[i32],
    classes: &[i32],
    alphas: &[f64],
) -> Result<Vec<(Standardizer, Array2<f64>, Vec<f64>)>> {
    let standardizer = Standardizer::fit(x);
    let z = standardizer.apply(x);
    let y = one_vs_rest(labels, classes);
    let means: Vec<f64> = y.axis_iter(Axis(1)).map(|c| c.mean().unwrap_or(0.0)).collect();
    let mut yc = y.clone();
    for mut row in yc.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v -= means[c];
        }
    }
    let system = RidgeSystem::new(z.view());
    alphas
        .iter()
        .map(|&a| Ok((standardizer.clone(), system.solve(a, yc.view())?.reversed_axes(), means.clone())))
        .collect()
}

fn decision(standardizer: &Standardizer, coef: &Array2<f64>, intercept: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
    let z = standardizer.apply(x);
    let mut s = z.dot(&coef.t());
    for mut row in s.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += intercept[c];
        }
    }
    s
}

impl RidgeClassifier {
    pub fn fit(x: ArrayView2<f64>, labels: &[i32], config: &RidgeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if x.nrows() < 2 {
            return Err(Error::EmptyTrainingSet);
        }
        if labels.len() != x.nrows() {
            return Err(Error::ShapeMismatch("label count differs from sample count".into()));
        }
        let classes = sorted_classes(labels);
        if classes.len() < 2 {
            return Err(Error::DegenerateLabels);
        }
        let mut alphas = config.alphas.clone();
        alphas.sort_by(f64::total_cmp);

        let smallest_class = classes
            .iter()
            .map(|c| labels.iter().filter(|l| *l == c).count())
            .min()
            .unwrap_or(0);
        let folds = config.cv_folds.min(smallest_class);
        let (alpha, cv_accuracy) = if alphas.len() == 1 || folds < 2 {
            // Too few samples per class to cross-validate: take the grid's middle.
            (alphas[alphas.len() / 2], Vec::new())
        } else {
            let assignment = stratified_folds(labels, folds, seed)?;
            let mut correct = vec![0usize; alphas.len()];
            let mut sq_error = vec![0.0; alphas.len()];
            for fold in 0..folds {
                let train: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] != fold).collect();
                let test: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] == fold).collect();
                let xt = x.select(Axis(0), &train);
                let yt: Vec<i32> = train.iter().map(|&i| labels[i]).collect();
                let xv = x.select(Axis(0), &test);
                let yv: Vec<i32> = test.iter().map(|&i| labels[i]).collect();
                let targets = one_vs_rest(&yv, &classes);
                let fits = fit_fixed(xt.view(), &yt, &classes, &alphas)?;
                for (ai, (std, coef, icpt)) in fits.iter().enumerate() {
                    let scores = decision(std, coef, icpt, xv.view());
                    sq_error[ai] += (&scores - &targets).iter().map(|e| e * e).sum::<f64>();
                    for (row, &i) in scores.rows().into_iter().zip(&test) {
                        if classes[argmax(row.as_slice().unwrap())] == labels[i] {
                            correct[ai] += 1;
                        }
                    }
                }
            }
            // Held-out squared error on the ±1 targets; accuracy ties too
            // often on separable data to choose between alphas.
            let mut best = 0;
            for ai in 1..alphas.len() {
                if sq_error[ai] < sq_error[best] {
                    best = ai;
                }
            }
            let n = labels.len() as f64;
            (alphas[best], correct.iter().map(|&c| c as f64 / n).collect())
        };
        let (standardizer, coef, intercept) = fit_fixed(x, labels, &classes, &[alpha])?
            .pop()
            .expect("one alpha");
        Ok(RidgeClassifier {
            classes,
            standardizer,
            coef,
            intercept,
            alpha,
            cv_accuracy,
        })
    }

    pub fn decision_function(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.standardizer.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "ridge expects {} features, got {}",
                self.standardizer.mean.len(),
                x.ncols()
            )));
        }
        Ok(decision(&self.standardizer, &self.coef, &self.intercept, x))
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<i32>> {
        let s = self.decision_function(x)?;
        Ok(s.rows()
            .into_iter()
            .map(|r| self.classes[argmax(r.as_slice().unwrap())])
            .collect())
    }
}
