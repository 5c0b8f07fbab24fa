//! k-nearest-neighbor classification under dynamic time warping.
//!
//! Sequences are compared with dependent (multivariate) DTW: the local cost of
//! aligning two frames is the Euclidean distance between their full feature
//! vectors. An optional Sakoe-Chiba band limits `|i - j|`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    pub k: usize,
    /// Sakoe-Chiba half-width in segments; `None` is unconstrained DTW.
    pub band: Option<usize>,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 30, band: None }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[inline]
fn frame_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn dtw_distance(a: ArrayView2<f64>, b: ArrayView2<f64>, band: Option<usize>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            actual: b.ncols(),
        });
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::ShapeMismatch("DTW needs non-empty sequences".into()));
    }
    Ok(dtw_bounded(a, b, band, f64::INFINITY))
}

/// DTW that gives up (returning infinity) once every cell of a row exceeds `cutoff`.
pub(crate) fn dtw_bounded(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    band: Option<usize>,
    cutoff: f64,
) -> f64 {
    let (n, m) = (a.nrows(), b.nrows());
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let d = a.ncols();
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    // A band narrower than the length difference cannot reach the end cell.
    let w = band.map_or(usize::MAX, |w| w.max(n.abs_diff(m)));
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur.fill(f64::INFINITY);
        let lo = i.saturating_sub(w).max(1);
        let hi = i.saturating_add(w).min(m);
        let ai = &a[(i - 1) * d..i * d];
        let mut row_min = f64::INFINITY;
        for j in lo..=hi {
            let cost = frame_distance(ai, &b[(j - 1) * d..j * d]);
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = cost + best;
            row_min = row_min.min(cur[j]);
        }
        if row_min > cutoff {
            return f64::INFINITY;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnPrediction {
    pub label: i32,
    /// Votes per class, aligned with the model's sorted class list.
    pub votes: Vec<usize>,
    /// (training index, distance) of the chosen neighbors, nearest first.
    pub neighbors: Vec<(usize, f64)>,
}

pub fn sorted_classes(labels: &[i32]) -> Vec<i32> {
    let mut c = labels.to_vec();
    c.sort_unstable();
    c.dedup();
    c
}

/// Majority vote over the `k` DTW-nearest training sequences.
///
/// Ties go to the class with the smaller summed neighbor distance, then to
/// the smaller class code. When fewer than `k` samples exist all are used.
pub fn knn_predict(
    train: ArrayView3<f64>,
    labels: &[i32],
    query: ArrayView2<f64>,
    config: &KnnConfig,
) -> Result<KnnPrediction> {
    let classes = sorted_classes(labels);
    knn_predict_with_classes(train, labels, &classes, query, config)
}

fn knn_predict_with_classes(
    train: ArrayView3<f64>,
    labels: &[i32],
    classes: &[i32],
    query: ArrayView2<f64>,
    config: &KnnConfig,
) -> Result<KnnPrediction> {
    let n = train.dim().0;
    if n == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    if train.dim().2 != query.ncols() {
        return Err(Error::DimensionMismatch {
            expected: train.dim().2,
            actual: query.ncols(),
        });
    }
    let k = config.k.min(n);
    // (distance, label, index), kept sorted by (distance, label).
    let mut best: Vec<(f64, i32, usize)> = Vec::with_capacity(k + 1);
    for (i, sample) in train.axis_iter(Axis(0)).enumerate() {
        let cutoff = if best.len() == k { best[k - 1].0 } else { f64::INFINITY };
        let dist = dtw_bounded(sample, query, config.band, cutoff);
        if dist.is_infinite() {
            continue;
        }
        let key = (dist, labels[i]);
        if best.len() == k && key >= (best[k - 1].0, best[k - 1].1) {
            continue;
        }
        let pos = best.partition_point(|&(d, l, _)| (d, l) <= key);
        best.insert(pos, (dist, labels[i], i));
        best.truncate(k);
    }
    let mut votes = vec![0usize; classes.len()];
    let mut sums = vec![0.0f64; classes.len()];
    for &(d, l, _) in &best {
        let c = classes.binary_search(&l).map_err(|_| Error::UnknownClass(l))?;
        votes[c] += 1;
        sums[c] += d;
    }
    let winner = (0..classes.len())
        .filter(|&c| votes[c] > 0)
        .min_by(|&x, &y| {
            votes[y]
                .cmp(&votes[x])
                .then(sums[x].total_cmp(&sums[y]))
                .then(classes[x].cmp(&classes[y]))
        })
        .expect("at least one neighbor");
    Ok(KnnPrediction {
        label: classes[winner],
        votes,
        neighbors: best.iter().map(|&(d, _, i)| (i, d)).collect(),
    })
}

/// A fitted kNN model: the (normalized) training tensor and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub config: KnnConfig,
    pub train: Array3<f64>,
    pub labels: Vec<i32>,
    pub classes: Vec<i32>,
}

impl KnnModel {
    pub fn fit(train: Array3<f64>, labels: &[i32], config: KnnConfig) -> Result<Self> {
        config.validate()?;
        if train.dim().0 == 0 {
            return Err(Error::EmptyTrainingSet);
        }
        if labels.len() != train.dim().0 {
            return Err(Error::ShapeMismatch("label count differs from sample count".into()));
        }
        Ok(KnnModel {
            classes: sorted_classes(labels),
            labels: labels.to_vec(),
            train,
            config,
        })
    }

    pub fn predict_one(&self, query: ArrayView2<f64>) -> Result<KnnPrediction> {
        knn_predict_with_classes(self.train.view(), &self.labels, &self.classes, query, &self.config)
    }

    pub fn predict_all(&self, data: ArrayView3<f64>) -> Result<Vec<KnnPrediction>> {
        if data.dim().1 == 0 && data.dim().0 > 0 {
            return Err(Error::ShapeMismatch("queries have no segments".into()));
        }
        (0..data.dim().0)
            .into_par_iter()
            .map(|i| self.predict_one(data.index_axis(Axis(0), i)))
            .collect()
    }

    /// Vote fractions per class.
    pub fn vote_fractions(predictions: &[KnnPrediction], classes: usize) -> Array2<f64> {
        let mut out = Array2::zeros((predictions.len(), classes));
        for (i, p) in predictions.iter().enumerate() {
            let total: usize = p.votes.iter().sum();
            for (c, &v) in p.votes.iter().enumerate() {
                out[[i, c]] = v as f64 / total as f64;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_sequences_have_zero_distance() {
        let a = array![[0.1, 0.2], [0.5, 0.3], [0.9, 0.9]];
        assert_eq!(dtw_distance(a.view(), a.view(), None).unwrap(), 0.0);
    }

    #[test]
    fn small_hand_example() {
        let a = array![[0.0], [1.0], [2.0]];
        let b = array![[0.0], [2.0]];
        assert_eq!(dtw_distance(a.view(), b.view(), None).unwrap(), 1.0);
    }

    #[test]
    fn zero_band_is_diagonal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((9, 3), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((9, 3), |_| rng.random::<f64>());
        let diag: f64 = (0..9)
            .map(|i| frame_distance(a.row(i).as_slice().unwrap(), b.row(i).as_slice().unwrap()))
            .sum();
        let d = dtw_distance(a.view(), b.view(), Some(0)).unwrap();
        assert!((d - diag).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let a = array![[0.0, 1.0]];
        let b = array![[0.0]];
        assert!(matches!(
            dtw_distance(a.view(), b.view(), None),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn train_set(points: &[(f64, i32)]) -> (Array3<f64>, Vec<i32>) {
        let data = Array3::from_shape_fn((points.len(), 1, 1), |(i, _, _)| points[i].0);
        (data, points.iter().map(|p| p.1).collect())
    }

    #[test]
    fn nearest_sample_with_k1() {
        let (x, y) = train_set(&[(0.0, 1), (5.0, 2), (9.0, 3)]);
        let q = array![[5.0]];
        let p = knn_predict(x.view(), &y, q.view(), &KnnConfig { k: 1, band: None }).unwrap();
        assert_eq!(p.label, 2);
    }

    #[test]
    fn majority_and_tie_break() {
        let (x, y) = train_set(&[(0.1, 0), (0.2, 0), (0.15, 1), (3.0, 1)]);
        let q = array![[0.0]];
        let p = knn_predict(x.view(), &y, q.view(), &KnnConfig { k: 3, band: None }).unwrap();
        assert_eq!(p.label, 0);
        assert_eq!(p.votes, vec![2, 1]);

        // k = 4, votes 2:2; class 0 sums to 1.0, class 1 to 1.4.
        let (x, y) = train_set(&[(0.4, 0), (0.6, 0), (0.3, 1), (1.1, 1)]);
        let p = knn_predict(x.view(), &y, q.view(), &KnnConfig { k: 4, band: None }).unwrap();
        let sum = |c: i32| -> f64 {
            p.neighbors.iter().filter(|(i, _)| y[*i] == c).map(|(_, d)| d).sum()
        };
        assert!((sum(0) - 1.0).abs() < 1e-12 && (sum(1) - 1.4).abs() < 1e-12);
        assert_eq!(p.label, 0);

        // Equal votes and sums fall back to the smaller code.
        let (x, y) = train_set(&[(1.0, 7), (-1.0, 4)]);
        let p = knn_predict(x.view(), &y, q.view(), &KnnConfig { k: 2, band: None }).unwrap();
        assert_eq!(p.label, 4);
    }

    #[test]
    fn empty_training_set() {
        let x = Array3::<f64>::zeros((0, 1, 1));
        let q = array![[0.0]];
        assert!(matches!(
            knn_predict(x.view(), &[], q.view(), &KnnConfig::default()),
            Err(Error::EmptyTrainingSet)
        ));
    }

    fn seq(len: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(-1.0f64..1.0, len * d)
            .prop_map(move |v| Array2::from_shape_vec((len, d), v).unwrap())
    }

    fn pair() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
        (1usize..12, 1usize..12, 1usize..4).prop_flat_map(|(n, m, d)| (seq(n, d), seq(m, d)))
    }

    proptest! {
        #[test]
        fn symmetric_and_identity((a, b) in pair()) {
            let ab = dtw_distance(a.view(), b.view(), None).unwrap();
            let ba = dtw_distance(b.view(), a.view(), None).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            prop_assert_eq!(dtw_distance(a.view(), a.view(), None).unwrap(), 0.0);
            if ab == 0.0 {
                // Zero cost forces every frame of `a` to match some frame of `b` exactly.
                for ra in a.rows() {
                    prop_assert!(b.rows().into_iter().any(|rb| rb == ra));
                }
            }
        }

        #[test]
        fn narrowing_the_band_never_shrinks_distance((a, b) in pair()) {
            let mut last = 0.0;
            for w in 0..12 {
                let d = dtw_distance(a.view(), b.view(), Some(w)).unwrap();
                prop_assert!(w == 0 || d <= last + 1e-12);
                last = d;
            }
            let full = dtw_distance(a.view(), b.view(), None).unwrap();
            prop_assert!((full - last).abs() < 1e-12);
        }

        #[test]
        fn prediction_ignores_training_order(
            points in prop::collection::vec((0.0f64..10.0, 0i32..3), 5..30),
            q in 0.0f64..10.0,
            k in 1usize..8,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let (x, y) = train_set(&points);
            let query = array![[q]];
            let cfg = KnnConfig { k, band: None };
            let a = knn_predict(x.view(), &y, query.view(), &cfg).unwrap();
            let mut shuffled = points.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (x2, y2) = train_set(&shuffled);
            let b = knn_predict(x2.view(), &y2, query.view(), &cfg).unwrap();
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(a.votes, b.votes);
        }
    }
}
