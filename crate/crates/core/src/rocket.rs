//! ROCKET: random dilated convolution kernels summarized by PPV and max,
//! feeding a ridge classifier.
//!
//! Kernels are multivariate: each one reads a random subset of channels, with
//! its own centered weight row per channel. Feature column `2k` is the PPV of
//! kernel `k` and column `2k + 1` its max.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ridge::{RidgeClassifier, RidgeConfig};

pub const KERNEL_LENGTHS: [usize; 3] = [7, 9, 11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RocketConfig {
    pub n_kernels: usize,
    pub lengths: Vec<usize>,
    pub ridge: RidgeConfig,
}

impl Default for RocketConfig {
    fn default() -> Self {
        RocketConfig {
            n_kernels: 5000,
            lengths: KERNEL_LENGTHS.to_vec(),
            ridge: RidgeConfig::default(),
        }
    }
}

impl RocketConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_kernels == 0 {
            return Err(Error::InvalidConfig("n_kernels must be at least 1".into()));
        }
        if self.lengths.is_empty() || self.lengths.iter().any(|&l| l < 2) {
            return Err(Error::InvalidConfig("kernel lengths must be at least 2".into()));
        }
        self.ridge.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub length: usize,
    pub dilation: usize,
    pub padding: usize,
    pub bias: f64,
    /// Input channels read by this kernel, ascending.
    pub channels: Vec<usize>,
    /// `channels.len() × length`, row per channel.
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn output_len(&self, segments: usize) -> usize {
        (segments + 2 * self.padding).saturating_sub((self.length - 1) * self.dilation)
    }

    fn weight_row(&self, c: usize) -> &[f64] {
        &self.weights[c * self.length..(c + 1) * self.length]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSet {
    pub segments: usize,
    pub channels: usize,
    pub kernels: Vec<Kernel>,
}

impl KernelSet {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

/// Draws the kernel set for series of `segments` steps and `channels` inputs.
pub fn sample_kernels(config: &RocketConfig, segments: usize, channels: usize, seed: u64) -> Result<KernelSet> {
    config.validate()?;
    if segments == 0 || channels == 0 {
        return Err(Error::ShapeMismatch("kernels need at least one segment and channel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernels = Vec::with_capacity(config.n_kernels);
    for _ in 0..config.n_kernels {
        let length = config.lengths[rng.random_range(0..config.lengths.len())];

        let max_exp = (channels as f64).log2();
        let n_ch = (2f64.powf(rng.random_range(0.0..=max_exp)).floor() as usize).clamp(1, channels);
        let mut chosen = sample(&mut rng, channels, n_ch).into_vec();
        chosen.sort_unstable();

        let mut weights = Vec::with_capacity(n_ch * length);
        for _ in 0..n_ch {
            let row: Vec<f64> = (0..length).map(|_| rng.sample(StandardNormal)).collect();
            let mean = row.iter().sum::<f64>() / length as f64;
            weights.extend(row.iter().map(|w| w - mean));
        }
        let bias = rng.random_range(-1.0..1.0);

        let span_ratio = (segments.saturating_sub(1)) as f64 / (length - 1) as f64;
        let dilation = if span_ratio > 1.0 {
            2f64.powf(rng.random_range(0.0..span_ratio.log2())).floor() as usize
        } else {
            1
        }
        .max(1);
        let mut padding = if rng.random_bool(0.5) {
            (length - 1) * dilation / 2
        } else {
            0
        };
        // Series shorter than the kernel: pad so at least one output exists.
        if segments + 2 * padding <= (length - 1) * dilation {
            padding = ((length - 1) * dilation).div_ceil(2);
        }
        kernels.push(Kernel {
            length,
            dilation,
            padding,
            bias,
            channels: chosen,
            weights,
        });
    }
    Ok(KernelSet {
        segments,
        channels,
        kernels,
    })
}

/// Channel-major copy of one sample (`segments × channels` in, `channels × segments` out).
fn channel_major(sample: ArrayView2<f64>) -> Vec<f64> {
    let (l, d) = sample.dim();
    let mut out = vec![0.0; l * d];
    for t in 0..l {
        for c in 0..d {
            out[c * l + t] = sample[[t, c]];
        }
    }
    out
}

/// Adds one channel's dilated convolution into `out` (no bias).
fn accumulate_channel(kernel: &Kernel, ci: usize, series: &[f64], out: &mut [f64]) {
    let l = series.len() as isize;
    let w = kernel.weight_row(ci);
    let pad = kernel.padding as isize;
    let dil = kernel.dilation as isize;
    let n_out = out.len() as isize;
    for (j, &wj) in w.iter().enumerate() {
        let shift = j as isize * dil - pad;
        // Valid outputs i satisfy 0 <= i + shift < l.
        let lo = (-shift).max(0);
        let hi = (l - shift).min(n_out);
        if lo >= hi {
            continue;
        }
        let src = &series[(lo + shift) as usize..(hi + shift) as usize];
        for (o, &x) in out[lo as usize..hi as usize].iter_mut().zip(src) {
            *o += wj * x;
        }
    }
}

/// PPV and max of a convolution output.
pub fn ppv_max(output: &[f64]) -> (f64, f64) {
    if output.is_empty() {
        return (0.0, 0.0);
    }
    summarize(output.iter().copied(), output.len())
}

/// One pass over the output: positive count and max.
#[inline]
fn summarize(values: impl Iterator<Item = f64>, len: usize) -> (f64, f64) {
    let mut positive = 0usize;
    let mut max = f64::NEG_INFINITY;
    for v in values {
        positive += (v > 0.0) as usize;
        max = if v > max { v } else { max };
    }
    (positive as f64 / len as f64, max)
}

/// Full convolution output of one kernel over one channel-major sample.
pub fn convolve(kernel: &Kernel, sample_cm: &[f64], segments: usize) -> Vec<f64> {
    let mut out = vec![kernel.bias; kernel.output_len(segments)];
    for (ci, &c) in kernel.channels.iter().enumerate() {
        accumulate_channel(kernel, ci, &sample_cm[c * segments..(c + 1) * segments], &mut out);
    }
    out
}

/// Feature matrix `n × 2·N_R` of [PPV, max] per kernel.
pub fn apply_kernels(data: ArrayView3<f64>, kernels: &KernelSet) -> Result<Array2<f64>> {
    let (n, l, d) = data.dim();
    if l != kernels.segments || d != kernels.channels {
        return Err(Error::ShapeMismatch(format!(
            "kernels expect ({}, {}), data is ({l}, {d})",
            kernels.segments, kernels.channels
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cm = channel_major(data.index_axis(Axis(0), i));
            let mut row = Vec::with_capacity(2 * kernels.len());
            for k in &kernels.kernels {
                let (ppv, max) = ppv_max(&convolve(k, &cm, l));
                row.push(ppv);
                row.push(max);
            }
            row
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((n, 2 * kernels.len()), flat).expect("row widths are uniform"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocketModel {
    pub config: RocketConfig,
    pub kernels: KernelSet,
    pub ridge: RidgeClassifier,
}

impl RocketModel {
    pub fn fit(data: ArrayView3<f64>, labels: &[i32], config: &RocketConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (n, l, d) = data.dim();
        if n == 0 {
            return Err(Error::EmptyTrainingSet);
        }
        let kernels = sample_kernels(config, l, d, seed)?;
        let features = apply_kernels(data, &kernels)?;
        let ridge = RidgeClassifier::fit(features.view(), labels, &config.ridge, seed ^ 0x5eed_0f_c1a55)?;
        Ok(RocketModel {
            config: config.clone(),
            kernels,
            ridge,
        })
    }

    pub fn classes(&self) -> &[i32] {
        &self.ridge.classes
    }

    pub fn decision_function(&self, data: ArrayView3<f64>) -> Result<Array2<f64>> {
        let features = apply_kernels(data, &self.kernels)?;
        self.ridge.decision_function(features.view())
    }

    pub fn predict(&self, data: ArrayView3<f64>) -> Result<Vec<i32>> {
        let features = apply_kernels(data, &self.kernels)?;
        self.ridge.predict(features.view())
    }

    /// Score shifts caused by block-permuting `columns` across samples.
    ///
    /// Returns one `n × classes` matrix per permutation, equal to
    /// `scores(permuted) − scores(original)`. Uses that each kernel output is
    /// a sum of per-channel terms and ridge scores are linear in features, so
    /// only kernels touching `columns` are recomputed; the identity
    /// permutation yields exactly zero.
    pub fn permutation_score_shifts(
        &self,
        data: ArrayView3<f64>,
        columns: &[usize],
        perms: &[Vec<usize>],
    ) -> Result<Vec<Array2<f64>>> {
        let (n, l, d) = data.dim();
        if l != self.kernels.segments || d != self.kernels.channels {
            return Err(Error::ShapeMismatch("data does not match kernel set".into()));
        }
        if perms.iter().any(|p| p.len() != n) {
            return Err(Error::ShapeMismatch("permutation length differs from sample count".into()));
        }
        let k_classes = self.ridge.classes.len();
        let touched: Vec<usize> = (0..self.kernels.len())
            .filter(|&k| self.kernels.kernels[k].channels.iter().any(|c| columns.contains(c)))
            .collect();
        let samples: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| channel_major(data.index_axis(Axis(0), i)))
            .collect();
        let zero = || vec![Array2::<f64>::zeros((n, k_classes)); perms.len()];

        const CHUNK: usize = 16;
        let partials: Vec<Vec<Array2<f64>>> = touched
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = zero();
                for &k in chunk {
                    self.accumulate_kernel_shift(k, &samples, l, columns, perms, &mut acc);
                }
                acc
            })
            .collect();
        let mut total = zero();
        for part in partials {
            for (t, p) in total.iter_mut().zip(part) {
                *t += &p;
            }
        }
        Ok(total)
    }

    fn accumulate_kernel_shift(
        &self,
        k: usize,
        samples: &[Vec<f64>],
        l: usize,
        columns: &[usize],
        perms: &[Vec<usize>],
        acc: &mut [Array2<f64>],
    ) {
        let kernel = &self.kernels.kernels[k];
        let out_len = kernel.output_len(l);
        let n = samples.len();
        let mut fixed = vec![kernel.bias; n * out_len];
        let mut moved = vec![0.0; n * out_len];
        for (i, s) in samples.iter().enumerate() {
            for (ci, &c) in kernel.channels.iter().enumerate() {
                let target = if columns.contains(&c) { &mut moved } else { &mut fixed };
                accumulate_channel(kernel, ci, &s[c * l..(c + 1) * l], &mut target[i * out_len..(i + 1) * out_len]);
            }
        }
        // Same values as `ppv_max` on the summed output, without a buffer.
        let features_of = |i: usize, j: usize| {
            let a = &fixed[i * out_len..(i + 1) * out_len];
            let b = &moved[j * out_len..(j + 1) * out_len];
            summarize(a.iter().zip(b).map(|(x, y)| x + y), out_len)
        };
        let base: Vec<(f64, f64)> = (0..n).map(|i| features_of(i, i)).collect();
        let std = &self.ridge.standardizer;
        let (s_ppv, s_max) = (std.scale[2 * k], std.scale[2 * k + 1]);
        for (r, perm) in perms.iter().enumerate() {
            for i in 0..n {
                let j = perm[i];
                if j == i {
                    continue;
                }
                let (ppv, max) = features_of(i, j);
                let dp = (ppv - base[i].0) / s_ppv;
                let dm = (max - base[i].1) / s_max;
                if dp == 0.0 && dm == 0.0 {
                    continue;
                }
                for c in 0..acc[r].ncols() {
                    acc[r][[i, c]] += self.ridge.coef[[c, 2 * k]] * dp + self.ridge.coef[[c, 2 * k + 1]] * dm;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::{any, prop_assert, proptest};

    fn naive_output(kernel: &Kernel, sample: ArrayView2<f64>) -> Vec<f64> {
        let (l, _) = sample.dim();
        let n_out = kernel.output_len(l);
        (0..n_out)
            .map(|i| {
                let mut s = kernel.bias;
                for (ci, &c) in kernel.channels.iter().enumerate() {
                    for j in 0..kernel.length {
                        let idx = i as isize + (j * kernel.dilation) as isize - kernel.padding as isize;
                        if idx >= 0 && (idx as usize) < l {
                            s += kernel.weights[ci * kernel.length + j] * sample[[idx as usize, c]];
                        }
                    }
                }
                s
            })
            .collect()
    }

    #[test]
    fn ppv_and_max_examples() {
        assert_eq!(ppv_max(&[-1.0, 0.5, 2.0, -0.3]), (0.5, 2.0));
    }

    #[test]
    fn zero_input_gives_bias() {
        let data = Array3::<f64>::zeros((1, 20, 2));
        for bias in [-0.1, 0.1] {
            let set = KernelSet {
                segments: 20,
                channels: 2,
                kernels: vec![Kernel {
                    length: 7,
                    dilation: 2,
                    padding: 6,
                    bias,
                    channels: vec![0, 1],
                    weights: vec![0.5; 14],
                }],
            };
            let f = apply_kernels(data.view(), &set).unwrap();
            let expected_ppv = if bias > 0.0 { 1.0 } else { 0.0 };
            assert_eq!(f[[0, 0]], expected_ppv);
            assert_eq!(f[[0, 1]], bias);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_centered() {
        let cfg = RocketConfig::default();
        let a = sample_kernels(&cfg, 100, 36, 1).unwrap();
        let b = sample_kernels(&cfg, 100, 36, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5000);
        let mut hist = [0usize; 3];
        for k in &a.kernels {
            hist[KERNEL_LENGTHS.iter().position(|&x| x == k.length).unwrap()] += 1;
            for c in 0..k.channels.len() {
                let row = k.weight_row(c);
                assert!((row.iter().sum::<f64>() / row.len() as f64).abs() < 1e-9);
            }
            assert!((k.length - 1) * k.dilation <= 99);
            assert!(k.output_len(100) >= 1);
            assert!(!k.channels.is_empty() && k.channels.len() <= 36);
        }
        for h in hist {
            assert!((1500..=1833).contains(&h), "{hist:?}");
        }
    }

    #[test]
    fn short_series_still_produce_outputs() {
        let cfg = RocketConfig {
            n_kernels: 200,
            ..RocketConfig::default()
        };
        let set = sample_kernels(&cfg, 5, 3, 2).unwrap();
        assert!(set.kernels.iter().all(|k| k.output_len(5) >= 1));
    }

    #[test]
    fn shape_mismatch() {
        let cfg = RocketConfig {
            n_kernels: 3,
            ..RocketConfig::default()
        };
        let set = sample_kernels(&cfg, 10, 2, 0).unwrap();
        let data = Array3::<f64>::zeros((1, 10, 3));
        assert!(matches!(apply_kernels(data.view(), &set), Err(Error::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn application_matches_naive(seed in any::<u64>(), l in 2usize..40, d in 1usize..5) {
            let cfg = RocketConfig { n_kernels: 12, ..RocketConfig::default() };
            let set = sample_kernels(&cfg, l, d, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let data = Array3::from_shape_fn((2, l, d), |_| rng.random_range(-1.0..1.0));
            let f = apply_kernels(data.view(), &set).unwrap();
            for i in 0..2 {
                for (k, kernel) in set.kernels.iter().enumerate() {
                    let out = naive_output(kernel, data.index_axis(Axis(0), i));
                    let positive = out.iter().filter(|&&v| v > 0.0).count() as f64 / out.len() as f64;
                    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!((f[[i, 2 * k]] - positive).abs() <= 1.0 / out.len() as f64);
                    prop_assert!((f[[i, 2 * k + 1]] - max).abs() < 1e-9);
                    prop_assert!((0.0..=1.0).contains(&f[[i, 2 * k]]));
                }
            }
        }
    }

    fn blobs(n_per: usize, seed: u64) -> (Array3<f64>, Vec<i32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<i32> = (0..3 * n_per).map(|i| (i % 3) as i32).collect();
        let data = Array3::from_shape_fn((labels.len(), 20, 2), |(i, t, c)| {
            let freq = 1.0 + labels[i] as f64;
            (freq * t as f64 / 3.0 + c as f64).sin() + 0.1 * rng.random_range(-1.0..1.0)
        });
        (data, labels)
    }

    #[test]
    fn fits_and_predicts_deterministically() {
        let (data, labels) = blobs(10, 3);
        let cfg = RocketConfig {
            n_kernels: 100,
            ..RocketConfig::default()
        };
        let m = RocketModel::fit(data.view(), &labels, &cfg, 7).unwrap();
        let pred = m.predict(data.view()).unwrap();
        assert_eq!(pred, labels);
        let again = RocketModel::fit(data.view(), &labels, &cfg, 7).unwrap();
        assert_eq!(again.predict(data.view()).unwrap(), pred);
        let one = data.slice(ndarray::s![0..1, .., ..]);
        assert_eq!(m.predict(one).unwrap().len(), 1);
    }

    #[test]
    fn fast_permutation_matches_recomputation() {
        let (data, labels) = blobs(6, 4);
        let cfg = RocketConfig {
            n_kernels: 60,
            ..RocketConfig::default()
        };
        let m = RocketModel::fit(data.view(), &labels, &cfg, 1).unwrap();
        let n = labels.len();
        let identity: Vec<usize> = (0..n).collect();
        let reversed: Vec<usize> = (0..n).rev().collect();
        let shifts = m
            .permutation_score_shifts(data.view(), &[1], &[identity, reversed.clone()])
            .unwrap();
        assert!(shifts[0].iter().all(|&v| v == 0.0));

        let base = m.decision_function(data.view()).unwrap();
        let mut permuted = data.clone();
        for i in 0..n {
            for t in 0..20 {
                permuted[[i, t, 1]] = data[[reversed[i], t, 1]];
            }
        }
        let direct = m.decision_function(permuted.view()).unwrap() - &base;
        for (a, b) in direct.iter().zip(shifts[1].iter()) {
            assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }
}
