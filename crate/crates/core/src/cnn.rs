//! Shallow 1D convolutional network with hand-written forward and backward passes.
//!
//! Architecture: `conv_layers` valid, stride-1 convolutions each followed by
//! ReLU, global average pooling over time, one affine layer and softmax.
//! Trained with Adam on the mean softmax cross-entropy of each mini-batch.
//!
//! Parameters live in one flat vector. Layout, in order: for each conv layer
//! its weights `[filter][tap][in_channel]` then its biases `[filter]`; then the
//! head weights `[class][filter]` and head biases `[class]`.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::sorted_classes;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub conv_layers: usize,
    pub filters: usize,
    pub filter_length: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            conv_layers: 2,
            filters: 10,
            filter_length: 10,
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.conv_layers == 0 {
            return bad("at least one conv layer is required");
        }
        if self.filters == 0 || self.filter_length == 0 {
            return bad("filter count and length must be at least 1");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// Valid, stride-1 cross-correlation: `out[t][f] = bias[f] + Σ_{τ,c} input[t+τ][c]·kernels[f][τ][c]`.
pub fn conv1d_forward(
    input: ArrayView2<f64>,
    kernels: ArrayView3<f64>,
    bias: &[f64],
) -> Result<Array2<f64>> {
    let (len, channels) = input.dim();
    let (filters, taps, kc) = kernels.dim();
    if kc != channels {
        return Err(Error::DimensionMismatch {
            expected: kc,
            actual: channels,
        });
    }
    if bias.len() != filters {
        return Err(Error::DimensionMismatch {
            expected: filters,
            actual: bias.len(),
        });
    }
    if len < taps {
        return Err(Error::InputTooShort {
            length: len,
            filter: taps,
        });
    }
    let input = input.as_standard_layout();
    let kernels = kernels.as_standard_layout();
    let out_len = len - taps + 1;
    let mut out = vec![0.0; out_len * filters];
    conv_forward_raw(
        input.as_slice().unwrap(),
        channels,
        kernels.as_slice().unwrap(),
        bias,
        filters,
        taps,
        &mut out,
    );
    Ok(Array2::from_shape_vec((out_len, filters), out).expect("shape"))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// The window input[t..t+taps][..] is contiguous, so each output is one dot product.
fn conv_forward_raw(
    input: &[f64],
    channels: usize,
    weights: &[f64],
    bias: &[f64],
    filters: usize,
    taps: usize,
    out: &mut [f64],
) {
    let width = taps * channels;
    let out_len = out.len() / filters;
    for t in 0..out_len {
        let window = &input[t * channels..t * channels + width];
        for f in 0..filters {
            out[t * filters + f] = bias[f] + dot(window, &weights[f * width..(f + 1) * width]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvShape {
    pub filters: usize,
    pub taps: usize,
    pub in_channels: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub segments: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub convs: Vec<ConvShape>,
    pub head_weight_offset: usize,
    pub head_bias_offset: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(config: &CnnConfig, segments: usize, in_channels: usize, classes: usize) -> Result<Self> {
        let mut offset = 0;
        let mut convs = Vec::new();
        let mut channels = in_channels;
        let mut len = segments;
        for _ in 0..config.conv_layers {
            if len < config.filter_length {
                return Err(Error::InputTooShort {
                    length: len,
                    filter: config.filter_length,
                });
            }
            len = len - config.filter_length + 1;
            let shape = ConvShape {
                filters: config.filters,
                taps: config.filter_length,
                in_channels: channels,
                weight_offset: offset,
                bias_offset: offset + config.filters * config.filter_length * channels,
            };
            offset = shape.bias_offset + config.filters;
            convs.push(shape);
            channels = config.filters;
        }
        let head_weight_offset = offset;
        let head_bias_offset = offset + classes * channels;
        Ok(Layout {
            segments,
            in_channels,
            classes,
            convs,
            head_weight_offset,
            head_bias_offset,
            total: head_bias_offset + classes,
        })
    }

    fn features(&self) -> usize {
        self.convs.last().map_or(self.in_channels, |c| c.filters)
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut params = vec![0.0; self.total];
        for c in &self.convs {
            let fan_in = (c.taps * c.in_channels) as f64;
            let fan_out = (c.taps * c.filters) as f64;
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            for w in &mut params[c.weight_offset..c.bias_offset] {
                *w = dist.sample(rng);
            }
        }
        let f = self.features() as f64;
        let limit = (6.0 / (f + self.classes as f64)).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        for w in &mut params[self.head_weight_offset..self.head_bias_offset] {
            *w = dist.sample(rng);
        }
        params
    }
}

struct Activations {
    /// Inputs of each conv layer (the first is the sample itself), then the last output.
    layers: Vec<Vec<f64>>,
    lens: Vec<usize>,
    pooled: Vec<f64>,
    probs: Vec<f64>,
}

fn forward(layout: &Layout, params: &[f64], sample: &[f64]) -> Activations {
    let mut layers = vec![sample.to_vec()];
    let mut lens = vec![layout.segments];
    for c in &layout.convs {
        let len = lens.last().unwrap() - c.taps + 1;
        let mut out = vec![0.0; len * c.filters];
        conv_forward_raw(
            layers.last().unwrap(),
            c.in_channels,
            &params[c.weight_offset..c.bias_offset],
            &params[c.bias_offset..c.bias_offset + c.filters],
            c.filters,
            c.taps,
            &mut out,
        );
        for v in &mut out {
            *v = v.max(0.0);
        }
        layers.push(out);
        lens.push(len);
    }
    let feat = layout.features();
    let last = layers.last().unwrap();
    let len = *lens.last().unwrap();
    let mut pooled = vec![0.0; feat];
    for t in 0..len {
        for f in 0..feat {
            pooled[f] += last[t * feat + f];
        }
    }
    for p in &mut pooled {
        *p /= len as f64;
    }
    let w = &params[layout.head_weight_offset..layout.head_bias_offset];
    let b = &params[layout.head_bias_offset..layout.total];
    let logits: Vec<f64> = (0..layout.classes)
        .map(|k| b[k] + dot(&w[k * feat..(k + 1) * feat], &pooled))
        .collect();
    Activations {
        layers,
        lens,
        pooled,
        probs: softmax(&logits),
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of one sample and its gradient w.r.t. every parameter.
fn sample_gradient(layout: &Layout, params: &[f64], sample: &[f64], target: usize) -> (f64, Vec<f64>) {
    let act = forward(layout, params, sample);
    let mut grad = vec![0.0; layout.total];
    let loss = -act.probs[target].max(1e-300).ln();
    let feat = layout.features();

    let mut dlogits = act.probs.clone();
    dlogits[target] -= 1.0;
    let w = &params[layout.head_weight_offset..layout.head_bias_offset];
    let mut dpooled = vec![0.0; feat];
    for k in 0..layout.classes {
        grad[layout.head_bias_offset + k] = dlogits[k];
        for f in 0..feat {
            grad[layout.head_weight_offset + k * feat + f] = dlogits[k] * act.pooled[f];
            dpooled[f] += dlogits[k] * w[k * feat + f];
        }
    }

    let last_len = *act.lens.last().unwrap();
    let mut dout: Vec<f64> = (0..last_len * feat)
        .map(|i| dpooled[i % feat] / last_len as f64)
        .collect();
    for (li, c) in layout.convs.iter().enumerate().rev() {
        let out = &act.layers[li + 1];
        let input = &act.layers[li];
        let out_len = act.lens[li + 1];
        // ReLU mask: the stored output is max(z, 0), so z > 0 iff output > 0.
        for (d, &o) in dout.iter_mut().zip(out) {
            if o <= 0.0 {
                *d = 0.0;
            }
        }
        let width = c.taps * c.in_channels;
        let weights = &params[c.weight_offset..c.bias_offset];
        let mut din = vec![0.0; input.len()];
        for t in 0..out_len {
            let window = t * c.in_channels..t * c.in_channels + width;
            for f in 0..c.filters {
                let g = dout[t * c.filters + f];
                if g == 0.0 {
                    continue;
                }
                grad[c.bias_offset + f] += g;
                let gw = &mut grad[c.weight_offset + f * width..c.weight_offset + (f + 1) * width];
                for (gwi, xi) in gw.iter_mut().zip(&input[window.clone()]) {
                    *gwi += g * xi;
                }
                for (di, wi) in din[window.clone()].iter_mut().zip(&weights[f * width..(f + 1) * width]) {
                    *di += g * wi;
                }
            }
        }
        dout = din;
    }
    (loss, grad)
}

/// Mean loss and mean gradient over `batch` (indices into `data`).
pub fn batch_gradient(
    layout: &Layout,
    params: &[f64],
    data: &[Vec<f64>],
    targets: &[usize],
    batch: &[usize],
) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|&i| sample_gradient(layout, params, &data[i], targets[i]))
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; layout.total];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    for g in &mut grad {
        *g *= scale;
    }
    (loss * scale, grad)
}

/// Mean cross-entropy without gradients.
pub fn batch_loss(layout: &Layout, params: &[f64], data: &[Vec<f64>], targets: &[usize], batch: &[usize]) -> f64 {
    batch
        .iter()
        .map(|&i| -forward(layout, params, &data[i]).probs[targets[i]].max(1e-300).ln())
        .sum::<f64>()
        / batch.len() as f64
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &CnnConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub config: CnnConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
    pub classes: Vec<i32>,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
}

fn flatten(data: ArrayView3<f64>) -> Vec<Vec<f64>> {
    data.axis_iter(Axis(0))
        .map(|s| s.iter().copied().collect())
        .collect()
}

pub fn train_cnn(data: ArrayView3<f64>, labels: &[i32], config: &CnnConfig, seed: u64) -> Result<CnnModel> {
    config.validate()?;
    let (n, segments, channels) = data.dim();
    if n == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch("label count differs from sample count".into()));
    }
    let classes = sorted_classes(labels);
    if classes.len() < 2 {
        return Err(Error::DegenerateLabels);
    }
    let targets: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("class present"))
        .collect();
    let layout = Layout::new(config, segments, channels, classes.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = layout.init(&mut rng);
    let samples = flatten(data);
    let mut adam = Adam::new(layout.total);
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grad) = batch_gradient(&layout, &params, &samples, &targets, batch);
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut params, &grad, config);
        }
        loss_history.push(epoch_loss / n as f64);
    }
    Ok(CnnModel {
        config: config.clone(),
        layout,
        params,
        classes,
        loss_history,
    })
}

impl CnnModel {
    /// Class probabilities, one row per sample.
    pub fn predict_proba(&self, data: ArrayView3<f64>) -> Result<Array2<f64>> {
        let (n, segments, channels) = data.dim();
        if segments != self.layout.segments || channels != self.layout.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects ({}, {}), got ({segments}, {channels})",
                self.layout.segments, self.layout.in_channels
            )));
        }
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let sample: Vec<f64> = data.index_axis(Axis(0), i).iter().copied().collect();
                forward(&self.layout, &self.params, &sample).probs
            })
            .collect();
        let mut out = Array2::zeros((n, self.classes.len()));
        for (i, r) in rows.into_iter().enumerate() {
            out.row_mut(i).assign(&ndarray::Array1::from(r));
        }
        Ok(out)
    }

    pub fn predict(&self, data: ArrayView3<f64>) -> Result<(Vec<i32>, Array2<f64>)> {
        let probs = self.predict_proba(data)?;
        let labels = probs
            .rows()
            .into_iter()
            .map(|r| self.classes[crate::model::argmax(r.as_slice().unwrap())])
            .collect();
        Ok((labels, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Axis};
    use proptest::prelude::*;
    use rand::Rng;

    fn naive_conv(input: &Array2<f64>, k: &Array3<f64>, bias: &[f64]) -> Array2<f64> {
        let (len, ch) = input.dim();
        let (f, taps, _) = k.dim();
        let mut out = Array2::zeros((len - taps + 1, f));
        for t in 0..len - taps + 1 {
            for ff in 0..f {
                let mut acc = bias[ff];
                for tau in 0..taps {
                    for c in 0..ch {
                        acc += input[[t + tau, c]] * k[[ff, tau, c]];
                    }
                }
                out[[t, ff]] = acc;
            }
        }
        out
    }

    #[test]
    fn zero_input_gives_bias() {
        let input = Array2::zeros((12, 3));
        let k = Array3::from_elem((4, 5, 3), 0.7);
        let out = conv1d_forward(input.view(), k.view(), &[1.0, -2.0, 0.5, 0.0]).unwrap();
        assert_eq!(out.dim(), (8, 4));
        for row in out.rows() {
            assert_eq!(row.to_vec(), vec![1.0, -2.0, 0.5, 0.0]);
        }
    }

    #[test]
    fn delta_input_reads_out_first_tap() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = Array3::from_shape_fn((3, 4, 2), |_| rng.random::<f64>());
        let mut input = Array2::zeros((6, 2));
        input[[0, 0]] = 1.0;
        let out = conv1d_forward(input.view(), k.view(), &[0.0; 3]).unwrap();
        for f in 0..3 {
            assert_eq!(out[[0, f]], k[[f, 0, 0]]);
            for t in 1..3 {
                assert_eq!(out[[t, f]], 0.0);
            }
        }
    }

    #[test]
    fn too_short_input() {
        let input = Array2::zeros((3, 1));
        let k = Array3::zeros((1, 4, 1));
        assert!(matches!(
            conv1d_forward(input.view(), k.view(), &[0.0]),
            Err(Error::InputTooShort { length: 3, filter: 4 })
        ));
    }

    proptest! {
        #[test]
        fn forward_matches_naive(len in 1usize..30, ch in 1usize..5, f in 1usize..5, taps in 1usize..8, seed in any::<u64>()) {
            prop_assume!(taps <= len);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = Array2::from_shape_fn((len, ch), |_| rng.random_range(-1.0..1.0));
            let k = Array3::from_shape_fn((f, taps, ch), |_| rng.random_range(-1.0..1.0));
            let bias: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv1d_forward(input.view(), k.view(), &bias).unwrap();
            let slow = naive_conv(&input, &k, &bias);
            for (a, b) in fast.iter().zip(slow.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    fn micro_setup(seed: u64) -> (Layout, Vec<f64>, Vec<Vec<f64>>, Vec<usize>) {
        let cfg = CnnConfig {
            filters: 3,
            filter_length: 4,
            ..CnnConfig::default()
        };
        let layout = Layout::new(&cfg, 16, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = layout.init(&mut rng);
        for b in layout.convs.iter().flat_map(|c| c.bias_offset..c.bias_offset + c.filters) {
            params[b] = rng.random_range(0.05..0.2);
        }
        let data: Vec<Vec<f64>> = (0..3).map(|_| (0..64).map(|_| rng.random::<f64>()).collect()).collect();
        (layout, params, data, vec![0, 2, 1])
    }

    #[test]
    fn batch_gradient_is_order_free() {
        let (layout, params, data, targets) = micro_setup(5);
        let (la, ga) = batch_gradient(&layout, &params, &data, &targets, &[0, 1, 2]);
        let (lb, gb) = batch_gradient(&layout, &params, &data, &targets, &[2, 0, 1]);
        assert!((la - lb).abs() < 1e-12);
        for (a, b) in ga.iter().zip(&gb) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let (layout, _, data, _) = micro_setup(1);
        let model = CnnModel {
            config: CnnConfig::default(),
            params: vec![0.0; layout.total],
            classes: vec![0, 1, 2],
            loss_history: Vec::new(),
            layout,
        };
        let x = Array3::from_shape_vec((3, 16, 4), data.concat()).unwrap();
        let probs = model.predict_proba(x.view()).unwrap();
        for p in probs.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 40;
        let labels: Vec<i32> = (0..n).map(|i| (i % 2) as i32).collect();
        let data = Array3::from_shape_fn((n, 20, 2), |(i, t, c)| {
            let signal = if labels[i] == 1 && c == 0 { 0.8 } else { 0.2 };
            signal + 0.1 * ((t * 7 + i * 3) % 5) as f64 / 5.0
        });
        let _ = rng.random::<u8>();
        let cfg = CnnConfig {
            filters: 4,
            filter_length: 3,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-2,
            ..CnnConfig::default()
        };
        let a = train_cnn(data.view(), &labels, &cfg, 9).unwrap();
        let b = train_cnn(data.view(), &labels, &cfg, 9).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.loss_history.last().unwrap() < &a.loss_history[0]);
        let (pred, probs) = a.predict(data.view()).unwrap();
        let acc = pred.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / n as f64;
        assert!(acc >= 0.95, "accuracy {acc}");
        for row in probs.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let data = Array3::zeros((4, 20, 1));
        assert!(matches!(
            train_cnn(data.view(), &[3, 3, 3, 3], &CnnConfig::default(), 0),
            Err(Error::DegenerateLabels)
        ));
    }

    /// Central differences on every parameter of a small network.
    fn finite_difference_check(seed: u64) -> (usize, f64) {
        let (layout, params, data, targets) = micro_setup(seed);
        let batch = [0, 1, 2];
        let (_, analytic) = batch_gradient(&layout, &params, &data, &targets, &batch);
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..layout.total {
            let mut p = params.clone();
            p[i] += eps;
            let up = batch_loss(&layout, &p, &data, &targets, &batch);
            p[i] -= 2.0 * eps;
            let down = batch_loss(&layout, &p, &data, &targets, &batch);
            let numeric = (up - down) / (2.0 * eps);
            let scale = analytic[i].abs().max(numeric.abs());
            let rel = if scale < 1e-7 { 0.0 } else { (analytic[i] - numeric).abs() / scale };
            worst = worst.max(rel);
        }
        (layout.total, worst)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (count, worst) = finite_difference_check(21);
        assert!(count > 100);
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
