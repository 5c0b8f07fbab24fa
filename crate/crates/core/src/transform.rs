//! Fixed-length transformation of variable-length traces.
//!
//! Each trace is split into `segments` contiguous, evenly sized chunks. Every
//! chunk is summarized per feature by the configured statistics (by default
//! the accumulated sum, the mean and the population standard deviation), so a
//! trace of any length becomes a `segments × (d · |statistics|)` matrix.
//! Columns are laid out statistic-major: all features' sums, then all means,
//! then all standard deviations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{hex_digest, Environment, FeatureGroup, FeatureSchema, Scale, SessionTrace};

pub const DEFAULT_SEGMENTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Accumulate,
    Mean,
    Std,
}

impl Statistic {
    pub fn prefix(self) -> &'static str {
        match self {
            Statistic::Accumulate => "acc",
            Statistic::Mean => "mean",
            Statistic::Std => "std",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// Per-column min-max fitted on training data, clamped when applied.
    MinMaxGlobal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    pub segments: usize,
    pub statistics: Vec<Statistic>,
    pub normalization: Normalization,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            segments: DEFAULT_SEGMENTS,
            statistics: vec![Statistic::Accumulate, Statistic::Mean, Statistic::Std],
            normalization: Normalization::MinMaxGlobal,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::InvalidConfig("segment count must be at least 1".into()));
        }
        if self.statistics.is_empty() {
            return Err(Error::InvalidConfig("at least one statistic is required".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self, raw_dim: usize) -> usize {
        raw_dim * self.statistics.len()
    }
}

/// Start index of segment `k` when `len` frames are split into `segments` parts.
#[inline]
pub fn segment_start(len: usize, segments: usize, k: usize) -> usize {
    (len * k).div_ceil(segments)
}

fn frame_matrix(trace: &SessionTrace) -> Array2<f64> {
    let d = trace.frames.first().map_or(0, |f| f.values.len());
    let mut m = Array2::zeros((trace.frames.len(), d));
    for (mut row, frame) in m.rows_mut().into_iter().zip(&trace.frames) {
        row.assign(&ndarray::ArrayView1::from(&frame.values[..]));
    }
    m
}

/// Per-segment feature sums; empty segments are zero rows.
pub fn segment_accumulate(trace: &SessionTrace, segments: usize) -> Array2<f64> {
    segment_stats(trace, segments, &[Statistic::Accumulate])
}

pub fn segment_stats(trace: &SessionTrace, segments: usize, stats: &[Statistic]) -> Array2<f64> {
    stats_of_rows(&frame_matrix(trace), segments, stats)
}

/// Segment statistics over a `T × d` frame matrix.
pub fn stats_of_rows(frames: &Array2<f64>, segments: usize, stats: &[Statistic]) -> Array2<f64> {
    let (len, d) = frames.dim();
    let mut out = Array2::zeros((segments, d * stats.len()));
    for k in 0..segments {
        let (a, b) = (segment_start(len, segments, k), segment_start(len, segments, k + 1));
        if a == b {
            continue;
        }
        let size = (b - a) as f64;
        let chunk = frames.slice(s![a..b, ..]);
        for j in 0..d {
            let col = chunk.column(j);
            let sum: f64 = col.sum();
            let mean = sum / size;
            for (si, stat) in stats.iter().enumerate() {
                out[[k, si * d + j]] = match stat {
                    Statistic::Accumulate => sum,
                    Statistic::Mean => mean,
                    Statistic::Std if b - a <= 1 => 0.0,
                    Statistic::Std => {
                        (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / size).sqrt()
                    }
                };
            }
        }
    }
    out
}

/// Per-column min-max ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub ranges: Vec<(f64, f64)>,
}

impl Normalizer {
    /// Fits ranges over every sample and segment of `data` (n × l × d).
    pub fn fit(data: ArrayView3<f64>) -> Self {
        let d = data.dim().2;
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for lane in data.lanes(Axis(2)) {
            for (r, &v) in ranges.iter_mut().zip(lane) {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        for r in &mut ranges {
            if !r.0.is_finite() {
                *r = (0.0, 0.0);
            }
        }
        Normalizer { ranges }
    }

    #[inline]
    pub fn scale(&self, column: usize, v: f64) -> f64 {
        let (lo, hi) = self.ranges[column];
        if hi > lo {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn apply(&self, data: ArrayView3<f64>) -> Result<Array3<f64>> {
        if data.dim().2 != self.ranges.len() {
            return Err(Error::ShapeMismatch(format!(
                "normalizer has {} columns, data has {}",
                self.ranges.len(),
                data.dim().2
            )));
        }
        let mut out = data.to_owned();
        for mut lane in out.lanes_mut(Axis(2)) {
            for (c, v) in lane.iter_mut().enumerate() {
                *v = self.scale(c, *v);
            }
        }
        Ok(out)
    }

    pub fn select(&self, columns: &[usize]) -> Normalizer {
        Normalizer {
            ranges: columns.iter().map(|&c| self.ranges[c]).collect(),
        }
    }
}

/// The transformed dataset: samples × segments × derived features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub data: Array3<f64>,
    pub labels_task: Vec<i32>,
    pub labels_space: Vec<i32>,
    pub trace_ids: Vec<String>,
    pub raw_schema: FeatureSchema,
    pub statistics: Vec<Statistic>,
    /// Present when `data` has already been normalized.
    pub normalization: Option<Normalizer>,
}

pub fn derived_names(schema: &FeatureSchema, stats: &[Statistic]) -> Vec<String> {
    stats
        .iter()
        .flat_map(|s| schema.names().map(move |n| format!("{}:{n}", s.prefix())))
        .collect()
}

pub fn derived_hash(names: &[String]) -> String {
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update(b"\n");
    }
    hex_digest(h)
}

impl FeatureTensor {
    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> usize {
        self.data.dim().1
    }

    pub fn feature_names(&self) -> Vec<String> {
        derived_names(&self.raw_schema, &self.statistics)
    }

    pub fn schema_hash(&self) -> String {
        derived_hash(&self.feature_names())
    }

    pub fn labels(&self, scale: Scale) -> &[i32] {
        match scale {
            Scale::Space => &self.labels_space,
            Scale::Task => &self.labels_task,
        }
    }

    /// Derived columns that came from raw feature `raw`.
    pub fn columns_of(&self, raw: usize) -> Vec<usize> {
        let d = self.raw_schema.dim();
        (0..self.statistics.len()).map(|s| s * d + raw).collect()
    }

    pub fn columns_of_name(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.columns_of(self.raw_schema.require(name)?))
    }

    /// Keeps only the listed raw features (in the given order).
    pub fn select_raw_features(&self, keep: &[usize]) -> FeatureTensor {
        let d = self.raw_schema.dim();
        let columns: Vec<usize> = (0..self.statistics.len())
            .flat_map(|s| keep.iter().map(move |&j| s * d + j))
            .collect();
        let data = self.data.select(Axis(2), &columns);
        FeatureTensor {
            data,
            labels_task: self.labels_task.clone(),
            labels_space: self.labels_space.clone(),
            trace_ids: self.trace_ids.clone(),
            raw_schema: FeatureSchema {
                features: keep.iter().map(|&j| self.raw_schema.features[j].clone()).collect(),
                ..self.raw_schema.clone()
            },
            statistics: self.statistics.clone(),
            normalization: self.normalization.as_ref().map(|n| n.select(&columns)),
        }
    }

    pub fn without_group(&self, group: FeatureGroup) -> Result<FeatureTensor> {
        let keep: Vec<usize> = (0..self.raw_schema.dim())
            .filter(|&j| self.raw_schema.features[j].group != group)
            .collect();
        if keep.is_empty() {
            return Err(Error::EmptyFeatureSet(group.name().to_string()));
        }
        Ok(self.select_raw_features(&keep))
    }

    pub fn subset(&self, rows: &[usize]) -> FeatureTensor {
        FeatureTensor {
            data: self.data.select(Axis(0), rows),
            labels_task: rows.iter().map(|&i| self.labels_task[i]).collect(),
            labels_space: rows.iter().map(|&i| self.labels_space[i]).collect(),
            trace_ids: rows.iter().map(|&i| self.trace_ids[i].clone()).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> FeatureTensor {
        FeatureTensor {
            data: Array3::zeros((0, 0, 0)),
            labels_task: Vec::new(),
            labels_space: Vec::new(),
            trace_ids: Vec::new(),
            raw_schema: self.raw_schema.clone(),
            statistics: self.statistics.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// Returns a normalized copy using `normalizer`.
    pub fn normalized_with(&self, normalizer: &Normalizer) -> Result<FeatureTensor> {
        if self.normalization.is_some() {
            return Err(Error::InvalidConfig("tensor is already normalized".into()));
        }
        Ok(FeatureTensor {
            data: normalizer.apply(self.data.view())?,
            normalization: Some(normalizer.clone()),
            labels_task: self.labels_task.clone(),
            labels_space: self.labels_space.clone(),
            trace_ids: self.trace_ids.clone(),
            raw_schema: self.raw_schema.clone(),
            statistics: self.statistics.clone(),
        })
    }

    pub fn header(&self) -> TensorHeader {
        let (n, l, d) = self.data.dim();
        TensorHeader {
            format: TENSOR_FORMAT.to_string(),
            version: 1,
            shape: [n, l, d],
            environment: self.raw_schema.environment,
            raw_schema: self.raw_schema.clone(),
            statistics: self.statistics.clone(),
            feature_names: self.feature_names(),
            schema_hash: self.schema_hash(),
            normalization: self.normalization.clone(),
            labels_task: self.labels_task.clone(),
            labels_space: self.labels_space.clone(),
            trace_ids: self.trace_ids.clone(),
        }
    }

    /// Writes `path` (little-endian f32, row-major) and its JSON header next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for &v in self.data.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()?;
        let header = serde_json::to_string_pretty(&self.header())?;
        std::fs::write(header_path(path), header)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureTensor> {
        let header: TensorHeader =
            serde_json::from_reader(BufReader::new(File::open(header_path(path))?))?;
        if header.format != TENSOR_FORMAT {
            return Err(Error::SchemaMismatch(format!("not a tensor header: {}", header.format)));
        }
        let [n, l, d] = header.shape;
        let names = derived_names(&header.raw_schema, &header.statistics);
        if names != header.feature_names || names.len() != d || derived_hash(&names) != header.schema_hash {
            return Err(Error::SchemaMismatch("tensor header is inconsistent with its schema".into()));
        }
        if header.labels_task.len() != n || header.labels_space.len() != n || header.trace_ids.len() != n {
            return Err(Error::ShapeMismatch("label arrays do not match sample count".into()));
        }
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() != n * l * d * 4 {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes for shape ({n}, {l}, {d})",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(FeatureTensor {
            data: Array3::from_shape_vec((n, l, d), values)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
            labels_task: header.labels_task,
            labels_space: header.labels_space,
            trace_ids: header.trace_ids,
            raw_schema: header.raw_schema,
            statistics: header.statistics,
            normalization: header.normalization,
        })
    }
}

pub const TENSOR_FORMAT: &str = "provts-tensor";

pub fn header_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorHeader {
    pub format: String,
    pub version: u32,
    pub shape: [usize; 3],
    pub environment: Environment,
    pub raw_schema: FeatureSchema,
    pub statistics: Vec<Statistic>,
    pub feature_names: Vec<String>,
    pub schema_hash: String,
    pub normalization: Option<Normalizer>,
    pub labels_task: Vec<i32>,
    pub labels_space: Vec<i32>,
    pub trace_ids: Vec<String>,
}

/// Transforms one trace to `segments × d_out`.
pub fn transform_trace(trace: &SessionTrace, config: &TransformConfig) -> Array2<f64> {
    segment_stats(trace, config.segments, &config.statistics)
}

/// Builds the unnormalized tensor; labels default to -1 for open traces.
pub fn build_dataset(
    traces: &[SessionTrace],
    schema: &FeatureSchema,
    config: &TransformConfig,
) -> Result<FeatureTensor> {
    config.validate()?;
    for t in traces {
        t.validate(schema)?;
    }
    let d_out = config.output_dim(schema.dim());
    let rows: Vec<Array2<f64>> = traces
        .par_iter()
        .map(|t| transform_trace(t, config))
        .collect();
    let mut data = Array3::zeros((traces.len(), config.segments, d_out));
    for (i, m) in rows.iter().enumerate() {
        data.index_axis_mut(Axis(0), i).assign(m);
    }
    Ok(FeatureTensor {
        data,
        labels_task: traces.iter().map(SessionTrace::label_code).collect(),
        labels_space: traces
            .iter()
            .map(|t| t.label.map_or(-1, |l| l.space().number()))
            .collect(),
        trace_ids: traces.iter().map(SessionTrace::id).collect(),
        raw_schema: schema.clone(),
        statistics: config.statistics.clone(),
        normalization: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BehaviorFrame, TaskLabel};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn trace_from(rows: Vec<Vec<f64>>) -> SessionTrace {
        SessionTrace {
            participant_id: "p".into(),
            environment: Environment::Desktop,
            trial_index: 0,
            label: Some(TaskLabel::from_code(12).unwrap()),
            frames: rows
                .into_iter()
                .enumerate()
                .map(|(k, values)| BehaviorFrame {
                    timestamp: k as f64 * 0.1,
                    values,
                })
                .collect(),
            sample_rate_hint: 10.0,
        }
    }

    #[test]
    fn uniform_partition_sums() {
        let t = trace_from(vec![vec![1.0, 1.0]; 10]);
        let acc = segment_accumulate(&t, 5);
        assert_eq!(acc, Array2::from_elem((5, 2), 2.0));
    }

    #[test]
    fn short_trace_leaves_empty_segments() {
        // ceil(3k/5) for k = 0..=5 is 0,1,2,2,3,3: segments 2 and 4 are empty.
        let bounds: Vec<usize> = (0..=5).map(|k| segment_start(3, 5, k)).collect();
        assert_eq!(bounds, vec![0, 1, 2, 2, 3, 3]);
        let t = trace_from(vec![vec![1.0], vec![2.0], vec![3.0]]);
        let acc = segment_accumulate(&t, 5);
        let zero_rows = acc.rows().into_iter().filter(|r| r.iter().all(|&v| v == 0.0)).count();
        assert_eq!(zero_rows, 2);
        assert_eq!(acc.column(0).to_vec(), vec![1.0, 2.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn segment_statistics() {
        let stats = [Statistic::Accumulate, Statistic::Mean, Statistic::Std];
        let t = trace_from(vec![vec![1.0], vec![3.0]]);
        let out = segment_stats(&t, 1, &stats);
        assert_eq!(out.row(0).to_vec(), vec![4.0, 2.0, 1.0]);
        let t = trace_from(vec![vec![5.0]; 3]);
        assert_eq!(segment_stats(&t, 1, &stats).row(0).to_vec(), vec![15.0, 5.0, 0.0]);
        let t = trace_from(vec![vec![7.0]]);
        let out = segment_stats(&t, 2, &stats);
        assert_eq!(out.row(0).to_vec(), vec![7.0, 7.0, 0.0]);
        assert_eq!(out.row(1).to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalizer_edges() {
        let mut data = Array3::zeros((2, 1, 2));
        data[[0, 0, 0]] = -2.0;
        data[[1, 0, 0]] = 6.0;
        data[[0, 0, 1]] = 3.0;
        data[[1, 0, 1]] = 3.0;
        let norm = Normalizer::fit(data.view());
        assert_eq!(norm.ranges, vec![(-2.0, 6.0), (3.0, 3.0)]);
        assert_eq!(norm.scale(0, 2.0), 0.5);
        assert_eq!(norm.scale(1, 3.0), 0.0);
        assert_eq!(norm.scale(0, 100.0), 1.0);
        assert_eq!(norm.scale(0, -100.0), 0.0);
    }

    fn desktop_traces(n: usize) -> Vec<SessionTrace> {
        let schema = FeatureSchema::for_environment(Environment::Desktop);
        (0..n)
            .map(|i| {
                let len = 20 + 7 * i;
                let mut t = trace_from(
                    (0..len)
                        .map(|k| {
                            (0..schema.dim())
                                .map(|j| match schema.features[j].kind {
                                    crate::types::FeatureKind::BinaryEvent => ((k + j + i) % 5 == 0) as u8 as f64,
                                    _ => ((k * (j + 1) + i) % 11) as f64 / 11.0,
                                })
                                .collect()
                        })
                        .collect(),
                );
                t.participant_id = format!("p{:02}", i % 4);
                t.trial_index = i as i64;
                t
            })
            .collect()
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let schema = FeatureSchema::for_environment(Environment::Desktop);
        let traces = desktop_traces(20);
        let tensor = build_dataset(&traces, &schema, &TransformConfig::default()).unwrap();
        assert_eq!(tensor.data.dim(), (20, 100, 36));
        assert_eq!(tensor.labels_space, vec![1; 20]);

        let mut shuffled = traces.clone();
        shuffled.reverse();
        shuffled.swap(3, 11);
        shuffled.sort_by(|a, b| (&a.participant_id, a.trial_index).cmp(&(&b.participant_id, b.trial_index)));
        let mut sorted = traces.clone();
        sorted.sort_by(|a, b| (&a.participant_id, a.trial_index).cmp(&(&b.participant_id, b.trial_index)));
        assert_eq!(
            build_dataset(&shuffled, &schema, &TransformConfig::default()).unwrap(),
            build_dataset(&sorted, &schema, &TransformConfig::default()).unwrap()
        );

        let empty = build_dataset(&[], &schema, &TransformConfig::default()).unwrap();
        assert_eq!(empty.data.dim(), (0, 100, 36));
    }

    #[test]
    fn tensor_roundtrip_and_selection() {
        let schema = FeatureSchema::for_environment(Environment::Desktop);
        let tensor = build_dataset(&desktop_traces(4), &schema, &TransformConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        tensor.save(&path).unwrap();
        let back = FeatureTensor::load(&path).unwrap();
        assert_eq!(back.labels_task, tensor.labels_task);
        assert_eq!(back.schema_hash(), tensor.schema_hash());
        for (a, b) in back.data.iter().zip(tensor.data.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5 * b.abs().max(1.0));
        }
        let reduced = tensor.without_group(FeatureGroup::Interaction).unwrap();
        assert_eq!(reduced.raw_schema.dim(), 7);
        assert_eq!(reduced.data.dim().2, 21);
        assert_ne!(reduced.schema_hash(), tensor.schema_hash());
        assert!(matches!(
            tensor.without_group(FeatureGroup::Immersive).map(|t| t.raw_schema.dim()),
            Ok(12)
        ));
    }

    fn arb_frames() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..400, 1usize..5).prop_flat_map(|(t, d)| {
            prop::collection::vec(prop::collection::vec(-50.0f64..50.0, d), t)
        })
    }

    proptest! {
        #[test]
        fn accumulation_conserves_mass(rows in arb_frames(), l in 1usize..120) {
            let d = rows[0].len();
            let m = Array2::from_shape_vec((rows.len(), d), rows.concat()).unwrap();
            let acc = stats_of_rows(&m, l, &[Statistic::Accumulate]);
            for j in 0..d {
                let direct: f64 = m.column(j).sum();
                let total: f64 = acc.column(j).sum();
                let scale = m.column(j).iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
                prop_assert!((direct - total).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn statistics_ignore_order_within_segment(rows in arb_frames(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let l = 7;
            let stats = [Statistic::Accumulate, Statistic::Mean, Statistic::Std];
            let d = rows[0].len();
            let m = Array2::from_shape_vec((rows.len(), d), rows.concat()).unwrap();
            let mut permuted = rows.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for k in 0..l {
                let (a, b) = (segment_start(rows.len(), l, k), segment_start(rows.len(), l, k + 1));
                permuted[a..b].shuffle(&mut rng);
            }
            let p = Array2::from_shape_vec((rows.len(), d), permuted.concat()).unwrap();
            let x = stats_of_rows(&m, l, &stats);
            let y = stats_of_rows(&p, l, &stats);
            for (a, b) in x.iter().zip(y.iter()) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }

        #[test]
        fn normalized_output_in_unit_range(
            train in prop::collection::vec(-1e3f64..1e3, 12),
            test in prop::collection::vec(-1e4f64..1e4, 12),
        ) {
            let train = Array3::from_shape_vec((2, 2, 3), train).unwrap();
            let test = Array3::from_shape_vec((2, 2, 3), test).unwrap();
            let norm = Normalizer::fit(train.view());
            for v in norm.apply(test.view()).unwrap().iter().chain(norm.apply(train.view()).unwrap().iter()) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
