//! Annotating open sessions with growing windows.
//!
//! Window `k` is the prefix ending at frame `e_k`; its prediction labels the
//! span added since window `k - 1`. Spans below the confidence threshold
//! become "uncertain" (code -1) and equal neighbors are merged.

use std::fmt::Write as _;

use ndarray::{s, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::transform::stats_of_rows;
use crate::types::{FeatureKind, FeatureSchema, Scale, SessionTrace};

pub const UNCERTAIN: i32 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotateConfig {
    /// Frames in the first window.
    pub start_len: usize,
    /// Frames added per window; defaults to one second of samples.
    pub step: Option<usize>,
    pub threshold: f64,
    /// Feature drawn over the timeline; defaults to `objPosition.y`, then `mouse.y`.
    pub indicator_feature: Option<String>,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        AnnotateConfig {
            start_len: 100,
            step: None,
            threshold: 0.5,
            indicator_feature: None,
        }
    }
}

/// End frame (exclusive) of every growing window.
pub fn growing_windows(len: usize, start_len: usize, step: usize) -> Result<Vec<usize>> {
    if step == 0 || start_len == 0 {
        return Err(Error::InvalidConfig("window start and step must be at least 1".into()));
    }
    if len < start_len {
        return Err(Error::TraceTooShort {
            length: len,
            required: start_len,
        });
    }
    let mut ends: Vec<usize> = (start_len..len).step_by(step).collect();
    ends.push(len);
    Ok(ends)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSegment {
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub code: i32,
    pub confidence: f64,
    /// Frames covered, used to weight merged confidences.
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineAnnotation {
    pub trace_id: String,
    pub model_id: String,
    pub indicator_feature: String,
    pub segments: Vec<TimelineSegment>,
}

/// Merges neighbors with the same code; confidence becomes the frame-weighted mean.
pub fn merge_segments(segments: &[TimelineSegment]) -> Vec<TimelineSegment> {
    let mut out: Vec<TimelineSegment> = Vec::with_capacity(segments.len());
    for seg in segments {
        match out.last_mut() {
            Some(last) if last.code == seg.code => {
                let frames = last.frames + seg.frames;
                if frames > 0 {
                    last.confidence =
                        (last.confidence * last.frames as f64 + seg.confidence * seg.frames as f64) / frames as f64;
                }
                last.frames = frames;
                last.t_end_s = seg.t_end_s;
            }
            _ => out.push(seg.clone()),
        }
    }
    out
}

fn default_indicator(schema: &FeatureSchema) -> String {
    ["objPosition.y", "mouse.y"]
        .iter()
        .find(|n| schema.index_of(n).is_some())
        .map(|n| n.to_string())
        .or_else(|| {
            schema
                .features
                .iter()
                .find(|f| f.kind == FeatureKind::Continuous)
                .map(|f| f.name.clone())
        })
        .unwrap_or_default()
}

/// Unmerged per-window spans with raw predictions.
pub fn window_spans(trace: &SessionTrace, model: &TrainedModel, config: &AnnotateConfig) -> Result<Vec<TimelineSegment>> {
    if model.meta.scale != Scale::Task {
        return Err(Error::InvalidModel("annotation needs a task-scale model".into()));
    }
    let schema = &model.meta.raw_schema;
    trace.validate(schema)?;
    let step = config
        .step
        .unwrap_or_else(|| (trace.environment.sample_rate().round() as usize).max(1));
    let ends = growing_windows(trace.frames.len(), config.start_len, step)?;

    let rows = Array2::from_shape_fn((trace.frames.len(), schema.dim()), |(t, j)| trace.frames[t].values[j]);
    let tcfg = model.meta.transform_config();
    let windows: Vec<Array2<f64>> = ends
        .par_iter()
        .map(|&e| stats_of_rows(&rows.slice(s![..e, ..]).to_owned(), tcfg.segments, &tcfg.statistics))
        .collect();
    let (l, d) = windows[0].dim();
    let mut block = Array3::zeros((windows.len(), l, d));
    for (i, w) in windows.iter().enumerate() {
        block.index_axis_mut(Axis(0), i).assign(w);
    }
    let preds = model.predict_data(block.view())?;

    let ts = |i: usize| trace.frames[i].timestamp;
    Ok(ends
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            let (start_frame, t_start) = if k == 0 { (0, ts(0)) } else { (ends[k - 1], ts(ends[k - 1] - 1)) };
            let confidence = preds.confidence[k].clamp(0.0, 1.0);
            TimelineSegment {
                t_start_s: t_start,
                t_end_s: ts(e - 1),
                code: if confidence < config.threshold {
                    UNCERTAIN
                } else {
                    preds.labels[k]
                },
                confidence,
                frames: e - start_frame,
            }
        })
        .collect())
}

pub fn annotate(trace: &SessionTrace, model: &TrainedModel, config: &AnnotateConfig) -> Result<TimelineAnnotation> {
    let indicator = match &config.indicator_feature {
        Some(name) => {
            model.meta.raw_schema.require(name)?;
            name.clone()
        }
        None => default_indicator(&model.meta.raw_schema),
    };
    let spans = window_spans(trace, model, config)?;
    Ok(TimelineAnnotation {
        trace_id: trace.id(),
        model_id: model.id()?,
        indicator_feature: indicator,
        segments: merge_segments(&spans),
    })
}

impl TimelineAnnotation {
    /// Code with the largest time overlap with `[t0, t1]` (ties to the smaller code).
    pub fn dominant_code(&self, t0: f64, t1: f64) -> Option<i32> {
        let mut overlap: Vec<(i32, f64)> = Vec::new();
        for seg in &self.segments {
            let o = seg.t_end_s.min(t1) - seg.t_start_s.max(t0);
            if o > 0.0 {
                match overlap.iter_mut().find(|(c, _)| *c == seg.code) {
                    Some(entry) => entry.1 += o,
                    None => overlap.push((seg.code, o)),
                }
            }
        }
        overlap.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        overlap.first().map(|(c, _)| *c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_start_s,t_end_s,code,confidence,frames\n");
        for g in &self.segments {
            let _ = writeln!(s, "{},{},{},{},{}", g.t_start_s, g.t_end_s, g.code, g.confidence, g.frames);
        }
        s
    }

    /// Colored category bands with the indicator feature as a black polyline.
    pub fn to_svg(&self, trace: &SessionTrace, schema: &FeatureSchema) -> String {
        const W: f64 = 960.0;
        const H: f64 = 180.0;
        const BAND: f64 = 140.0;
        let (t0, t1) = match (self.segments.first(), self.segments.last()) {
            (Some(a), Some(b)) => (a.t_start_s, b.t_end_s),
            _ => (0.0, 1.0),
        };
        let span = (t1 - t0).max(1e-9);
        let x = |t: f64| (t - t0) / span * W;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
        );
        for seg in &self.segments {
            let _ = writeln!(
                svg,
                "<rect x=\"{:.2}\" y=\"0\" width=\"{:.2}\" height=\"{BAND}\" fill=\"{}\"><title>{} ({:.2})</title></rect>",
                x(seg.t_start_s),
                (x(seg.t_end_s) - x(seg.t_start_s)).max(0.5),
                category_color(seg.code),
                seg.code,
                seg.confidence
            );
            let _ = writeln!(
                svg,
                "<text x=\"{:.2}\" y=\"{}\" font-size=\"11\" font-family=\"sans-serif\">{}</text>",
                x(seg.t_start_s) + 2.0,
                BAND + 14.0,
                if seg.code == UNCERTAIN { "?".to_string() } else { format!("{:02}", seg.code) }
            );
        }
        if let Some(j) = schema.index_of(&self.indicator_feature) {
            let values: Vec<f64> = trace.frames.iter().map(|f| f.values[j]).collect();
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = (hi - lo).max(1e-12);
            let points: Vec<String> = trace
                .frames
                .iter()
                .zip(&values)
                .map(|(f, v)| format!("{:.2},{:.2}", x(f.timestamp), BAND - 8.0 - (v - lo) / range * (BAND - 16.0)))
                .collect();
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"1\" points=\"{}\"/>",
                points.join(" ")
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"4\" y=\"{}\" font-size=\"11\" font-family=\"sans-serif\">{}</text>",
            H - 6.0,
            self.indicator_feature
        );
        svg.push_str("</svg>\n");
        svg
    }
}

/// Hue by visual space, lightness by task type; gray for uncertain.
fn category_color(code: i32) -> String {
    if code < 0 {
        return "#c8c8c8".to_string();
    }
    let hue = [210.0, 30.0, 120.0, 280.0][(code / 10).clamp(0, 3) as usize];
    let light = 35.0 + 4.5 * (code % 10) as f64;
    format!("hsl({hue:.0},65%,{light:.0}%)")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fit_model, ModelConfig};
    use crate::knn::KnnConfig;
    use crate::synth::{generate, SynthConfig};
    use crate::transform::{build_dataset, TransformConfig};
    use crate::types::{BehaviorFrame, Environment};
    use proptest::prelude::*;

    #[test]
    fn window_enumeration() {
        assert_eq!(growing_windows(100, 100, 30).unwrap(), vec![100]);
        assert_eq!(growing_windows(160, 100, 30).unwrap(), vec![100, 130, 160]);
        assert_eq!(growing_windows(161, 100, 30).unwrap(), vec![100, 130, 160, 161]);
        assert!(matches!(
            growing_windows(99, 100, 30),
            Err(Error::TraceTooShort { length: 99, required: 100 })
        ));
        assert!(growing_windows(200, 100, 0).is_err());
    }

    fn seg(t0: f64, t1: f64, code: i32, confidence: f64, frames: usize) -> TimelineSegment {
        TimelineSegment {
            t_start_s: t0,
            t_end_s: t1,
            code,
            confidence,
            frames,
        }
    }

    #[test]
    fn merging() {
        let merged = merge_segments(&[seg(0.0, 1.0, 5, 0.8, 10), seg(1.0, 2.0, 5, 0.6, 30), seg(2.0, 3.0, 7, 0.9, 5)]);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].t_end_s, 2.0);
        assert!((merged[0].confidence - 0.65).abs() < 1e-12);
        assert_eq!(merge_segments(&merged), merged);
    }

    fn model_and_trace() -> (TrainedModel, SessionTrace) {
        let traces = generate(&SynthConfig::default(), 4, 1, Environment::Desktop).unwrap();
        let schema = FeatureSchema::for_environment(Environment::Desktop);
        let cfg = TransformConfig {
            segments: 20,
            ..TransformConfig::default()
        };
        let tensor = build_dataset(&traces, &schema, &cfg).unwrap();
        let model = fit_model(&tensor, Scale::Task, &ModelConfig::Knn(KnnConfig { k: 3, band: None }), 0).unwrap();
        (model, traces[0].clone())
    }

    #[test]
    fn annotation_covers_trace() {
        let (model, trace) = model_and_trace();
        let config = AnnotateConfig {
            start_len: 20,
            step: Some(7),
            threshold: 0.0,
            ..AnnotateConfig::default()
        };
        let a = annotate(&trace, &model, &config).unwrap();
        assert_eq!(a.indicator_feature, "mouse.y");
        assert_eq!(a.segments.first().unwrap().t_start_s, trace.frames[0].timestamp);
        assert_eq!(a.segments.last().unwrap().t_end_s, trace.frames.last().unwrap().timestamp);
        assert_eq!(a.segments.iter().map(|s| s.frames).sum::<usize>(), trace.frames.len());
        assert_eq!(a, annotate(&trace, &model, &config).unwrap());
        let svg = a.to_svg(&trace, &model.meta.raw_schema);
        assert!(svg.contains("<polyline") && svg.ends_with("</svg>\n"));
        assert_eq!(a.to_csv().lines().count(), a.segments.len() + 1);

        let strict = AnnotateConfig {
            threshold: 1.01,
            ..config
        };
        let u = annotate(&trace, &model, &strict).unwrap();
        assert_eq!(u.segments.len(), 1);
        assert_eq!(u.segments[0].code, UNCERTAIN);
    }

    #[test]
    fn space_models_are_rejected() {
        let (mut model, trace) = model_and_trace();
        model.meta.scale = Scale::Space;
        assert!(matches!(
            annotate(&trace, &model, &AnnotateConfig::default()),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn dominant_code_by_overlap() {
        let a = TimelineAnnotation {
            trace_id: "x".into(),
            model_id: "m".into(),
            indicator_feature: "mouse.y".into(),
            segments: vec![seg(0.0, 2.0, 1, 0.9, 1), seg(2.0, 3.0, 2, 0.9, 1), seg(3.0, 6.0, 1, 0.9, 1)],
        };
        assert_eq!(a.dominant_code(1.5, 3.2), Some(2));
        assert_eq!(a.dominant_code(0.0, 6.0), Some(1));
        assert_eq!(a.dominant_code(7.0, 8.0), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn timeline_invariants(len in 20usize..80, step in 1usize..15, seed in any::<u64>(), threshold in 0.0f64..1.0) {
            let (model, base) = model_and_trace();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let mut t = 0.0;
            let frames: Vec<BehaviorFrame> = (0..len).map(|i| {
                t += rand::Rng::random_range(&mut rng, 0.01..0.3);
                BehaviorFrame { timestamp: t, values: base.frames[i % base.frames.len()].values.clone() }
            }).collect();
            let trace = SessionTrace { frames, label: None, ..base };
            let config = AnnotateConfig { start_len: 20, step: Some(step), threshold, ..AnnotateConfig::default() };
            let a = annotate(&trace, &model, &config).unwrap();
            let segs = &a.segments;
            prop_assert_eq!(segs[0].t_start_s, trace.frames[0].timestamp);
            prop_assert_eq!(segs.last().unwrap().t_end_s, trace.frames.last().unwrap().timestamp);
            for w in segs.windows(2) {
                prop_assert_eq!(w[0].t_end_s, w[1].t_start_s);
                prop_assert!(w[0].code != w[1].code);
            }
            for s in segs {
                prop_assert!(s.t_start_s <= s.t_end_s);
                prop_assert!((0.0..=1.0).contains(&s.confidence));
            }
            prop_assert_eq!(merge_segments(segs), segs.clone());
        }
    }
}
