//! Behavior-log data model: task labels, feature schemas, frames and traces.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Coarse label scale: the visual space a task was performed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Spatial = 0,
    Temporal = 1,
    Combined = 2,
    Interaction = 3,
}

impl Space {
    pub const ALL: [Space; 4] = [
        Space::Spatial,
        Space::Temporal,
        Space::Combined,
        Space::Interaction,
    ];

    pub fn number(self) -> i32 {
        self as i32
    }

    pub fn from_number(n: i32) -> Result<Self> {
        Space::ALL
            .get(usize::try_from(n).map_err(|_| Error::InvalidLabel(format!("space {n}")))?)
            .copied()
            .ok_or_else(|| Error::InvalidLabel(format!("space {n}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Space::Spatial => "spatial",
            Space::Temporal => "temporal",
            Space::Combined => "combined",
            Space::Interaction => "interaction",
        }
    }
}

pub const TASK_TYPE_NAMES: [&str; 10] = [
    "retrieve value",
    "compute derived value",
    "find extremum",
    "sort",
    "determine range",
    "characterize distribution",
    "find anomalies",
    "cluster",
    "correlate",
    "exploration",
];

/// A (space, task type) pair, encoded as `space * 10 + task_type`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskLabel {
    space: Space,
    task_type: u8,
}

impl TaskLabel {
    pub fn new(space: Space, task_type: u8) -> Result<Self> {
        if task_type > 9 {
            return Err(Error::InvalidLabel(format!("task type {task_type}")));
        }
        if space == Space::Combined && task_type == 0 {
            return Err(Error::RemovedCategory(category_number(space, task_type)));
        }
        Ok(TaskLabel { space, task_type })
    }

    pub fn from_code(code: i32) -> Result<Self> {
        if !(0..40).contains(&code) {
            return Err(Error::InvalidLabel(format!("category code {code}")));
        }
        TaskLabel::new(Space::from_number(code / 10)?, (code % 10) as u8)
    }

    pub fn space(self) -> Space {
        self.space
    }

    pub fn task_type(self) -> u8 {
        self.task_type
    }

    pub fn code(self) -> i32 {
        category_number(self.space, self.task_type)
    }

    /// Interaction-space labels appear in raw logs but never in classification data.
    pub fn is_classifiable(self) -> bool {
        self.space != Space::Interaction
    }

    /// Every label of the classification label space, in code order.
    pub fn classification_labels() -> Vec<TaskLabel> {
        [Space::Spatial, Space::Temporal, Space::Combined]
            .into_iter()
            .flat_map(|s| (0..10).filter_map(move |t| TaskLabel::new(s, t).ok()))
            .collect()
    }
}

fn category_number(space: Space, task_type: u8) -> i32 {
    space.number() * 10 + i32::from(task_type)
}

/// Encodes a category code, rejecting the removed combined-space type 0.
pub fn category_code(space: Space, task_type: u8) -> Result<i32> {
    TaskLabel::new(space, task_type).map(TaskLabel::code)
}

impl fmt::Display for TaskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:02} {} / {}",
            self.code(),
            self.space.name(),
            TASK_TYPE_NAMES[self.task_type as usize]
        )
    }
}

/// Which label a classifier predicts: the visual space or the full category code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Space,
    Task,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Space => "space",
            Scale::Task => "task",
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "space" => Ok(Scale::Space),
            "task" => Ok(Scale::Task),
            other => Err(Error::InvalidConfig(format!("unknown scale `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Environment {
    Desktop,
    Immersive,
}

impl Environment {
    pub fn name(self) -> &'static str {
        match self {
            Environment::Desktop => "desktop",
            Environment::Immersive => "immersive",
        }
    }

    /// Nominal sampling rate of the continuous channels.
    pub fn sample_rate(self) -> f64 {
        match self {
            Environment::Desktop => 10.0,
            Environment::Immersive => 30.0,
        }
    }
}

impl std::str::FromStr for Environment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desktop" => Ok(Environment::Desktop),
            "immersive" => Ok(Environment::Immersive),
            other => Err(Error::InvalidConfig(format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureGroup {
    Interaction,
    Selection,
    Immersive,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 3] = [
        FeatureGroup::Interaction,
        FeatureGroup::Selection,
        FeatureGroup::Immersive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::Interaction => "interaction",
            FeatureGroup::Selection => "selection",
            FeatureGroup::Immersive => "immersive",
        }
    }
}

impl std::str::FromStr for FeatureGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureGroup::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown feature group `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    BinaryEvent,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub group: FeatureGroup,
    pub kind: FeatureKind,
    pub environments: BTreeSet<Environment>,
}

pub const SCHEMA_VERSION: u32 = 1;

/// Ordered feature list for one environment. Order is the column order everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: u32,
    pub environment: Environment,
    pub features: Vec<FeatureSpec>,
}

const SHARED_FEATURES: &[(&str, FeatureGroup, FeatureKind)] = &[
    ("selected_state.id", FeatureGroup::Selection, FeatureKind::Continuous),
    ("selected_state.x", FeatureGroup::Selection, FeatureKind::Continuous),
    ("selected_state.y", FeatureGroup::Selection, FeatureKind::Continuous),
    ("linechart.slot0", FeatureGroup::Selection, FeatureKind::Continuous),
    ("linechart.slot1", FeatureGroup::Selection, FeatureKind::Continuous),
    ("linechart.slot2", FeatureGroup::Selection, FeatureKind::Continuous),
    ("linechart.slot3", FeatureGroup::Selection, FeatureKind::Continuous),
];

const DESKTOP_INTERACTION: &[(&str, FeatureKind)] = &[
    ("click", FeatureKind::BinaryEvent),
    ("attribute_switch", FeatureKind::BinaryEvent),
    ("time_slider.value", FeatureKind::Continuous),
    ("mouse.x", FeatureKind::Continuous),
    ("mouse.y", FeatureKind::Continuous),
];

const IMMERSIVE_INTERACTION: &[(&str, FeatureKind)] = &[
    ("tap", FeatureKind::BinaryEvent),
    ("gaze_select", FeatureKind::BinaryEvent),
    ("voice_command", FeatureKind::BinaryEvent),
    ("attribute_switch", FeatureKind::BinaryEvent),
    ("time_slider_change", FeatureKind::BinaryEvent),
    ("deselect", FeatureKind::BinaryEvent),
    ("clear", FeatureKind::BinaryEvent),
    ("target.choropleth", FeatureKind::BinaryEvent),
    ("target.linechart", FeatureKind::BinaryEvent),
    ("target.panel", FeatureKind::BinaryEvent),
    ("time_slider.value", FeatureKind::Continuous),
    ("hand.x", FeatureKind::Continuous),
    ("hand.y", FeatureKind::Continuous),
    ("hand.z", FeatureKind::Continuous),
    ("gaze.x", FeatureKind::Continuous),
    ("gaze.y", FeatureKind::Continuous),
    ("gaze.z", FeatureKind::Continuous),
];

/// The twelve headset-only features.
pub const IMMERSIVE_FEATURES: [&str; 12] = [
    "objPosition.x",
    "objPosition.y",
    "objPosition.z",
    "position.x",
    "position.y",
    "position.z",
    "forward.x",
    "forward.y",
    "forward.z",
    "up.x",
    "up.y",
    "up.z",
];

impl FeatureSchema {
    pub fn for_environment(environment: Environment) -> Self {
        let both: BTreeSet<_> = [Environment::Desktop, Environment::Immersive].into();
        let only = |e: Environment| -> BTreeSet<Environment> { [e].into() };
        let mut features = Vec::new();
        let interaction = match environment {
            Environment::Desktop => DESKTOP_INTERACTION,
            Environment::Immersive => IMMERSIVE_INTERACTION,
        };
        for &(name, kind) in interaction {
            let shared = DESKTOP_INTERACTION.iter().any(|(n, _)| *n == name)
                && IMMERSIVE_INTERACTION.iter().any(|(n, _)| *n == name);
            features.push(FeatureSpec {
                name: name.to_string(),
                group: FeatureGroup::Interaction,
                kind,
                environments: if shared { both.clone() } else { only(environment) },
            });
        }
        for &(name, group, kind) in SHARED_FEATURES {
            features.push(FeatureSpec {
                name: name.to_string(),
                group,
                kind,
                environments: both.clone(),
            });
        }
        if environment == Environment::Immersive {
            for name in IMMERSIVE_FEATURES {
                features.push(FeatureSpec {
                    name: name.to_string(),
                    group: FeatureGroup::Immersive,
                    kind: FeatureKind::Continuous,
                    environments: only(Environment::Immersive),
                });
            }
        }
        FeatureSchema {
            version: SCHEMA_VERSION,
            environment,
            features,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    pub fn indices_in_group(&self, group: FeatureGroup) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.group == group)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn without_group(&self, group: FeatureGroup) -> FeatureSchema {
        FeatureSchema {
            features: self
                .features
                .iter()
                .filter(|f| f.group != group)
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    /// Stable fingerprint of the ordered (name, group, kind) list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.features {
            h.update(format!("{}|{}|{:?}\n", f.name, f.group.name(), f.kind));
        }
        hex_digest(h)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    /// Checks one frame's value vector against the schema.
    pub fn validate_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: values.len(),
            });
        }
        for (spec, &v) in self.features.iter().zip(values) {
            if !v.is_finite() {
                return Err(Error::InvalidFrame(format!("{} is not finite", spec.name)));
            }
            if spec.kind == FeatureKind::BinaryEvent && v != 0.0 && v != 1.0 {
                return Err(Error::InvalidFrame(format!(
                    "binary event {} has value {v}",
                    spec.name
                )));
            }
        }
        for prefix in ["forward", "up"] {
            let idx: Option<Vec<usize>> = ["x", "y", "z"]
                .iter()
                .map(|axis| self.index_of(&format!("{prefix}.{axis}")))
                .collect();
            if let Some(idx) = idx {
                let norm = idx.iter().map(|&i| values[i] * values[i]).sum::<f64>().sqrt();
                if norm != 0.0 && (norm - 1.0).abs() > 0.01 {
                    return Err(Error::InvalidFrame(format!(
                        "{prefix} vector has norm {norm:.4}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One timestamped sample of every schema feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorFrame {
    /// Seconds relative to the start of the trace.
    pub timestamp: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub participant_id: String,
    pub environment: Environment,
    pub trial_index: i64,
    pub label: Option<TaskLabel>,
    pub frames: Vec<BehaviorFrame>,
    pub sample_rate_hint: f64,
}

impl SessionTrace {
    pub fn id(&self) -> String {
        format!("{}/{}", self.participant_id, self.trial_index)
    }

    pub fn duration(&self) -> f64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0.0,
        }
    }

    pub fn label_code(&self) -> i32 {
        self.label.map_or(-1, TaskLabel::code)
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::EmptyTrial(self.id()));
        }
        let mut previous = f64::NEG_INFINITY;
        for (k, frame) in self.frames.iter().enumerate() {
            if frame.timestamp < previous {
                return Err(Error::NonMonotonicTime {
                    line: k as u64,
                    trial: self.id(),
                    previous,
                    time: frame.timestamp,
                });
            }
            previous = frame.timestamp;
            schema.validate_values(&frame.values)?;
        }
        Ok(())
    }
}

// Label codes travel as plain integers in every file format.
impl Serialize for TaskLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i32(self.code())
    }
}

impl<'de> Deserialize<'de> for TaskLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let code = i32::deserialize(d)?;
        TaskLabel::from_code(code).map_err(serde::de::Error::custom)
    }
}
