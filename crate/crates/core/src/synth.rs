//! Seeded synthetic sessions: one archetype per task category, modeled as
//! dwell segments over the visualization regions punctuated by Poisson
//! interaction events.
//!
//! Each dwell picks a region (choropleth, line chart or control panel) by the
//! archetype's weights and a focus point inside it. The head does a damped
//! random walk toward a standing spot in front of the focus while the eyes
//! hop between fixations scattered around it. A selection moves `objPosition`
//! to the fixated point, where it stays until a deselect or clear; the hand
//! reaches for it during a short hold. Every trace draws from its own
//! derived seed, so output does not depend on how generation is scheduled.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::types::{
    BehaviorFrame, Environment, FeatureGroup, FeatureKind, FeatureSchema, FeatureSpec, SessionTrace, Space,
    TaskLabel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Choropleth,
    Linechart,
    Panel,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Choropleth, Region::Linechart, Region::Panel];
}

/// Axis-aligned box given by center and half extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub center: [f64; 3],
    pub half: [f64; 3],
}

impl RegionBox {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= self.half[a] + 1e-12)
    }

    /// In-plane horizontal, in-plane vertical and depth axes. A box thinner in
    /// y than in z lies flat, like a map on a table.
    fn axes(&self) -> [usize; 3] {
        if self.half[1] >= self.half[2] {
            [0, 1, 2]
        } else {
            [0, 2, 1]
        }
    }

    /// Point at `offset` (half-extent units along `axes()`) from the center.
    fn at(&self, offset: [f64; 3]) -> [f64; 3] {
        let mut p = self.center;
        for (o, a) in offset.iter().zip(self.axes()) {
            p[a] += o.clamp(-0.98, 0.98) * self.half[a];
        }
        p
    }

    /// Normalized in-plane coordinates in [0, 1].
    fn uv(&self, p: [f64; 3]) -> (f64, f64) {
        let [a, b, _] = self.axes();
        let u = (p[a] - self.center[a] + self.half[a]) / (2.0 * self.half[a]);
        let v = (p[b] - self.center[b] + self.half[b]) / (2.0 * self.half[b]);
        (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0))
    }
}

/// Where the views sit: world boxes (meters) for the headset, screen boxes
/// (unit square, z unused) for the desktop. The headset map lies on a table;
/// the line charts and panel stand upright.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewLayout {
    pub world: BTreeMap<Region, RegionBox>,
    pub screen: BTreeMap<Region, RegionBox>,
}

impl Default for ViewLayout {
    fn default() -> Self {
        let b = |c: [f64; 3], h: [f64; 3]| RegionBox { center: c, half: h };
        ViewLayout {
            world: [
                (Region::Choropleth, b([-0.9, 0.8, 1.2], [0.4, 0.02, 0.3])),
                (Region::Linechart, b([0.8, 1.6, 2.2], [0.4, 0.3, 0.05])),
                (Region::Panel, b([0.0, 0.6, 1.0], [0.3, 0.15, 0.05])),
            ]
            .into(),
            screen: [
                (Region::Choropleth, b([0.25, 0.5, 0.0], [0.2, 0.3, 0.0])),
                (Region::Linechart, b([0.75, 0.5, 0.0], [0.2, 0.3, 0.0])),
                (Region::Panel, b([0.5, 0.9, 0.0], [0.2, 0.07, 0.0])),
            ]
            .into(),
        }
    }
}

/// Event rates in events per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventRates {
    /// Selections while dwelling on the map or chart.
    pub select: f64,
    /// Panel operations while dwelling on the panel.
    pub attribute_switch: f64,
    pub time_slider: f64,
    pub voice: f64,
    pub deselect: f64,
    pub clear: f64,
}

impl Default for EventRates {
    fn default() -> Self {
        EventRates {
            select: 0.6,
            attribute_switch: 0.3,
            time_slider: 0.4,
            voice: 0.1,
            deselect: 0.05,
            clear: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchetypeConfig {
    pub category_code: i32,
    pub duration_s: [f64; 2],
    /// Relative dwell weight per region.
    pub dwell: BTreeMap<Region, f64>,
    /// Dwell segment length range.
    pub dwell_s: [f64; 2],
    /// Preferred point inside the dwelled region, in half-extent units.
    pub focus: [f64; 2],
    pub rates: EventRates,
    /// Where the time slider drifts to.
    pub slider_target: f64,
    /// Preferred state id for line-chart slots, in [0, 1].
    pub state_preference: f64,
    /// Multiplies every positional and orientational jitter.
    pub noise: f64,
    /// Visit regions in a fixed map, panel, chart, panel cycle instead of at
    /// random. The trace then spans `SEQUENCE_CYCLES` cycles, with visit
    /// lengths set by the dwell weights (`dwell_s` is unused).
    pub sequential: bool,
}

impl Default for ArchetypeConfig {
    fn default() -> Self {
        ArchetypeConfig {
            category_code: 9,
            duration_s: [6.0, 10.0],
            dwell: [(Region::Choropleth, 1.0), (Region::Linechart, 1.0), (Region::Panel, 1.0)].into(),
            dwell_s: [1.0, 3.0],
            focus: [0.0, 0.0],
            rates: EventRates::default(),
            slider_target: 0.5,
            state_preference: 0.5,
            noise: 1.0,
            sequential: false,
        }
    }
}

impl ArchetypeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        TaskLabel::from_code(self.category_code)?;
        let [lo, hi] = self.duration_s;
        if !(2.0..=300.0).contains(&lo) || !(lo..=300.0).contains(&hi) {
            return bad(format!("duration range [{lo}, {hi}] outside [2, 300] s"));
        }
        let r = &self.rates;
        let rates = [r.select, r.attribute_switch, r.time_slider, r.voice, r.deselect, r.clear];
        if rates.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("event rates must be finite and nonnegative".into());
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise level must be nonnegative".into());
        }
        if self.dwell.values().any(|w| !(*w >= 0.0)) || self.dwell.values().sum::<f64>() <= 0.0 {
            return bad("dwell weights must be nonnegative with a positive sum".into());
        }
        if !(self.dwell_s[0] > 0.0) || self.dwell_s[1] < self.dwell_s[0] {
            return bad("dwell length range must be positive".into());
        }
        Ok(())
    }

    fn space(&self) -> Space {
        TaskLabel::from_code(self.category_code)
            .map(|l| l.space())
            .unwrap_or(Space::Combined)
    }

    /// The class-independent process used for features outside the signal scope.
    fn neutral() -> Self {
        ArchetypeConfig::default()
    }
}

/// Which feature groups depend on the class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalScope {
    #[default]
    All,
    /// Interaction and selection features come from one neutral process for
    /// every class, and so does the trace length; only headset features carry
    /// the archetype.
    ImmersiveOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Spaces3,
    Tasks30,
    Openmix,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spaces3" => Ok(Preset::Spaces3),
            "tasks30" => Ok(Preset::Tasks30),
            "openmix" => Ok(Preset::Openmix),
            other => Err(Error::InvalidConfig(format!("unknown preset '{other}'"))),
        }
    }
}

fn space_dwell(space: Space) -> BTreeMap<Region, f64> {
    match space {
        Space::Spatial => [(Region::Choropleth, 0.85), (Region::Panel, 0.15)].into(),
        Space::Temporal => [(Region::Linechart, 0.85), (Region::Panel, 0.15)].into(),
        _ => [(Region::Choropleth, 0.35), (Region::Linechart, 0.35), (Region::Panel, 0.30)].into(),
    }
}

/// Combined tasks take more effort: longer sessions and busier panel use
/// (several attributes and time ranges).
fn combined_effort(mut a: ArchetypeConfig) -> ArchetypeConfig {
    if a.space() == Space::Combined {
        a.duration_s = a.duration_s.map(|d| (2.0 * d).min(300.0));
        a.rates.attribute_switch *= 2.0;
        a.rates.time_slider *= 2.0;
        a.sequential = true;
    }
    a
}

/// One archetype per visual space (codes 09, 19, 29).
pub fn spaces3() -> Vec<ArchetypeConfig> {
    [Space::Spatial, Space::Temporal, Space::Combined]
        .into_iter()
        .map(|space| {
            combined_effort(ArchetypeConfig {
                category_code: space.number() * 10 + 9,
                dwell: space_dwell(space),
                ..ArchetypeConfig::default()
            })
        })
        .collect()
}

/// One archetype per classifiable category, with per-type cadence tweaks.
pub fn tasks30() -> Vec<ArchetypeConfig> {
    TaskLabel::classification_labels()
        .into_iter()
        .map(|label| {
            let t = label.task_type() as f64;
            let space = label.space();
            combined_effort(ArchetypeConfig {
                category_code: label.code(),
                duration_s: [5.0 + t, 12.0 + 2.0 * t],
                dwell: space_dwell(space),
                dwell_s: [1.0, 3.0],
                focus: [
                    ((t as usize % 5) as f64 / 4.0 - 0.5) * 1.6,
                    ((t as usize / 5) as f64 - 0.5) * 1.2,
                ],
                rates: EventRates {
                    select: 0.3 + 0.12 * t,
                    attribute_switch: 0.05 + 0.04 * (9.0 - t),
                    time_slider: 0.1 + 0.05 * t,
                    ..EventRates::default()
                },
                slider_target: t / 9.0,
                state_preference: t / 9.0,
                noise: 1.0,
                sequential: false,
            })
        })
        .collect()
}

pub fn preset_archetypes(preset: Preset) -> Vec<ArchetypeConfig> {
    match preset {
        Preset::Spaces3 => spaces3(),
        Preset::Tasks30 | Preset::Openmix => tasks30(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub archetypes: Vec<ArchetypeConfig>,
    pub layout: ViewLayout,
    pub scope: SignalScope,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            archetypes: spaces3(),
            layout: ViewLayout::default(),
            scope: SignalScope::All,
        }
    }
}

impl SynthConfig {
    pub fn preset(preset: Preset) -> Self {
        SynthConfig {
            archetypes: preset_archetypes(preset),
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.archetypes.is_empty() {
            return Err(Error::InvalidConfig("no archetypes".into()));
        }
        for a in &self.archetypes {
            a.validate()?;
        }
        for map in [&self.layout.world, &self.layout.screen] {
            if Region::ALL.iter().any(|r| !map.contains_key(r)) {
                return Err(Error::InvalidConfig("layout must define every region".into()));
            }
        }
        Ok(())
    }
}

/// Column positions of the generated features (absent ones are `None`).
struct Columns {
    idx: BTreeMap<&'static str, usize>,
}

const GENERATED: &[&str] = &[
    "tap", "gaze_select", "click", "voice_command", "attribute_switch", "time_slider_change", "deselect", "clear",
    "target.choropleth", "target.linechart", "target.panel", "time_slider.value", "hand.x", "hand.y", "hand.z",
    "gaze.x", "gaze.y", "gaze.z", "mouse.x", "mouse.y", "selected_state.id", "selected_state.x",
    "selected_state.y", "linechart.slot0", "linechart.slot1", "linechart.slot2", "linechart.slot3",
    "objPosition.x", "objPosition.y", "objPosition.z", "position.x", "position.y", "position.z", "forward.x",
    "forward.y", "forward.z", "up.x", "up.y", "up.z",
];

impl Columns {
    fn new(schema: &FeatureSchema) -> Self {
        Columns {
            idx: GENERATED
                .iter()
                .filter_map(|&n| schema.index_of(n).map(|i| (n, i)))
                .collect(),
        }
    }

    fn set(&self, values: &mut [f64], name: &str, v: f64) {
        if let Some(&i) = self.idx.get(name) {
            values[i] = v;
        }
    }

    fn set3(&self, values: &mut [f64], prefix: &str, v: [f64; 3]) {
        for (axis, x) in ["x", "y", "z"].iter().zip(v) {
            self.set(values, &format!("{prefix}.{axis}"), x);
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        [0.0, 0.0, 1.0]
    } else {
        v.map(|x| x / n)
    }
}

fn pick_region(rng: &mut ChaCha8Rng, weights: &BTreeMap<Region, f64>) -> Region {
    let total: f64 = weights.values().sum();
    let mut u = rng.random_range(0.0..total);
    for (&r, &w) in weights {
        if u < w {
            return r;
        }
        u -= w;
    }
    *weights.keys().last().expect("nonempty weights")
}

pub const SEQUENCE_CYCLES: usize = 3;

/// Gaze fixations per second while dwelling.
const FIXATION_RATE: f64 = 2.0;
/// Spread of fixations around the dwell focus, in half-extent units.
const FIXATION_SPREAD: f64 = 0.4;

const CYCLE: [Region; 4] = [Region::Choropleth, Region::Panel, Region::Linechart, Region::Panel];

/// Next region of the fixed cycle with positive weight, and its length factor.
fn next_in_cycle(step: &mut usize, weights: &BTreeMap<Region, f64>) -> (Region, f64) {
    let mean = weights.values().sum::<f64>() / weights.len() as f64;
    for _ in 0..CYCLE.len() {
        let r = CYCLE[*step % CYCLE.len()];
        *step += 1;
        match weights.get(&r) {
            Some(&w) if w > 0.0 => {
                // The panel comes up twice per cycle.
                let visits = if r == Region::Panel { 2.0 } else { 1.0 };
                return (r, w / mean / visits);
            }
            _ => {}
        }
    }
    unreachable!("validated weights have a positive entry")
}

/// Simulates `frames` samples of one archetype into value rows.
fn simulate(
    arch: &ArchetypeConfig,
    frames: usize,
    rate: f64,
    layout: &ViewLayout,
    env: Environment,
    cols: &Columns,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let sigma = arch.noise;
    let boxes = match env {
        Environment::Immersive => &layout.world,
        Environment::Desktop => &layout.screen,
    };
    let p_event = |r: f64| (r / rate).min(1.0);

    let mut rows = Vec::with_capacity(frames);
    let mut region = Region::Panel;
    let mut target = [0.0; 3];
    // Dwell focus and current fixation in the region's plane, half-extent units.
    let mut aim = [0.0; 2];
    let mut fix = [0.0; 2];
    let mut look = [0.0; 3];
    let mut dwell_left = 0usize;
    let mut hold_left = 0usize;
    let mut obj = [0.0; 3];
    let mut pos = [0.0, 1.6, 0.0];
    let mut mouse = [0.5, 0.5];
    let mut slider = 0.5;
    let mut sel = [0.0; 3];
    let mut slots = [0.0; 4];
    let mut slot_next = 0usize;
    let mut cycle_step = 0usize;

    for _ in 0..frames {
        let mut v = vec![0.0; dim];
        if dwell_left == 0 {
            let factor;
            (region, factor) = if arch.sequential {
                next_in_cycle(&mut cycle_step, &arch.dwell)
            } else {
                (pick_region(rng, &arch.dwell), 1.0)
            };
            let b = boxes[&region];
            let jitter = 0.35 * sigma.min(2.0);
            aim = [
                arch.focus[0] + rng.random_range(-jitter..=jitter),
                arch.focus[1] + rng.random_range(-jitter..=jitter),
            ];
            target = b.at([aim[0], aim[1], 0.0]);
            fix = aim;
            look = target;
            let len = if arch.sequential {
                let per_visit = frames as f64 / (SEQUENCE_CYCLES * CYCLE.len()) as f64;
                factor * per_visit * rng.random_range(0.8..=1.2)
            } else {
                factor * rng.random_range(arch.dwell_s[0]..=arch.dwell_s[1]) * rate
            };
            dwell_left = (len.round() as usize).max(1);
        }
        dwell_left -= 1;
        let b = boxes[&region];
        // The eyes hop between items around the dwell focus.
        if rng.random_bool(p_event(FIXATION_RATE)) {
            fix = [aim[0] + FIXATION_SPREAD * normal(rng), aim[1] + FIXATION_SPREAD * normal(rng)];
            look = b.at([fix[0], fix[1], 0.0]);
        }

        // Events.
        let mut selected = false;
        if region != Region::Panel && rng.random_bool(p_event(arch.rates.select)) {
            selected = true;
            // Users select what they are looking at.
            obj = b.at([
                fix[0] + 0.05 * sigma * normal(rng),
                fix[1] + 0.05 * sigma * normal(rng),
                0.5 * normal(rng),
            ]);
            hold_left = ((rng.random_range(0.5..1.5) * rate).round() as usize).max(1);
            match env {
                Environment::Immersive => {
                    let name = if rng.random_bool(0.5) { "tap" } else { "gaze_select" };
                    cols.set(&mut v, name, 1.0);
                }
                Environment::Desktop => cols.set(&mut v, "click", 1.0),
            }
            let flag = if region == Region::Choropleth { "target.choropleth" } else { "target.linechart" };
            cols.set(&mut v, flag, 1.0);
            let (u, w) = b.uv(obj);
            if region == Region::Choropleth {
                let cell = (u * 9.999).floor() + 10.0 * (w * 4.999).floor();
                sel = [cell / 49.0, u, w];
            } else {
                slots[slot_next % 4] = (arch.state_preference + 0.1 * sigma * normal(rng)).clamp(0.0, 1.0);
                slot_next += 1;
            }
        }
        if region == Region::Panel {
            let mut panel_event = false;
            if rng.random_bool(p_event(arch.rates.attribute_switch)) {
                cols.set(&mut v, "attribute_switch", 1.0);
                panel_event = true;
            }
            if rng.random_bool(p_event(arch.rates.time_slider)) {
                cols.set(&mut v, "time_slider_change", 1.0);
                slider = (slider + 0.5 * (arch.slider_target - slider) + 0.05 * sigma * normal(rng)).clamp(0.0, 1.0);
                panel_event = true;
            }
            if env == Environment::Immersive && rng.random_bool(p_event(arch.rates.voice)) {
                cols.set(&mut v, "voice_command", 1.0);
                panel_event = true;
            }
            if panel_event {
                cols.set(&mut v, "target.panel", 1.0);
            }
        }
        if !selected && rng.random_bool(p_event(arch.rates.deselect)) {
            cols.set(&mut v, "deselect", 1.0);
            sel = [0.0; 3];
            obj = [0.0; 3];
        }
        if rng.random_bool(p_event(arch.rates.clear)) {
            cols.set(&mut v, "clear", 1.0);
            slots = [0.0; 4];
            obj = [0.0; 3];
        }

        cols.set(&mut v, "time_slider.value", slider);
        cols.set(&mut v, "selected_state.id", sel[0]);
        cols.set(&mut v, "selected_state.x", sel[1]);
        cols.set(&mut v, "selected_state.y", sel[2]);
        for (k, s) in slots.iter().enumerate() {
            cols.set(&mut v, &format!("linechart.slot{k}"), *s);
        }

        match env {
            Environment::Immersive => {
                // Users lean toward the height of what they look at.
                let anchor = [0.4 * target[0], 1.6 + 0.3 * (target[1] - 1.3), target[2] - 1.3];
                for a in 0..3 {
                    pos[a] += 0.05 * (anchor[a] - pos[a]) + 0.004 * sigma * normal(rng);
                }
                let forward = normalize([0, 1, 2].map(|a| look[a] - pos[a] + 0.03 * sigma * normal(rng)));
                let dot = forward[1];
                let up = normalize([-dot * forward[0], 1.0 - dot * forward[1], -dot * forward[2]]);
                let gaze = [0, 1, 2].map(|a| look[a] + 0.02 * sigma * normal(rng));
                let hand = if hold_left > 0 {
                    [0, 1, 2].map(|a| pos[a] + 0.6 * (obj[a] - pos[a]) + 0.01 * sigma * normal(rng))
                } else {
                    [pos[0] + 0.2, pos[1] - 0.5, pos[2] + 0.25]
                };
                cols.set3(&mut v, "position", pos);
                cols.set3(&mut v, "forward", forward);
                cols.set3(&mut v, "up", up);
                cols.set3(&mut v, "gaze", gaze);
                cols.set3(&mut v, "hand", hand);
                // The last object interacted with, kept until released.
                cols.set3(&mut v, "objPosition", obj);
            }
            Environment::Desktop => {
                for a in 0..2 {
                    mouse[a] = (mouse[a] + 0.3 * (look[a] - mouse[a]) + 0.01 * sigma * normal(rng)).clamp(0.0, 1.0);
                }
                cols.set(&mut v, "mouse.x", mouse[0]);
                cols.set(&mut v, "mouse.y", mouse[1]);
            }
        }
        hold_left = hold_left.saturating_sub(1);
        rows.push(v);
    }
    rows
}

/// Value rows of one segment of `arch`, honoring the signal scope.
fn segment_rows(
    config: &SynthConfig,
    arch: &ArchetypeConfig,
    schema: &FeatureSchema,
    seed: u64,
) -> Vec<Vec<f64>> {
    let env = schema.environment;
    let rate = env.sample_rate();
    let cols = Columns::new(schema);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Length shows in every feature's accumulated columns, so it may only
    // depend on the class when every group does.
    let [lo, hi] = match config.scope {
        SignalScope::All => arch.duration_s,
        SignalScope::ImmersiveOnly => ArchetypeConfig::neutral().duration_s,
    };
    let duration = rng.random_range(lo..=hi);
    let frames = ((duration * rate).round() as usize).max(1);
    let mut rows = simulate(arch, frames, rate, &config.layout, env, &cols, schema.dim(), &mut rng);
    if config.scope == SignalScope::ImmersiveOnly {
        let mut neutral_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let neutral = simulate(
            &ArchetypeConfig::neutral(),
            frames,
            rate,
            &config.layout,
            env,
            &cols,
            schema.dim(),
            &mut neutral_rng,
        );
        let keep = schema.indices_in_group(FeatureGroup::Immersive);
        for (row, n) in rows.iter_mut().zip(neutral) {
            let mut merged = n;
            for &i in &keep {
                merged[i] = row[i];
            }
            *row = merged;
        }
    }
    rows
}

fn to_frames(rows: Vec<Vec<f64>>, rate: f64, offset: usize) -> Vec<BehaviorFrame> {
    rows.into_iter()
        .enumerate()
        .map(|(k, values)| BehaviorFrame {
            timestamp: (offset + k) as f64 / rate,
            values,
        })
        .collect()
}

/// `n_per_class` traces per archetype. Participant `S{j}` is the replicate,
/// the trial index is the archetype's position in the config.
pub fn generate(config: &SynthConfig, n_per_class: usize, seed: u64, environment: Environment) -> Result<Vec<SessionTrace>> {
    config.validate()?;
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be at least 1".into()));
    }
    let schema = FeatureSchema::for_environment(environment);
    let jobs: Vec<(usize, usize)> = (0..config.archetypes.len())
        .flat_map(|c| (0..n_per_class).map(move |j| (c, j)))
        .collect();
    Ok(jobs
        .par_iter()
        .map(|&(c, j)| {
            let arch = &config.archetypes[c];
            let trace_seed = derive_seed(derive_seed(seed, c as u64), j as u64);
            let rows = segment_rows(config, arch, &schema, trace_seed);
            SessionTrace {
                participant_id: format!("S{j}"),
                environment,
                trial_index: c as i64,
                label: Some(TaskLabel::from_code(arch.category_code).expect("validated")),
                frames: to_frames(rows, environment.sample_rate(), 0),
                sample_rate_hint: environment.sample_rate(),
            }
        })
        .collect())
}

/// Ground-truth span of one archetype inside an open trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSegment {
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub category_code: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenTrace {
    pub trace: SessionTrace,
    pub truth: Vec<TruthSegment>,
}

/// Unlabeled traces concatenating a spatial, a temporal and a combined
/// archetype (random task types, in that order).
pub fn generate_openmix(config: &SynthConfig, n_traces: usize, seed: u64, environment: Environment) -> Result<Vec<OpenTrace>> {
    config.validate()?;
    let schema = FeatureSchema::for_environment(environment);
    let rate = environment.sample_rate();
    let by_space = |s: Space| -> Vec<&ArchetypeConfig> {
        config.archetypes.iter().filter(|a| a.space() == s).collect()
    };
    let pools = [by_space(Space::Spatial), by_space(Space::Temporal), by_space(Space::Combined)];
    if pools.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig("openmix needs archetypes in every visual space".into()));
    }
    Ok((0..n_traces)
        .into_par_iter()
        .map(|i| {
            let trace_seed = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(trace_seed);
            let mut frames = Vec::new();
            let mut truth = Vec::new();
            for (s, pool) in pools.iter().enumerate() {
                let arch = pool[rng.random_range(0..pool.len())];
                let rows = segment_rows(config, arch, &schema, derive_seed(trace_seed, 10 + s as u64));
                let start = frames.len();
                frames.extend(to_frames(rows, rate, start));
                truth.push(TruthSegment {
                    t_start_s: start as f64 / rate,
                    t_end_s: (frames.len() - 1) as f64 / rate,
                    category_code: arch.category_code,
                });
            }
            OpenTrace {
                trace: SessionTrace {
                    participant_id: format!("O{i}"),
                    environment,
                    trial_index: 0,
                    label: None,
                    frames,
                    sample_rate_hint: rate,
                },
                truth,
            }
        })
        .collect())
}

/// Appends an i.i.d. uniform[0, 1] feature to every frame and the schema.
pub fn inject_noise_feature(
    traces: &[SessionTrace],
    schema: &FeatureSchema,
    name: &str,
    group: FeatureGroup,
    seed: u64,
) -> Result<(Vec<SessionTrace>, FeatureSchema)> {
    if schema.index_of(name).is_some() {
        return Err(Error::DuplicateFeature(name.to_string()));
    }
    let mut extended = schema.clone();
    extended.features.push(FeatureSpec {
        name: name.to_string(),
        group,
        kind: FeatureKind::Continuous,
        environments: [schema.environment].into(),
    });
    let out = traces
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mut t = t.clone();
            for f in &mut t.frames {
                f.values.push(rng.random());
            }
            t
        })
        .collect();
    Ok((out, extended))
}
