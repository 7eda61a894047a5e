//! Procedural humanoids, closed-form motions and templated prompts.
//!
//! Joint angles depend only on the motion parameters, and root speed scales
//! with leg length. Rendering the same [`MotionParams`] on a different
//! skeleton of the same topology therefore gives that skeleton's
//! ground-truth retarget.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ContactConfig, ContactPoint, FeatureCodec, FeatureLayout};
use crate::kinematics::{axis_angle, forward_kinematics_full, yaw_matrix, MotionClip, Rot, Skeleton, Topology, Vec3};
use crate::numerics::Tensor;

pub const PROMPT_LEN: usize = 16;
pub const PAD: u32 = 0;
pub const DEFAULT_FPS: f64 = 30.0;

/// Built-in humanoid topologies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonPreset {
    /// 16 joints: hips, spine, chest, head, 3-joint arms and legs.
    Humanoid16,
    /// 24 joints with the SMPL joint set, in depth-first order.
    Humanoid24,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Chain {
    None,
    Arms,
    Legs,
    Spine,
    Neck,
}

/// Joint roles used to drive the closed-form motions.
#[derive(Clone, Debug, PartialEq)]
struct Rig {
    hip: [usize; 2],
    knee: [usize; 2],
    ankle: [usize; 2],
    shoulder: [usize; 2],
    elbow: [usize; 2],
    spine: Vec<usize>,
}

struct PresetDef {
    names: &'static [&'static str],
    parents: &'static [i64],
    offsets: &'static [[f64; 3]],
    chains: &'static [Chain],
    rig: fn() -> Rig,
    /// (joint, forward offset) for left heel, left toe, right heel, right toe
    contacts: [(usize, f64); 4],
}

use Chain::{Arms, Legs, Neck, Spine};
const NO: Chain = Chain::None;

const H16: PresetDef = PresetDef {
    names: &[
        "hips", "spine", "chest", "head", "l_upperarm", "l_forearm", "l_hand", "r_upperarm", "r_forearm",
        "r_hand", "l_thigh", "l_shin", "l_foot", "r_thigh", "r_shin", "r_foot",
    ],
    parents: &[-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14],
    offsets: &[
        [0.0, 0.92, 0.0],
        [0.0, 0.12, 0.0],
        [0.0, 0.22, 0.0],
        [0.0, 0.30, 0.0],
        [0.18, 0.18, 0.0],
        [0.28, 0.0, 0.0],
        [0.25, 0.0, 0.0],
        [-0.18, 0.18, 0.0],
        [-0.28, 0.0, 0.0],
        [-0.25, 0.0, 0.0],
        [0.10, -0.05, 0.0],
        [0.0, -0.42, 0.0],
        [0.0, -0.40, 0.0],
        [-0.10, -0.05, 0.0],
        [0.0, -0.42, 0.0],
        [0.0, -0.40, 0.0],
    ],
    chains: &[NO, Spine, Spine, Neck, NO, Arms, Arms, NO, Arms, Arms, NO, Legs, Legs, NO, Legs, Legs],
    rig: || Rig {
        hip: [10, 13],
        knee: [11, 14],
        ankle: [12, 15],
        shoulder: [4, 7],
        elbow: [5, 8],
        spine: vec![1, 2],
    },
    contacts: [(12, 0.0), (12, 0.14), (15, 0.0), (15, 0.14)],
};

const H24: PresetDef = PresetDef {
    names: &[
        "pelvis", "l_hip", "l_knee", "l_ankle", "l_foot", "r_hip", "r_knee", "r_ankle", "r_foot", "spine1",
        "spine2", "spine3", "neck", "head", "l_collar", "l_shoulder", "l_elbow", "l_wrist", "l_hand", "r_collar",
        "r_shoulder", "r_elbow", "r_wrist", "r_hand",
    ],
    parents: &[-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 12, 11, 14, 15, 16, 17, 11, 19, 20, 21, 22],
    offsets: &[
        [0.0, 0.93, 0.0],
        [0.09, -0.08, 0.0],
        [0.0, -0.40, 0.0],
        [0.0, -0.40, 0.0],
        [0.0, -0.03, 0.12],
        [-0.09, -0.08, 0.0],
        [0.0, -0.40, 0.0],
        [0.0, -0.40, 0.0],
        [0.0, -0.03, 0.12],
        [0.0, 0.11, 0.0],
        [0.0, 0.13, 0.0],
        [0.0, 0.05, 0.0],
        [0.0, 0.22, 0.0],
        [0.0, 0.12, 0.0],
        [0.07, 0.16, 0.0],
        [0.11, 0.03, 0.0],
        [0.26, 0.0, 0.0],
        [0.25, 0.0, 0.0],
        [0.08, 0.0, 0.0],
        [-0.07, 0.16, 0.0],
        [-0.11, 0.03, 0.0],
        [-0.26, 0.0, 0.0],
        [-0.25, 0.0, 0.0],
        [-0.08, 0.0, 0.0],
    ],
    chains: &[
        NO, NO, Legs, Legs, Legs, NO, Legs, Legs, Legs, Spine, Spine, Spine, Neck, Neck, NO, NO, Arms, Arms, Arms,
        NO, NO, Arms, Arms, Arms,
    ],
    rig: || Rig {
        hip: [1, 5],
        knee: [2, 6],
        ankle: [3, 7],
        shoulder: [15, 20],
        elbow: [16, 21],
        spine: vec![9, 10, 11],
    },
    contacts: [(3, 0.0), (4, 0.0), (7, 0.0), (8, 0.0)],
};

impl SkeletonPreset {
    fn def(self) -> &'static PresetDef {
        match self {
            SkeletonPreset::Humanoid16 => &H16,
            SkeletonPreset::Humanoid24 => &H24,
        }
    }

    pub fn joints(self) -> usize {
        self.def().names.len()
    }

    pub fn topology(self) -> Topology {
        let d = self.def();
        Topology::from_parent_indices(d.parents, d.names).expect("preset topology is valid")
    }

    /// The unscaled base skeleton.
    pub fn canonical(self) -> Skeleton {
        let d = self.def();
        Skeleton::new(
            self.topology(),
            d.offsets.iter().map(|o| Vec3::new(o[0], o[1], o[2])).collect(),
        )
        .expect("preset skeleton is valid")
    }

    pub fn contact_config(self) -> ContactConfig {
        ContactConfig::new(
            self.def()
                .contacts
                .map(|(joint, forward)| ContactPoint { joint, forward }),
        )
    }

    pub fn codec(self, fps: f64) -> Result<FeatureCodec> {
        FeatureCodec::new(FeatureLayout::new(self.joints())?, self.contact_config(), fps)
    }

    /// Which preset a skeleton was built from, judged by joint names and structure.
    pub fn detect(skel: &Skeleton) -> Option<Self> {
        [SkeletonPreset::Humanoid16, SkeletonPreset::Humanoid24]
            .into_iter()
            .find(|p| p.topology() == *skel.topology())
    }

    fn leg_length(self, skel: &Skeleton) -> f64 {
        let d = self.def();
        (0..skel.joints())
            .filter(|&j| d.chains[j] == Chain::Legs && d.names[j].starts_with("l_"))
            .map(|j| skel.offset(j).y.abs())
            .sum()
    }
}

/// Per-chain bone-length multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonParams {
    pub preset: SkeletonPreset,
    pub arms: f64,
    pub legs: f64,
    pub spine: f64,
    pub neck: f64,
}

pub const LIMB_SCALE_RANGE: (f64, f64) = (0.7, 1.3);

impl SkeletonParams {
    pub fn uniform(preset: SkeletonPreset, s: f64) -> Self {
        Self {
            preset,
            arms: s,
            legs: s,
            spine: s,
            neck: s,
        }
    }

    pub fn canonical(preset: SkeletonPreset) -> Self {
        Self::uniform(preset, 1.0)
    }

    pub fn sample(preset: SkeletonPreset, rng: &mut impl Rng) -> Self {
        let (lo, hi) = LIMB_SCALE_RANGE;
        Self {
            preset,
            arms: rng.random_range(lo..=hi),
            legs: rng.random_range(lo..=hi),
            spine: rng.random_range(lo..=hi),
            neck: rng.random_range(lo..=hi),
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = LIMB_SCALE_RANGE;
        for (name, v) in [("arms", self.arms), ("legs", self.legs), ("spine", self.spine), ("neck", self.neck)] {
            if !(lo..=hi).contains(&v) {
                return Err(Error::invalid(format!("{name} scale {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Scales the canonical offsets per chain and lifts the root so the feet
/// keep their rest height.
pub fn make_skeleton(params: &SkeletonParams) -> Result<Skeleton> {
    params.validate()?;
    let preset = params.preset;
    let base = preset.canonical();
    let d = preset.def();
    let mut offsets: Vec<Vec3> = base.offsets().to_vec();
    for (j, o) in offsets.iter_mut().enumerate() {
        let s = match d.chains[j] {
            Chain::None => 1.0,
            Chain::Arms => params.arms,
            Chain::Legs => params.legs,
            Chain::Spine => params.spine,
            Chain::Neck => params.neck,
        };
        *o *= s;
    }
    let foot_y = |offs: &[Vec3]| -> Result<f64> {
        let s = Skeleton::new(base.topology().clone(), offs.to_vec())?;
        Ok(rest_foot_height(preset, &s))
    };
    let lift = foot_y(base.offsets())? - foot_y(&offsets)?;
    offsets[0].y += lift;
    Skeleton::new(base.topology().clone(), offsets)
}

fn contact_points(preset: SkeletonPreset, pos: &[Vec3], rot: &[Rot]) -> [Vec3; 4] {
    preset
        .def()
        .contacts
        .map(|(j, fwd)| pos[j] + rot[j] * Vec3::new(0.0, 0.0, fwd))
}

fn rest_foot_height(preset: SkeletonPreset, skel: &Skeleton) -> f64 {
    let pos = skel.rest_positions();
    let rot = vec![Rot::identity(); skel.joints()];
    contact_points(preset, &pos, &rot)
        .iter()
        .map(|p| p.y)
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    Walk,
    Wave,
    Squat,
    Turn,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 4] = [MotionFamily::Walk, MotionFamily::Wave, MotionFamily::Squat, MotionFamily::Turn];

    pub fn word(self) -> &'static str {
        match self {
            MotionFamily::Walk => "walk",
            MotionFamily::Wave => "wave",
            MotionFamily::Squat => "squat",
            MotionFamily::Turn => "turn",
        }
    }
}

/// Parameters of one closed-form motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub family: MotionFamily,
    /// Dimensionless; 0 freezes every joint.
    pub amplitude: f64,
    /// Hz
    pub frequency: f64,
    /// m/s for the canonical leg length.
    pub speed: f64,
    /// s
    pub duration: f64,
    /// rad
    pub phase: f64,
}

impl MotionParams {
    pub fn frames(&self, fps: f64) -> usize {
        (self.duration * fps).round() as usize
    }

    fn validate(&self, fps: f64) -> Result<()> {
        if !(self.frequency > 0.0) {
            return Err(Error::invalid(format!("frequency must be positive, got {}", self.frequency)));
        }
        if self.frames(fps) < 2 {
            return Err(Error::invalid(format!(
                "duration {} s at {fps} fps gives fewer than 2 frames",
                self.duration
            )));
        }
        if !(self.amplitude >= 0.0) || !(self.speed >= 0.0) || !self.phase.is_finite() {
            return Err(Error::invalid("amplitude and speed must be non-negative"));
        }
        Ok(())
    }
}

/// Sampling ranges for the procedural dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionRanges {
    pub amplitude: (f64, f64),
    pub frequency: (f64, f64),
    /// walk and turn
    pub locomotion_speed: (f64, f64),
    /// wave and squat
    pub idle_speed: (f64, f64),
    /// seconds added on top of the window length
    pub extra_duration: (f64, f64),
    /// families drawn uniformly; empty means all four
    #[serde(default)]
    pub families: Vec<MotionFamily>,
}

impl Default for MotionRanges {
    fn default() -> Self {
        Self {
            amplitude: (0.5, 1.0),
            frequency: (0.6, 1.4),
            locomotion_speed: (0.4, 1.6),
            idle_speed: (0.0, 0.3),
            extra_duration: (0.0, 1.0),
            families: Vec::new(),
        }
    }
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl MotionParams {
    pub fn sample(ranges: &MotionRanges, min_duration: f64, rng: &mut impl Rng) -> Self {
        let families: &[MotionFamily] = if ranges.families.is_empty() {
            &MotionFamily::ALL
        } else {
            &ranges.families
        };
        let family = families[rng.random_range(0..families.len())];
        let speed = match family {
            MotionFamily::Walk | MotionFamily::Turn => sample_range(rng, ranges.locomotion_speed),
            MotionFamily::Wave | MotionFamily::Squat => sample_range(rng, ranges.idle_speed),
        };
        Self {
            family,
            amplitude: sample_range(rng, ranges.amplitude),
            frequency: sample_range(rng, ranges.frequency),
            speed,
            duration: min_duration + sample_range(rng, ranges.extra_duration),
            phase: rng.random_range(0.0..TAU),
        }
    }
}

/// Local joint rotations at time `s` (seconds); skeleton-independent.
fn pose(rig: &Rig, joints: usize, mp: &MotionParams, s: f64) -> (f64, Vec<Rot>) {
    let a = mp.amplitude;
    let w = TAU * mp.frequency;
    let ph = w * s + mp.phase;
    let rx = |ang: f64| axis_angle(Vec3::x(), ang);
    let rz = |ang: f64| axis_angle(Vec3::z(), ang);
    let mut r = vec![Rot::identity(); joints];
    let arms_down = [rz(-1.2 * a.min(1.0)), rz(1.2 * a.min(1.0))];
    let gait = |r: &mut Vec<Rot>, scale: f64| {
        for side in 0..2 {
            let p = ph + side as f64 * PI;
            r[rig.hip[side]] = rx(-0.5 * scale * p.sin());
            r[rig.knee[side]] = rx(0.6 * scale * 0.5 * (1.0 + (p + 0.5 * PI).sin()));
            r[rig.ankle[side]] = rx(-0.2 * scale * p.cos());
            r[rig.shoulder[side]] = rx(0.4 * scale * (p + PI).sin()) * arms_down[side];
            r[rig.elbow[side]] = axis_angle(Vec3::y(), [1.0, -1.0][side] * 0.3 * scale);
        }
    };
    let mut yaw = 0.0;
    match mp.family {
        MotionFamily::Walk => gait(&mut r, a),
        MotionFamily::Turn => {
            gait(&mut r, 0.6 * a);
            yaw = 0.25 * w * a * s;
        }
        MotionFamily::Wave => {
            let raise = a * (0.9 + 0.3 * ph.sin());
            r[rig.shoulder[0]] = rz(raise);
            r[rig.elbow[0]] = axis_angle(Vec3::y(), -a * 0.6 * 0.5 * (1.0 + (2.0 * ph).sin()));
            r[rig.shoulder[1]] = arms_down[1];
        }
        MotionFamily::Squat => {
            let depth = a * 0.5 * (1.0 - ph.cos());
            for side in 0..2 {
                r[rig.hip[side]] = rx(-0.9 * depth);
                r[rig.knee[side]] = rx(1.8 * depth);
                r[rig.ankle[side]] = rx(-0.9 * depth);
                r[rig.shoulder[side]] = rx(-0.8 * depth) * arms_down[side];
            }
            let lean = 0.5 * depth / rig.spine.len() as f64;
            for &j in &rig.spine {
                r[j] = rx(lean);
            }
        }
    }
    (yaw, r)
}

/// Planar root position at time `s` for heading `ψ(s) = rate·s`.
fn planar_root(speed: f64, yaw_rate: f64, s: f64) -> (f64, f64) {
    if yaw_rate.abs() < 1e-12 {
        return (0.0, speed * s);
    }
    let k = speed / yaw_rate;
    (k * (1.0 - (yaw_rate * s).cos()), k * (yaw_rate * s).sin())
}

/// Renders `mp` on `skel` (which must come from a built-in preset).
pub fn synth_motion(skel: &Skeleton, mp: &MotionParams, fps: f64) -> Result<MotionClip> {
    mp.validate(fps)?;
    let preset = SkeletonPreset::detect(skel)
        .ok_or_else(|| Error::Topology("synthetic motions need a built-in humanoid topology".into()))?;
    let rig = (preset.def().rig)();
    let leg_scale = preset.leg_length(skel) / preset.leg_length(&preset.canonical());
    let speed = mp.speed * leg_scale;
    let yaw_rate = match mp.family {
        MotionFamily::Turn => 0.25 * TAU * mp.frequency * mp.amplitude,
        _ => 0.0,
    };
    let ground = rest_foot_height(preset, skel);
    let frames = mp.frames(fps);
    let mut root_pos = Vec::with_capacity(frames);
    let mut local = Vec::with_capacity(frames);
    for t in 0..frames {
        let s = t as f64 / fps;
        let (yaw, mut rots) = pose(&rig, skel.joints(), mp, s);
        rots[0] = yaw_matrix(yaw) * rots[0];
        let (x, z) = planar_root(speed, yaw_rate, s);
        let mut root = Vec3::new(x, skel.offset(0).y, z);
        let probe = MotionClip::new(fps, vec![root; 2], vec![rots.clone(), rots.clone()])?;
        let (pos, grot) = forward_kinematics_full(skel, &probe)?;
        let low = contact_points(preset, &pos[0], &grot[0])
            .iter()
            .map(|p| p.y)
            .fold(f64::INFINITY, f64::min);
        root.y += ground - low;
        root_pos.push(root);
        local.push(rots);
    }
    MotionClip::new(fps, root_pos, local)
}

/// Fixed prompt vocabulary; id 0 is padding.
pub const VOCAB: &[&str] = &[
    "<pad>", "a", "person", "character", "someone", "does", "with", "motion", "pace", "at", "and", "movement",
    "walk", "wave", "squat", "turn", "slow", "moderate", "fast", "small", "medium", "large",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

pub fn token_id(word: &str) -> Option<u32> {
    VOCAB.iter().position(|w| *w == word).map(|i| i as u32)
}

/// Fixed-length token sequence padded with [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTokens {
    ids: Vec<u32>,
}

impl PromptTokens {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab_size()) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", vocab_size())));
        }
        Ok(Self { ids })
    }

    /// All-padding prompt of length `len`.
    pub fn empty(len: usize) -> Self {
        Self { ids: vec![PAD; len] }
    }

    /// Tokenizes whitespace-separated vocabulary words, padding to `len`.
    pub fn from_text(text: &str, len: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(len);
        for w in text.split_whitespace() {
            let w = w.to_ascii_lowercase();
            let id = token_id(&w).ok_or_else(|| Error::invalid(format!("word `{w}` is not in the vocabulary")))?;
            ids.push(id);
        }
        if ids.len() > len {
            return Err(Error::invalid(format!("prompt has {} tokens, limit {len}", ids.len())));
        }
        ids.resize(len, PAD);
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.iter().all(|&i| i == PAD)
    }

    pub fn text(&self) -> String {
        self.ids
            .iter()
            .filter(|&&i| i != PAD)
            .map(|&i| VOCAB[i as usize])
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn contains(&self, word: &str) -> bool {
        token_id(word).is_some_and(|id| self.ids.contains(&id))
    }
}

pub fn speed_word(speed: f64) -> &'static str {
    if speed < 0.8 {
        "slow"
    } else if speed < 1.2 {
        "moderate"
    } else {
        "fast"
    }
}

pub fn amplitude_word(amplitude: f64) -> &'static str {
    if amplitude < 0.67 {
        "small"
    } else if amplitude < 0.84 {
        "medium"
    } else {
        "large"
    }
}

const TEMPLATES: &[&str] = &[
    "a person does a {speed} {family} with {amp} motion",
    "{family} at {speed} pace and {amp} movement",
    "someone does {amp} {family} motion at a {speed} pace",
    "a character {family} {speed} {amp}",
];

/// Templated prompt for `mp`; `variant_seed` picks the paraphrase.
pub fn synth_prompt(mp: &MotionParams, variant_seed: u64) -> PromptTokens {
    let template = TEMPLATES[(variant_seed % TEMPLATES.len() as u64) as usize];
    let text = template
        .replace("{family}", mp.family.word())
        .replace("{speed}", speed_word(mp.speed))
        .replace("{amp}", amplitude_word(mp.amplitude));
    PromptTokens::from_text(&text, PROMPT_LEN).expect("templates use vocabulary words only")
}

/// Reproducible description of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_clips: usize,
    /// frames
    pub window: usize,
    pub fps: f64,
    pub preset: SkeletonPreset,
    pub limb_scale_range: (f64, f64),
    /// When non-empty, arm and leg scales are drawn from this set instead of
    /// `limb_scale_range` (which still governs spine and neck).
    #[serde(default)]
    pub limb_scale_choices: Vec<f64>,
    pub motion: MotionRanges,
}

impl DatasetConfig {
    pub fn new(seed: u64, n_clips: usize, window: usize, preset: SkeletonPreset) -> Self {
        Self {
            seed,
            n_clips,
            window,
            fps: DEFAULT_FPS,
            preset,
            limb_scale_range: LIMB_SCALE_RANGE,
            limb_scale_choices: Vec::new(),
            motion: MotionRanges::default(),
        }
    }
}

/// One training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    /// `window × D`, unnormalized.
    pub features: Tensor,
    pub prompt: PromptTokens,
    /// `D_ret`, unnormalized.
    pub condition: Tensor,
    pub skeleton: Skeleton,
    pub skeleton_params: SkeletonParams,
    pub motion: MotionParams,
    pub window_start: usize,
    /// Ground-truth clip restricted to the window.
    pub clip: MotionClip,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub codec: FeatureCodec,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Manifest written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetManifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("manifest serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("manifest parse: {e}")))
    }
}

impl Dataset {
    pub fn train_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().map(|&i| &self.samples[i])
    }

    pub fn test_samples(&self) -> impl Iterator<Item = &Sample> {
        self.test.iter().map(|&i| &self.samples[i])
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            config: self.config.clone(),
            train: self.train.clone(),
            test: self.test.clone(),
        }
    }
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Deterministic train/test partition: first ⌈0.8n⌉ of a seeded shuffle go to train.
pub fn split_indices(seed: u64, n: usize) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut clip_rng(seed, 0));
    let n_train = (4 * n).div_ceil(5);
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.n_clips < 5 {
        return Err(Error::invalid(format!("need at least 5 clips, got {}", config.n_clips)));
    }
    if config.window < 2 {
        return Err(Error::invalid("window must span at least 2 frames"));
    }
    let (lo, hi) = config.limb_scale_range;
    if lo < LIMB_SCALE_RANGE.0 || hi > LIMB_SCALE_RANGE.1 || lo > hi {
        return Err(Error::invalid(format!("limb scale range ({lo}, {hi}) outside [0.7, 1.3]")));
    }
    if let Some(c) = config
        .limb_scale_choices
        .iter()
        .find(|c| !(LIMB_SCALE_RANGE.0..=LIMB_SCALE_RANGE.1).contains(*c))
    {
        return Err(Error::invalid(format!("limb scale choice {c} outside [0.7, 1.3]")));
    }
    let codec = config.preset.codec(config.fps)?;
    let min_duration = config.window as f64 / config.fps;
    let mut samples = Vec::with_capacity(config.n_clips);
    for index in 0..config.n_clips {
        let mut rng = clip_rng(config.seed, index + 1);
        let limb = |rng: &mut ChaCha8Rng| match config.limb_scale_choices.as_slice() {
            [] => sample_range(rng, (lo, hi)),
            c => c[rng.random_range(0..c.len())],
        };
        let sp = SkeletonParams {
            preset: config.preset,
            arms: limb(&mut rng),
            legs: limb(&mut rng),
            spine: sample_range(&mut rng, (lo, hi)),
            neck: sample_range(&mut rng, (lo, hi)),
        };
        let skel = make_skeleton(&sp)?;
        let mut mp = MotionParams::sample(&config.motion, min_duration, &mut rng);
        while mp.frames(config.fps) < config.window {
            mp.duration += 1.0 / config.fps;
        }
        let clip = synth_motion(&skel, &mp, config.fps)?;
        let window_start = rng.random_range(0..=clip.frames() - config.window);
        let clip = clip.window(window_start, config.window)?;
        let features = codec.encode(&clip, &skel)?;
        let prompt = synth_prompt(&mp, rng.random());
        let condition = codec.skeleton_condition(&skel)?;
        samples.push(Sample {
            index,
            features,
            prompt,
            condition,
            skeleton: skel,
            skeleton_params: sp,
            motion: mp,
            window_start,
            clip,
        });
    }
    let (train, test) = split_indices(config.seed, config.n_clips);
    Ok(Dataset {
        config: config.clone(),
        codec,
        samples,
        train,
        test,
    })
}

/// Rebuilds a dataset from its manifest and checks the split matches.
pub fn rebuild_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    let ds = build_dataset(&manifest.config)?;
    if ds.train != manifest.train || ds.test != manifest.test {
        return Err(Error::invalid("manifest split does not match the regenerated dataset"));
    }
    Ok(ds)
}
