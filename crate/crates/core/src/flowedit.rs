//! Inversion-free transport between two conditions, used for text editing
//! and same-topology retargeting.
//!
//! Starting at `y = x` at `τ_min`, every Euler step draws noise `ε`, forms the
//! noisy source `x̃ = (1 − τ)ε + τx`, and moves `y` along
//! `v(x̃ + (y − x) | c_tgt) − v(x̃ | c_src)`. Both evaluations see the same `ε`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    aligned_clip_positions, aligned_direct_positions, bone_length_error, copy_baseline, height_normalized_mse,
    PairReport,
};
use crate::features::FeatureCodec;
use crate::flow::{cfg_velocity, Denoiser, FlowModel, GuidanceWeights};
use crate::kinematics::{forward_kinematics, MotionClip, Positions, Skeleton};
use crate::model::ConditionSet;
use crate::numerics::Tensor;
use crate::synthdata::{make_skeleton, synth_motion, Dataset, MotionParams, PromptTokens, SkeletonParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// New `ε` every step.
    Fresh,
    /// One `ε` for the whole run.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub tau_min: f64,
    pub steps: usize,
    pub w_src: GuidanceWeights,
    pub w_tgt: GuidanceWeights,
    pub seed: u64,
    pub tau_clamp: f64,
    pub noise: NoiseMode,
    /// Keep a copy of `y` after every step in the trace.
    pub keep_states: bool,
}

impl EditConfig {
    /// Text-editing defaults.
    pub fn text_edit(seed: u64) -> Self {
        Self {
            tau_min: 0.1,
            steps: 100,
            w_src: GuidanceWeights::EDIT_SOURCE,
            w_tgt: GuidanceWeights::EDIT_TARGET,
            seed,
            tau_clamp: 1e-3,
            noise: NoiseMode::Fresh,
            keep_states: false,
        }
    }

    /// Retargeting defaults for a given start step out of `steps`.
    pub fn retarget(start_step: usize, steps: usize, seed: u64) -> Self {
        Self {
            tau_min: start_step as f64 / steps as f64,
            steps,
            w_src: GuidanceWeights::RETARGET,
            w_tgt: GuidanceWeights::RETARGET,
            ..Self::text_edit(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("transport needs at least one step"));
        }
        if !(self.tau_min >= 0.0 && self.tau_min < 1.0 - self.tau_clamp) {
            return Err(Error::invalid(format!(
                "τ_min = {} must lie in [0, {})",
                self.tau_min,
                1.0 - self.tau_clamp
            )));
        }
        self.w_src.validate()?;
        self.w_tgt.validate()
    }

    /// `(τ values, step size)` of the Euler grid from `τ_min` to `1 − τ_clamp`.
    pub fn grid(&self) -> Result<(Vec<f64>, f64)> {
        self.validate()?;
        let n = (((1.0 - self.tau_min) * self.steps as f64).round() as usize).max(1);
        let h = (1.0 - self.tau_clamp - self.tau_min) / n as f64;
        Ok(((0..n).map(|i| self.tau_min + i as f64 * h).collect(), h))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub tau: f64,
    /// `‖v_tgt − v_src‖` (Frobenius).
    pub delta_norm: f64,
    pub y: Option<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransportTrace {
    pub steps: Vec<TraceStep>,
}

impl TransportTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,tau,delta_norm\n");
        for (i, st) in self.steps.iter().enumerate() {
            s.push_str(&format!("{i},{},{}\n", st.tau, st.delta_norm));
        }
        s
    }
}

/// `x̃_τ = (1 − τ)·ε + τ·x`
pub fn noisy_source(x: &Tensor, tau: f64, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("τ = {tau} outside [0, 1]")));
    }
    eps.zip_map(x, |e, v| (1.0 - tau) * e + tau * v)
}

/// Moves `x` (normalized features) from `c_src` to `c_tgt`.
pub fn transport<D: Denoiser + ?Sized>(
    den: &D,
    x: &Tensor,
    c_src: &ConditionSet,
    c_tgt: &ConditionSet,
    cfg: &EditConfig,
) -> Result<(Tensor, TransportTrace)> {
    let (taus, h) = cfg.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frozen = match cfg.noise {
        NoiseMode::Frozen => Some(Tensor::randn(x.shape().to_vec(), 1.0, &mut rng)),
        NoiseMode::Fresh => None,
    };
    let mut y = x.clone();
    let mut trace = TransportTrace::default();
    for (step, &tau) in taus.iter().enumerate() {
        let eps = match &frozen {
            Some(e) => e.clone(),
            None => Tensor::randn(x.shape().to_vec(), 1.0, &mut rng),
        };
        let src_in = noisy_source(x, tau, &eps)?;
        let offset = y.sub(x)?;
        let tgt_in = if offset.data().iter().all(|&v| v == 0.0) {
            src_in.clone()
        } else {
            src_in.add(&offset)?
        };
        let v_tgt = cfg_velocity(den, &tgt_in, tau, c_tgt, &cfg.w_tgt, cfg.tau_clamp)?;
        let v_src = cfg_velocity(den, &src_in, tau, c_src, &cfg.w_src, cfg.tau_clamp)?;
        let dv = v_tgt.sub(&v_src)?;
        dv.check_finite(|| format!("transport velocity difference at step {step}"))?;
        y.axpy(h, &dv)?;
        trace.steps.push(TraceStep {
            tau,
            delta_norm: dv.norm(),
            y: cfg.keep_states.then(|| y.clone()),
        });
    }
    Ok((y, trace))
}

/// Result of an edit in raw feature space plus its FK decode.
#[derive(Clone, Debug)]
pub struct EditOutput {
    pub features: Tensor,
    pub clip: MotionClip,
    pub trace: TransportTrace,
}

/// Transports raw features and maps the change back to raw units.
fn transport_raw(
    model: &FlowModel,
    feat: &Tensor,
    c_src: &ConditionSet,
    c_tgt: &ConditionSet,
    cfg: &EditConfig,
) -> Result<(Tensor, TransportTrace)> {
    let x = model.norm.apply(feat)?;
    let (y, trace) = transport(model, &x, c_src, c_tgt, cfg)?;
    // adding the rescaled change keeps an unchanged y bit-identical to the input
    let std = model.norm.std().data();
    let d = std.len();
    let mut out = feat.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let delta = y.data()[i] - x.data()[i];
        if delta != 0.0 {
            *o += delta * std[i % d];
        }
    }
    Ok((out, trace))
}

/// Changes the prompt while keeping the skeleton.
pub fn edit_text(
    model: &FlowModel,
    codec: &FeatureCodec,
    feat: &Tensor,
    prompt_src: &PromptTokens,
    prompt_tgt: &PromptTokens,
    skel: &Skeleton,
    cfg: &EditConfig,
) -> Result<EditOutput> {
    let c_src = model.condition(codec, Some(prompt_src.clone()), skel)?;
    let c_tgt = model.condition(codec, Some(prompt_tgt.clone()), skel)?;
    let (features, trace) = transport_raw(model, feat, &c_src, &c_tgt, cfg)?;
    let clip = codec.decode_fk(&features, skel)?;
    Ok(EditOutput { features, clip, trace })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetargetConfig {
    pub steps: usize,
    /// Candidate start steps out of `steps`.
    pub start_steps: Vec<usize>,
    pub seed: u64,
    pub tau_clamp: f64,
    pub noise: NoiseMode,
}

impl RetargetConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            steps: 100,
            start_steps: (1..=8).map(|i| 5 * i).collect(),
            seed,
            tau_clamp: 1e-3,
            noise: NoiseMode::Fresh,
        }
    }

    fn edit_config(&self, start: usize) -> EditConfig {
        EditConfig {
            tau_clamp: self.tau_clamp,
            noise: self.noise,
            ..EditConfig::retarget(start, self.steps, self.seed)
        }
    }
}

/// How the start step is chosen when sweeping.
#[derive(Clone, Debug)]
pub enum StartSelection<'a> {
    /// Lowest bone-length error of the direct decode on the target skeleton.
    BoneLength,
    /// Lowest error of the FK decode against first-frame-aligned ground-truth positions.
    GroundTruth(&'a Positions),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub start_step: usize,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct RetargetOutput {
    pub start_step: usize,
    pub features: Tensor,
    pub clip_fk: MotionClip,
    pub positions_direct: Positions,
    pub sweep: Vec<SweepPoint>,
    pub trace: TransportTrace,
}

/// Moves `feat` (raw, recorded on `skel_src`) onto `skel_tgt` with an empty prompt.
pub fn retarget(
    model: &FlowModel,
    codec: &FeatureCodec,
    feat: &Tensor,
    skel_src: &Skeleton,
    skel_tgt: &Skeleton,
    cfg: &RetargetConfig,
    selection: StartSelection<'_>,
) -> Result<RetargetOutput> {
    if !skel_src.topology().same_structure(skel_tgt.topology()) {
        return Err(Error::Topology("retargeting needs source and target with the same joint tree".into()));
    }
    if cfg.start_steps.is_empty() {
        return Err(Error::invalid("retargeting needs at least one start step"));
    }
    let c_src = model.condition(codec, None, skel_src)?;
    let c_tgt = model.condition(codec, None, skel_tgt)?;
    let mut best: Option<(f64, RetargetOutput)> = None;
    let mut sweep = Vec::with_capacity(cfg.start_steps.len());
    for &k in &cfg.start_steps {
        let (features, trace) = transport_raw(model, feat, &c_src, &c_tgt, &cfg.edit_config(k))?;
        let positions_direct = codec.decode_direct(&features)?;
        let clip_fk = codec.decode_fk(&features, skel_tgt)?;
        let score = match selection {
            StartSelection::BoneLength => bone_length_error(&positions_direct, skel_tgt)?,
            StartSelection::GroundTruth(gt) => {
                let pos = aligned_clip_positions(&clip_fk, skel_tgt)?;
                height_normalized_mse(&pos, gt, skel_tgt.height())?
            }
        };
        sweep.push(SweepPoint { start_step: k, score });
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((
                score,
                RetargetOutput {
                    start_step: k,
                    features,
                    clip_fk,
                    positions_direct,
                    sweep: Vec::new(),
                    trace,
                },
            ));
        }
    }
    let (_, mut out) = best.expect("at least one start step");
    out.sweep = sweep;
    Ok(out)
}

/// A source clip, a target skeleton and the target's ground-truth motion.
#[derive(Clone, Debug)]
pub struct RetargetCase {
    pub id: String,
    pub source_skeleton: Skeleton,
    pub target_skeleton: Skeleton,
    pub source_clip: MotionClip,
    /// Raw features of `source_clip`.
    pub source_features: Tensor,
    pub target_truth: MotionClip,
}

impl RetargetCase {
    /// Synthesizes `motion` on both skeletons and keeps frames `start..start + len`.
    pub fn synthetic(
        id: impl Into<String>,
        codec: &FeatureCodec,
        source: &SkeletonParams,
        target: &SkeletonParams,
        motion: &MotionParams,
        start: usize,
        len: usize,
    ) -> Result<Self> {
        let src = make_skeleton(source)?;
        let tgt = make_skeleton(target)?;
        let source_clip = synth_motion(&src, motion, codec.fps())?.window(start, len)?;
        let target_truth = synth_motion(&tgt, motion, codec.fps())?.window(start, len)?;
        Ok(Self {
            id: id.into(),
            source_features: codec.encode(&source_clip, &src)?,
            source_skeleton: src,
            target_skeleton: tgt,
            source_clip,
            target_truth,
        })
    }
}

/// Builds `n` held-out pairs from the test split of `ds`. Pair `p` takes test
/// clip `p mod |test|` as source and moves it to the `p`-th (cyclically)
/// arm/leg combination from `scales` whose leg scale differs from the
/// source's. Synthetic rotations do not depend on the skeleton and the root
/// path depends only on leg length, so with equal legs the copy baseline
/// reproduces the ground truth exactly.
pub fn family_cases(ds: &Dataset, n: usize, scales: &[f64]) -> Result<Vec<RetargetCase>> {
    if ds.test.is_empty() {
        return Err(Error::invalid("dataset has no test clips"));
    }
    if scales.is_empty() {
        return Err(Error::invalid("need at least one limb scale"));
    }
    let mut cases = Vec::with_capacity(n);
    for p in 0..n {
        let s = &ds.samples[ds.test[p % ds.test.len()]];
        let src = s.skeleton_params;
        let combos: Vec<(f64, f64)> = scales
            .iter()
            .flat_map(|&a| scales.iter().map(move |&l| (a, l)))
            .filter(|&(_, l)| l != src.legs)
            .collect();
        if combos.is_empty() {
            return Err(Error::invalid("no target leg scale differs from the source"));
        }
        let (arms, legs) = combos[p % combos.len()];
        let tgt = SkeletonParams { arms, legs, ..src };
        let id = format!("clip{}_a{arms}_l{legs}", s.index);
        cases.push(RetargetCase::synthetic(
            id,
            &ds.codec,
            &src,
            &tgt,
            &s.motion,
            s.window_start,
            ds.config.window,
        )?);
    }
    Ok(cases)
}

/// Retargets one case and scores both decodes and the copy baseline against
/// the ground truth. The start step is picked by ground-truth error when
/// `use_truth` is set, by bone-length error otherwise.
pub fn evaluate_retarget(
    model: &FlowModel,
    codec: &FeatureCodec,
    case: &RetargetCase,
    cfg: &RetargetConfig,
    use_truth: bool,
) -> Result<(PairReport, RetargetOutput)> {
    let tgt = &case.target_skeleton;
    let truth = aligned_clip_positions(&case.target_truth, tgt)?;
    let selection = if use_truth {
        StartSelection::GroundTruth(&truth)
    } else {
        StartSelection::BoneLength
    };
    let out = retarget(model, codec, &case.source_features, &case.source_skeleton, tgt, cfg, selection)?;
    let h = tgt.height();
    let direct = aligned_direct_positions(codec, &out.features)?;
    let fk = aligned_clip_positions(&out.clip_fk, tgt)?;
    let copy = copy_baseline(&case.source_clip, &case.source_skeleton, tgt)?;
    let copy_pos = aligned_clip_positions(&copy, tgt)?;
    let report = PairReport {
        id: case.id.clone(),
        start_step: out.start_step,
        mse_direct: height_normalized_mse(&direct, &truth, h)?,
        mse_fk: height_normalized_mse(&fk, &truth, h)?,
        mse_copy: height_normalized_mse(&copy_pos, &truth, h)?,
        bone_len_err_direct: bone_length_error(&out.positions_direct, tgt)?,
        bone_len_err_fk: bone_length_error(&forward_kinematics(tgt, &out.clip_fk)?, tgt)?,
    };
    Ok((report, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::synthdata::{make_skeleton, SkeletonParams, SkeletonPreset};
    use std::cell::RefCell;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn prompt(text: &str) -> PromptTokens {
        PromptTokens::from_text(text, 16).unwrap()
    }

    #[test]
    fn noisy_source_endpoints_and_mean() {
        let x = Tensor::randn(vec![3, 2], 1.0, &mut rng(0));
        let e = Tensor::randn(vec![3, 2], 1.0, &mut rng(1));
        assert_eq!(noisy_source(&x, 1.0, &e).unwrap(), x);
        assert_eq!(noisy_source(&x, 0.0, &e).unwrap(), e);
        let tau = 0.3;
        let n = 10_000;
        let mut r = rng(2);
        let mut mean = Tensor::zeros(vec![3, 2]);
        for _ in 0..n {
            let e = Tensor::randn(vec![3, 2], 1.0, &mut r);
            mean.axpy(1.0 / n as f64, &noisy_source(&x, tau, &e).unwrap()).unwrap();
        }
        let bound = 3.0 * (1.0 - tau) / (n as f64).sqrt();
        for (m, v) in mean.data().iter().zip(x.data()) {
            assert!((m - tau * v).abs() < bound);
        }
    }

    #[test]
    fn grid_spans_to_terminal_time() {
        let cfg = EditConfig::text_edit(0);
        let (taus, h) = cfg.grid().unwrap();
        assert_eq!(taus.len(), 90);
        assert_eq!(taus[0], 0.1);
        assert!((taus[89] + h - 0.999).abs() < 1e-12);
        let r = EditConfig::retarget(25, 100, 0);
        assert_eq!(r.tau_min, 0.25);
        assert_eq!(r.grid().unwrap().0.len(), 75);
        assert!(EditConfig { tau_min: 1.0, ..cfg }.grid().is_err());
    }

    /// Returns one endpoint per prompt (first token) and records inputs.
    struct PerPrompt {
        ends: Vec<(u32, Tensor)>,
        seen: RefCell<Vec<Tensor>>,
    }

    impl Denoiser for PerPrompt {
        fn predict_clean(&self, x: &Tensor, _tau: f64, c: &ConditionSet) -> Result<Tensor> {
            self.seen.borrow_mut().push(x.clone());
            let key = c.prompt.as_ref().map(|p| p.ids()[3]).unwrap_or(0);
            Ok(self
                .ends
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, t)| t.clone())
                .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        }
    }

    fn two_endpoints() -> (PerPrompt, Tensor, Tensor, ConditionSet, ConditionSet) {
        let xa = Tensor::randn(vec![6, 4], 1.0, &mut rng(3));
        let xb = Tensor::randn(vec![6, 4], 1.0, &mut rng(4));
        let (pa, pb) = (prompt("a person does walk"), prompt("a person does wave"));
        let den = PerPrompt {
            ends: vec![(pa.ids()[3], xa.clone()), (pb.ids()[3], xb.clone())],
            seen: RefCell::new(Vec::new()),
        };
        let ca = ConditionSet::new(Some(pa), None);
        let cb = ConditionSet::new(Some(pb), None);
        (den, xa, xb, ca, cb)
    }

    fn both_only(tau_min: f64, seed: u64) -> EditConfig {
        EditConfig {
            tau_min,
            w_src: GuidanceWeights::JOINT_ONLY,
            w_tgt: GuidanceWeights::JOINT_ONLY,
            keep_states: true,
            ..EditConfig::text_edit(seed)
        }
    }

    #[test]
    fn both_branches_share_noise() {
        let (den, xa, _, ca, cb) = two_endpoints();
        let cfg = both_only(0.5, 9);
        let (_, trace) = transport(&den, &xa, &ca, &cb, &cfg).unwrap();
        let seen = den.seen.borrow();
        assert_eq!(seen.len(), 2 * trace.steps.len());
        let mut y_prev = xa.clone();
        for (i, st) in trace.steps.iter().enumerate() {
            let (tgt, src) = (&seen[2 * i], &seen[2 * i + 1]);
            let offset = y_prev.sub(&xa).unwrap();
            assert!(tgt.sub(src).unwrap().max_abs_diff(&offset).unwrap() < 1e-12);
            y_prev = st.y.clone().unwrap();
        }
    }

    #[test]
    fn oracle_transport_lands_on_target() {
        let (den, xa, xb, ca, cb) = two_endpoints();
        let (y, _) = transport(&den, &xa, &ca, &cb, &both_only(0.1, 1)).unwrap();
        let before = xa.max_abs_diff(&xb).unwrap();
        let after = y.max_abs_diff(&xb).unwrap();
        assert!(after < 0.05 * before, "{after} vs {before}");
    }

    #[test]
    fn smaller_start_time_edits_more() {
        let (den, xa, _, ca, cb) = two_endpoints();
        let dist = |tau_min: f64| {
            (0..10)
                .map(|s| transport(&den, &xa, &ca, &cb, &both_only(tau_min, s)).unwrap().0.sub(&xa).unwrap().norm())
                .sum::<f64>()
        };
        let (d4, d2, d1) = (dist(0.4), dist(0.2), dist(0.1));
        assert!(d4 <= d2 && d2 <= d1, "{d4} {d2} {d1}");
    }

    #[test]
    fn weak_edit_is_bounded_by_one_step() {
        let (den, xa, _, ca, cb) = two_endpoints();
        let cfg = EditConfig {
            steps: 1,
            ..both_only(0.99, 2)
        };
        let (y, trace) = transport(&den, &xa, &ca, &cb, &cfg).unwrap();
        let (_, h) = cfg.grid().unwrap();
        assert_eq!(trace.steps.len(), 1);
        let moved = y.sub(&xa).unwrap().norm();
        assert!((moved - h * trace.steps[0].delta_norm).abs() < 1e-12);
        assert!(trace.to_csv().starts_with("step,tau,delta_norm\n0,0.99,"));
    }

    fn tiny_model() -> (FlowModel, FeatureCodec) {
        let codec = SkeletonPreset::Humanoid16.codec(30.0).unwrap();
        let cfg = ModelConfig {
            text_dim: 8,
            ..ModelConfig::for_joints(16, 32, 1, 2)
        };
        let mut params = init_params(&cfg, &mut rng(5)).unwrap();
        for (_, t) in params.iter_mut() {
            *t = Tensor::randn(t.shape().to_vec(), 0.1, &mut rng(6));
        }
        let d = codec.layout().dim();
        let norm = crate::features::NormStats::from_tensors(Tensor::zeros(vec![d]), Tensor::full(vec![d], 1.0)).unwrap();
        (FlowModel { config: cfg, params, norm }, codec)
    }

    fn source_features(codec: &FeatureCodec, skel: &Skeleton) -> Tensor {
        let mp = crate::synthdata::MotionParams {
            family: crate::synthdata::MotionFamily::Walk,
            amplitude: 0.8,
            frequency: 1.0,
            speed: 1.0,
            duration: 0.5,
            phase: 0.0,
        };
        let clip = crate::synthdata::synth_motion(skel, &mp, 30.0).unwrap();
        codec.encode(&clip, skel).unwrap()
    }

    #[test]
    fn identical_conditions_leave_input_unchanged() {
        let (model, codec) = tiny_model();
        let skel = SkeletonPreset::Humanoid16.canonical();
        let feat = source_features(&codec, &skel);
        let p = prompt("a person does walk");
        // identity needs equal weights as well as equal prompts
        let cfg = EditConfig {
            steps: 10,
            w_tgt: GuidanceWeights::EDIT_SOURCE,
            ..EditConfig::text_edit(4)
        };
        let out = edit_text(&model, &codec, &feat, &p, &p, &skel, &cfg).unwrap();
        assert_eq!(out.features, feat);
        assert!(out.trace.steps.iter().all(|s| s.delta_norm == 0.0));
        let clip = codec.decode_fk(&feat, &skel).unwrap();
        assert_eq!(out.clip, clip);
        let fk = crate::kinematics::forward_kinematics(&skel, &out.clip).unwrap();
        assert!(bone_length_error(&fk, &skel).unwrap() < 1e-9);
        // a different prompt does move the features
        let q = prompt("a person does wave");
        let moved = edit_text(&model, &codec, &feat, &p, &q, &skel, &cfg).unwrap();
        assert!(moved.features.max_abs_diff(&feat).unwrap() > 0.0);
    }

    #[test]
    fn retarget_identity_and_topology_check() {
        let (model, codec) = tiny_model();
        let skel = SkeletonPreset::Humanoid16.canonical();
        let feat = source_features(&codec, &skel);
        let cfg = RetargetConfig {
            steps: 10,
            start_steps: vec![2, 4],
            ..RetargetConfig::new(0)
        };
        let out = retarget(&model, &codec, &feat, &skel, &skel, &cfg, StartSelection::BoneLength).unwrap();
        assert_eq!(out.features, feat);
        assert_eq!(out.sweep.len(), 2);
        let taller = make_skeleton(&SkeletonParams {
            legs: 1.2,
            ..SkeletonParams::canonical(SkeletonPreset::Humanoid16)
        })
        .unwrap();
        let moved = retarget(&model, &codec, &feat, &skel, &taller, &cfg, StartSelection::BoneLength).unwrap();
        assert!(moved.features.max_abs_diff(&feat).unwrap() > 0.0);
        let fk = crate::kinematics::forward_kinematics(&taller, &moved.clip_fk).unwrap();
        assert!(bone_length_error(&fk, &taller).unwrap() < 1e-9);
        let other = SkeletonPreset::Humanoid24.canonical();
        assert!(matches!(
            retarget(&model, &codec, &feat, &skel, &other, &cfg, StartSelection::BoneLength),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn family_cases_change_the_legs() {
        use crate::eval::{copy_baseline, height_normalized_mse};
        use crate::kinematics::forward_kinematics;
        use crate::synthdata::{build_dataset, DatasetConfig};
        let cfg = DatasetConfig {
            limb_scale_range: (1.0, 1.0),
            limb_scale_choices: vec![0.8, 1.0, 1.2],
            ..DatasetConfig::new(3, 10, 16, SkeletonPreset::Humanoid16)
        };
        let ds = build_dataset(&cfg).unwrap();
        let cases = family_cases(&ds, 6, &[0.8, 1.0, 1.2]).unwrap();
        assert_eq!(cases.len(), 6);
        for c in &cases {
            let copy = copy_baseline(&c.source_clip, &c.source_skeleton, &c.target_skeleton).unwrap();
            let truth = forward_kinematics(&c.target_skeleton, &c.target_truth).unwrap();
            let pos = forward_kinematics(&c.target_skeleton, &copy).unwrap();
            let err = height_normalized_mse(&pos, &truth, c.target_skeleton.height()).unwrap();
            assert!(err > 1e-6, "{}: copy is exact", c.id);
        }
    }
}
