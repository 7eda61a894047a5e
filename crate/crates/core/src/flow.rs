//! Rectified-flow training, condition dropout, multi-condition classifier-free
//! guidance and the RK4 sampler.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureCodec, FeatureLayout, NormStats};
use crate::kinematics::{MotionClip, Skeleton};
use crate::model::{self, ConditionSet, ModelConfig};
use crate::numerics::{
    finite_diff_check, load_tensors, rk4_integrate, save_tensors, GradCheckOptions, GradReport, Graph, ParamStore,
    Tensor, Var,
};
use crate::synthdata::{Dataset, PromptTokens, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Anneals the learning rate along a half cosine to zero at the last step.
    pub cosine_decay: bool,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run; absent means no limit.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub lambda_gen: f64,
    pub lambda_ret: f64,
    pub p_both: f64,
    pub p_text: f64,
    /// Extra skeleton-only dropout, off by default.
    pub p_skel: f64,
    pub seed: u64,
    pub tau_clamp: f64,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            lr: 5e-5,
            cosine_decay: false,
            weight_decay: 5e-3,
            batch: 16,
            epochs: 1000,
            max_steps: Some(2000),
            lambda_gen: 1.0,
            lambda_ret: 1.0,
            p_both: 0.1,
            p_text: 0.1,
            p_skel: 0.0,
            seed: 0,
            tau_clamp: 1e-3,
            checkpoint_every: Some(500),
        }
    }

    pub fn paper() -> Self {
        Self {
            batch: 512,
            epochs: 500,
            max_steps: None,
            checkpoint_every: Some(5000),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_both) || !prob(self.p_text) || !prob(self.p_skel) {
            return Err(Error::invalid("dropout probabilities must lie in [0, 1]"));
        }
        if !(self.lambda_gen >= 0.0 && self.lambda_ret >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.tau_clamp > 0.0 && self.tau_clamp <= 0.1) {
            return Err(Error::invalid(format!("tau_clamp {} outside (0, 0.1]", self.tau_clamp)));
        }
        if self.batch == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return Err(Error::invalid("batch, epochs and max_steps must be positive"));
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid("lr must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

/// Classifier-free guidance weights for the text, skeleton and joint branches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceWeights {
    pub text: f64,
    pub skel: f64,
    pub both: f64,
}

impl GuidanceWeights {
    pub const NONE: Self = Self::new(0.0, 0.0, 0.0);
    pub const GENERATION: Self = Self::new(0.5, 0.0, 1.0);
    pub const EDIT_SOURCE: Self = Self::new(1.5, 1.0, 0.0);
    pub const EDIT_TARGET: Self = Self::new(3.5, 1.0, 0.0);
    pub const RETARGET: Self = Self::new(0.0, 1.0, 0.0);
    pub const JOINT_ONLY: Self = Self::new(0.0, 0.0, 1.0);

    pub const fn new(text: f64, skel: f64, both: f64) -> Self {
        Self { text, skel, both }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self::new(a * self.text, a * self.skel, a * self.both)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.text, self.skel, self.both].iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(format!("guidance weights must be finite, got {self:?}")))
        }
    }
}

/// `x_τ = (1 − τ)·x0 + τ·x1`
pub fn interpolate(x0: &Tensor, x1: &Tensor, tau: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("τ = {tau} outside [0, 1]")));
    }
    x0.zip_map(x1, |a, b| (1.0 - tau) * a + tau * b)
}

/// `v = (x̂1 − x_τ) / (1 − min(τ, 1 − τ_clamp))`
pub fn pred_to_velocity(x1_hat: &Tensor, x_tau: &Tensor, tau: f64, tau_clamp: f64) -> Result<Tensor> {
    if !(tau <= 1.0) {
        return Err(Error::invalid(format!("τ = {tau} above 1")));
    }
    let denom = 1.0 - tau.min(1.0 - tau_clamp);
    x1_hat.zip_map(x_tau, |p, x| (p - x) / denom)
}

fn block_mse(g: &mut Graph, diff: Var, start: usize, len: usize) -> Result<Var> {
    let block = g.slice(diff, 1, start, len)?;
    let sq = g.mul(block, block)?;
    g.mean(sq)
}

/// Per-block mean squared errors `(gen, ret)` of `pred` against `x1`, both `[T, D]`.
pub fn flow_loss_terms(g: &mut Graph, pred: Var, x1: Var, layout: &FeatureLayout) -> Result<(Var, Var)> {
    let shape = g.shape(pred).to_vec();
    if shape != g.shape(x1) || shape.len() != 2 || shape[1] != layout.dim() {
        return Err(Error::shape(
            "flow_loss",
            format!("pred {:?}, target {:?}, layout D = {}", shape, g.shape(x1), layout.dim()),
        ));
    }
    let diff = g.sub(pred, x1)?;
    let gen = block_mse(g, diff, 0, layout.d_gen())?;
    let ret = block_mse(g, diff, layout.d_gen(), layout.d_ret())?;
    Ok((gen, ret))
}

/// `λ_gen·mean_gen + λ_ret·mean_ret`, each mean over its own block.
pub fn flow_loss(g: &mut Graph, pred: Var, x1: Var, layout: &FeatureLayout, lambda_gen: f64, lambda_ret: f64) -> Result<Var> {
    let (gen, ret) = flow_loss_terms(g, pred, x1, layout)?;
    let a = g.scale(gen, lambda_gen)?;
    let b = g.scale(ret, lambda_ret)?;
    g.add(a, b)
}

/// Plain-tensor version of [`flow_loss`].
pub fn flow_loss_value(pred: &Tensor, x1: &Tensor, layout: &FeatureLayout, lambda_gen: f64, lambda_ret: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(x1.clone());
    let l = flow_loss(&mut g, p, t, layout, lambda_gen, lambda_ret)?;
    Ok(g.value(l).item())
}

/// Two-stage dropout: both conditions with `p_both`, otherwise the prompt
/// alone with `p_text`. Always consumes three uniforms.
pub fn drop_conditions(cond: &ConditionSet, rng: &mut dyn RngCore, p_both: f64, p_text: f64) -> ConditionSet {
    drop_conditions_with_skeleton(cond, rng, p_both, p_text, 0.0)
}

/// [`drop_conditions`] followed, when nothing was dropped, by skeleton-only
/// dropout with `p_skel`. Always consumes three uniforms.
pub fn drop_conditions_with_skeleton(
    cond: &ConditionSet,
    rng: &mut dyn RngCore,
    p_both: f64,
    p_text: f64,
    p_skel: f64,
) -> ConditionSet {
    let (u_both, u_text, u_skel): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    if u_both < p_both {
        ConditionSet::dropped()
    } else if u_text < p_text {
        cond.skeleton_only()
    } else if u_skel < p_skel {
        cond.text_only()
    } else {
        cond.clone()
    }
}

/// Anything that predicts the clean endpoint `x̂1` in normalized feature space.
pub trait Denoiser {
    fn predict_clean(&self, x: &Tensor, tau: f64, cond: &ConditionSet) -> Result<Tensor>;
}

/// Guided velocity `(1 − Σw)·v_u + w_text·v_text + w_skel·v_skel + w_both·v_both`.
///
/// Branches with a zero coefficient are never evaluated.
pub fn cfg_velocity<D: Denoiser + ?Sized>(
    den: &D,
    x: &Tensor,
    tau: f64,
    cond: &ConditionSet,
    w: &GuidanceWeights,
    tau_clamp: f64,
) -> Result<Tensor> {
    w.validate()?;
    let branches = [
        (1.0 - (w.text + w.skel + w.both), ConditionSet::dropped()),
        (w.text, cond.text_only()),
        (w.skel, cond.skeleton_only()),
        (w.both, cond.clone()),
    ];
    let mut acc: Option<Tensor> = None;
    for (coef, c) in branches {
        if coef == 0.0 {
            continue;
        }
        let pred = den.predict_clean(x, tau, &c)?;
        let v = pred_to_velocity(&pred, x, tau, tau_clamp)?;
        match acc.as_mut() {
            None => acc = Some(v.scale(coef)),
            Some(a) => a.axpy(coef, &v)?,
        }
    }
    // the coefficients sum to one, so at least one is nonzero
    let v = acc.expect("guidance coefficients sum to one");
    v.check_finite(|| format!("guided velocity at τ = {tau}"))?;
    Ok(v)
}

/// Trained network plus the normalization it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub norm: NormStats,
}

impl Denoiser for FlowModel {
    fn predict_clean(&self, x: &Tensor, tau: f64, cond: &ConditionSet) -> Result<Tensor> {
        model::predict(&self.params, &self.config, x, tau, cond)
    }
}

impl FlowModel {
    pub fn layout(&self) -> Result<FeatureLayout> {
        FeatureLayout::new(self.config.joints)
    }

    /// Model-ready condition from a prompt and a raw skeleton.
    pub fn condition(&self, codec: &FeatureCodec, prompt: Option<PromptTokens>, skel: &Skeleton) -> Result<ConditionSet> {
        let raw = codec.skeleton_condition(skel)?;
        let s = self.norm.apply_condition(codec.layout(), &raw)?;
        Ok(ConditionSet::new(prompt, Some(s)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self
            .params
            .iter()
            .chain([(NormStats::MEAN_KEY, self.norm.mean()), (NormStats::STD_KEY, self.norm.std())]);
        save_tensors(path, entries)
    }

    pub fn load(path: &Path, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (mut mean, mut std) = (None, None);
        for (name, t) in load_tensors(path)? {
            match name.as_str() {
                NormStats::MEAN_KEY => mean = Some(t),
                NormStats::STD_KEY => std = Some(t),
                _ => params.insert(name, t),
            }
        }
        let (Some(mean), Some(std)) = (mean, std) else {
            return Err(Error::Checkpoint(format!("{} lacks normalization statistics", path.display())));
        };
        let fresh = model::init_params(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in fresh.iter() {
            let got = params.get(name).map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != fresh.len() {
            return Err(Error::Checkpoint("checkpoint has parameters the config does not define".into()));
        }
        params.set_requires_grad(false);
        Ok(Self {
            config,
            params,
            norm: NormStats::from_tensors(mean, std)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub frames: usize,
    pub steps: usize,
    pub weights: GuidanceWeights,
    pub seed: u64,
    pub tau_clamp: f64,
}

impl SampleOptions {
    pub fn new(frames: usize, seed: u64) -> Self {
        Self {
            frames,
            steps: 100,
            weights: GuidanceWeights::GENERATION,
            seed,
            tau_clamp: 1e-3,
        }
    }
}

/// Integrates the guided field from seeded noise; returns normalized features.
pub fn sample_normalized<D: Denoiser + ?Sized>(den: &D, dim: usize, cond: &ConditionSet, opts: &SampleOptions) -> Result<Tensor> {
    if opts.steps == 0 || opts.frames < 2 {
        return Err(Error::invalid("sampling needs at least one step and two frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x0 = Tensor::randn(vec![opts.frames, dim], 1.0, &mut rng);
    rk4_integrate(
        |x, tau| cfg_velocity(den, x, tau, cond, &opts.weights, opts.tau_clamp),
        &x0,
        0.0,
        1.0 - opts.tau_clamp,
        opts.steps,
    )
}

/// Generates a clip for `skel`. Returns denormalized features and the FK decode.
pub fn sample(
    model: &FlowModel,
    codec: &FeatureCodec,
    prompt: Option<PromptTokens>,
    skel: &Skeleton,
    opts: &SampleOptions,
) -> Result<(Tensor, MotionClip)> {
    let cond = model.condition(codec, prompt, skel)?;
    let x = sample_normalized(model, codec.layout().dim(), &cond, opts)?;
    let feat = model.norm.invert(&x)?;
    let clip = codec.decode_fk(&feat, skel)?;
    Ok((feat, clip))
}

/// One training sequence with its (unnormalized) conditions.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub features: Tensor,
    pub prompt: PromptTokens,
    pub condition: Tensor,
}

impl From<&Sample> for TrainExample {
    fn from(s: &Sample) -> Self {
        Self {
            features: s.features.clone(),
            prompt: s.prompt.clone(),
            condition: s.condition.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss_gen: f64,
    pub loss_ret: f64,
    /// Weighted total.
    pub loss: f64,
}

pub struct TrainOutcome {
    pub model: FlowModel,
    pub curve: Vec<StepRecord>,
}

struct AdamW {
    lr: f64,
    wd: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    fn new(params: &ParamStore, lr: f64, wd: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            wd,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, (_, p)) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + self.wd * *w);
            }
        }
    }
}

fn is_numeric_blowup(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// Trains a fresh model on `examples`; `observe` sees every step after the update.
pub fn train(
    examples: &[TrainExample],
    layout: &FeatureLayout,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&StepRecord, &FlowModel) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("training needs at least one example"));
    }
    if model_cfg.joints != layout.joints() {
        return Err(Error::invalid(format!(
            "model has {} joints, data layout {}",
            model_cfg.joints,
            layout.joints()
        )));
    }
    let seqs: Vec<Tensor> = examples.iter().map(|e| e.features.clone()).collect();
    let norm = NormStats::fit(&seqs, layout)?;
    let data: Vec<(Tensor, ConditionSet)> = examples
        .iter()
        .map(|e| {
            let x1 = norm.apply(&e.features)?;
            let s = norm.apply_condition(layout, &e.condition)?;
            Ok((x1, ConditionSet::new(Some(e.prompt.clone()), Some(s))))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model::init_params(model_cfg, &mut rng)?;
    let mut opt = AdamW::new(&params, cfg.lr, cfg.weight_decay);
    let per_epoch = data.len().div_ceil(cfg.batch);
    let total = (cfg.epochs * per_epoch).min(cfg.max_steps.unwrap_or(usize::MAX));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(total);
    let mut current = FlowModel {
        config: model_cfg.clone(),
        params: params.clone(),
        norm: norm.clone(),
    };

    for step in 0..total {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let last_good = params.clone();
        let diverged = || Error::Diverged {
            step,
            last_good: Box::new(last_good.clone()),
        };
        params.set_requires_grad(true);
        let mut grads: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let (mut sum_gen, mut sum_ret) = (0.0, 0.0);
        let inv = 1.0 / batch.len() as f64;
        for &i in &batch {
            let (x1, cond) = &data[i];
            let tau: f64 = rng.random();
            let x0 = Tensor::randn(x1.shape().to_vec(), 1.0, &mut rng);
            let xt = interpolate(&x0, x1, tau)?;
            let c = drop_conditions_with_skeleton(cond, &mut rng, cfg.p_both, cfg.p_text, cfg.p_skel);
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let xv = g.constant(xt);
            let pred = match model::forward(&mut g, &bound, model_cfg, xv, tau, &c, Some(&mut rng)) {
                Err(e) if is_numeric_blowup(&e) => return Err(diverged()),
                other => other?,
            };
            let target = g.constant(x1.clone());
            let (gen, ret) = flow_loss_terms(&mut g, pred, target, layout)?;
            let a = g.scale(gen, cfg.lambda_gen)?;
            let b = g.scale(ret, cfg.lambda_ret)?;
            let loss = g.add(a, b)?;
            if !g.value(loss).item().is_finite() {
                return Err(diverged());
            }
            sum_gen += g.value(gen).item();
            sum_ret += g.value(ret).item();
            let mut gr = match g.backward(loss) {
                Err(e) if is_numeric_blowup(&e) => return Err(diverged()),
                other => other?,
            };
            for (k, (_, v)) in bound.iter().enumerate() {
                if let Some(t) = gr.take(v) {
                    for (acc, d) in grads[k].iter_mut().zip(t.data()) {
                        *acc += inv * d;
                    }
                }
            }
        }
        params.set_requires_grad(false);
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(diverged());
        }
        if cfg.cosine_decay {
            opt.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
        }
        opt.step(&mut params, &grads);
        if params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(diverged());
        }
        let rec = StepRecord {
            step,
            loss_gen: sum_gen * inv,
            loss_ret: sum_ret * inv,
            loss: (cfg.lambda_gen * sum_gen + cfg.lambda_ret * sum_ret) * inv,
        };
        curve.push(rec);
        current.params = params.clone();
        observe(&rec, &current)?;
    }
    Ok(TrainOutcome { model: current, curve })
}

/// Trains on the dataset's train split.
pub fn train_on_dataset(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&StepRecord, &FlowModel) -> Result<()>,
) -> Result<TrainOutcome> {
    let examples: Vec<TrainExample> = ds.train_samples().map(TrainExample::from).collect();
    train(&examples, ds.codec.layout(), model_cfg, cfg, observe)
}

/// Writes `step,loss_gen,loss_ret`.
pub fn write_loss_csv(curve: &[StepRecord], out: &mut dyn std::io::Write) -> std::io::Result<()> {
    writeln!(out, "step,loss_gen,loss_ret")?;
    for r in curve {
        writeln!(out, "{},{},{}", r.step, r.loss_gen, r.loss_ret)?;
    }
    Ok(())
}

/// Conditional flow loss of `model` on `examples`, averaged over a fixed τ grid
/// and seeded noise, with no condition dropout.
pub fn evaluate_flow_loss(model: &FlowModel, examples: &[TrainExample], taus: &[f64], seed: u64, lambda: (f64, f64)) -> Result<f64> {
    let layout = model.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut n = 0;
    for e in examples {
        let x1 = model.norm.apply(&e.features)?;
        let s = model.norm.apply_condition(&layout, &e.condition)?;
        let cond = ConditionSet::new(Some(e.prompt.clone()), Some(s));
        for &tau in taus {
            let x0 = Tensor::randn(x1.shape().to_vec(), 1.0, &mut rng);
            let xt = interpolate(&x0, &x1, tau)?;
            let pred = model.predict_clean(&xt, tau, &cond)?;
            total += flow_loss_value(&pred, &x1, &layout, lambda.0, lambda.1)?;
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Finite-difference check of the full flow loss for `model_cfg` on `frames` frames.
///
/// Every parameter is redrawn at random first: with the zero-initialized
/// gates and head most gradients would be exactly zero.
pub fn gradient_check(model_cfg: &ModelConfig, frames: usize, seed: u64, eps: f64, opts: &GradCheckOptions) -> Result<GradReport> {
    model_cfg.validate()?;
    let layout = FeatureLayout::new(model_cfg.joints)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model::random_params(model_cfg, &mut rng)?;
    let x1 = Tensor::randn(vec![frames, layout.dim()], 1.0, &mut rng);
    let x0 = Tensor::randn(vec![frames, layout.dim()], 1.0, &mut rng);
    let tau: f64 = rng.random_range(0.1..0.9);
    let xt = interpolate(&x0, &x1, tau)?;
    let ids = (0..model_cfg.prompt_len)
        .map(|i| if i < model_cfg.prompt_len / 2 { rng.random_range(1..model_cfg.vocab_size as u32) } else { 0 })
        .collect();
    let cond = ConditionSet::new(
        Some(PromptTokens::new(ids)?),
        Some(Tensor::randn(vec![model_cfg.cond_dim()], 1.0, &mut rng)),
    );
    finite_diff_check(&params, eps, opts, |g, b| {
        let x = g.constant(xt.clone());
        let pred = model::forward(g, b, model_cfg, x, tau, &cond, None)?;
        let target = g.constant(x1.clone());
        flow_loss(g, pred, target, &layout, 1.0, 1.0)
    })
}
