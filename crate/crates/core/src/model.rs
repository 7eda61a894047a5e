//! Per-joint-token transformer that predicts the clean sample `x̂₁` from a
//! noisy feature sequence, the flow time and a text/skeleton condition.
//!
//! Each frame is projected to `D_h` channels and viewed as `J` joint tokens
//! of width `d = D_h / J`. A layer runs, in order: joint self-attention
//! (within a frame, rotary over the joint index), joint-level text
//! cross-attention, frame self-attention over `D_h`-wide frame tokens
//! (rotary over time), frame-level text cross-attention, and a SwiGLU
//! feed-forward. Every branch is pre-normalized, modulated by
//! `(shift, scale)` and multiplied by a gate, all produced from the condition
//! vector `c`. Gates and the output head start at zero, so a fresh model
//! maps everything to zero.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureLayout;
use crate::numerics::{sinusoidal_embedding, BoundParams, Graph, ParamStore, Tensor, Var};
use crate::synthdata::{self, PromptTokens, PAD, PROMPT_LEN};

const LN_EPS: f64 = 1e-6;
const TIME_SCALE: f64 = 1000.0;
const TIME_MAX_PERIOD: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub joints: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub frame_heads: usize,
    pub joint_heads: usize,
    pub ff_ratio: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub text_dim: usize,
    pub prompt_len: usize,
    pub rope_base: f64,
    /// Exclude padding tokens from text cross-attention.
    pub mask_padding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 16 joints, `D_h = 128`, 4 layers, 4 frame heads.
    pub fn desk() -> Self {
        Self::for_joints(16, 128, 4, 4)
    }

    /// 24 joints, `D_h = 432`, 12 layers, 12 frame heads.
    pub fn paper() -> Self {
        Self {
            text_dim: 128,
            ..Self::for_joints(24, 432, 12, 12)
        }
    }

    /// Small configuration used by the gradient check: 4 joints, `D_h = 48`, 2 layers.
    pub fn gradcheck() -> Self {
        Self {
            text_dim: 16,
            ..Self::for_joints(4, 48, 2, 4)
        }
    }

    pub fn for_joints(joints: usize, hidden: usize, layers: usize, frame_heads: usize) -> Self {
        Self {
            joints,
            feature_dim: FeatureLayout::new(joints.max(1)).map(|l| l.dim()).unwrap_or(0),
            hidden,
            layers,
            frame_heads,
            joint_heads: 1,
            ff_ratio: 3,
            dropout: 0.1,
            vocab_size: synthdata::vocab_size(),
            text_dim: 64,
            prompt_len: PROMPT_LEN,
            rope_base: 10_000.0,
            mask_padding: false,
        }
    }

    pub fn joint_width(&self) -> usize {
        self.hidden / self.joints
    }

    pub fn cond_dim(&self) -> usize {
        12 * self.joints
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("model config: {m}")));
        if self.joints == 0 || self.hidden == 0 || self.layers == 0 {
            return bad("joints, hidden and layers must be positive".into());
        }
        if self.hidden % self.joints != 0 {
            return bad(format!("hidden {} not divisible by {} joints", self.hidden, self.joints));
        }
        let d = self.joint_width();
        if self.joint_heads == 0 || d % self.joint_heads != 0 || (d / self.joint_heads) % 2 != 0 {
            return bad(format!("joint width {d} must split into even-width heads ({})", self.joint_heads));
        }
        if self.frame_heads == 0
            || self.hidden % self.frame_heads != 0
            || (self.hidden / self.frame_heads) % 2 != 0
        {
            return bad(format!(
                "hidden {} must split into {} even-width frame heads",
                self.hidden, self.frame_heads
            ));
        }
        let expected = FeatureLayout::new(self.joints)?.dim();
        if self.feature_dim != expected {
            return bad(format!("feature_dim {} but {} joints need {expected}", self.feature_dim, self.joints));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ff_ratio == 0 || self.vocab_size == 0 || self.text_dim == 0 || self.prompt_len == 0 {
            return bad("ff_ratio, vocab_size, text_dim and prompt_len must be positive".into());
        }
        Ok(())
    }
}

/// Text and skeleton condition; `None` is the dropped state.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConditionSet {
    pub prompt: Option<PromptTokens>,
    /// Normalized skeleton condition of length `12·J`.
    pub skeleton: Option<Tensor>,
}

impl ConditionSet {
    pub fn new(prompt: Option<PromptTokens>, skeleton: Option<Tensor>) -> Self {
        Self { prompt, skeleton }
    }

    pub fn dropped() -> Self {
        Self::default()
    }

    pub fn text_only(&self) -> Self {
        Self::new(self.prompt.clone(), None)
    }

    pub fn skeleton_only(&self) -> Self {
        Self::new(None, self.skeleton.clone())
    }

    /// Token ids with the dropped prompt as all padding.
    pub fn token_ids(&self, cfg: &ModelConfig) -> Result<Vec<usize>> {
        match &self.prompt {
            None => Ok(vec![PAD as usize; cfg.prompt_len]),
            Some(p) => {
                if p.len() != cfg.prompt_len {
                    return Err(Error::shape(
                        "ConditionSet",
                        format!("prompt has {} tokens, model expects {}", p.len(), cfg.prompt_len),
                    ));
                }
                if let Some(&bad) = p.ids().iter().find(|&&i| i as usize >= cfg.vocab_size) {
                    return Err(Error::invalid(format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
                }
                Ok(p.ids().iter().map(|&i| i as usize).collect())
            }
        }
    }

    /// Skeleton vector with the dropped state as zeros.
    pub fn skeleton_vector(&self, cfg: &ModelConfig) -> Result<Tensor> {
        match &self.skeleton {
            None => Ok(Tensor::zeros(vec![cfg.cond_dim()])),
            Some(s) => {
                if s.shape() != [cfg.cond_dim()] {
                    return Err(Error::shape(
                        "ConditionSet",
                        format!("skeleton condition {:?}, expected [{}]", s.shape(), cfg.cond_dim()),
                    ));
                }
                Ok(s.clone())
            }
        }
    }
}

const BRANCHES: [&str; 5] = ["jattn", "jtext", "fattn", "ftext", "ffn"];

fn normal(shape: Vec<usize>, std: f64, rng: &mut dyn RngCore) -> Tensor {
    Tensor::randn(shape, std, rng)
}

fn dense(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut dyn RngCore) {
    store.insert(
        format!("{name}.w"),
        normal(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
    );
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
    }
}

/// AdaLN projection producing `(shift, scale, gate)` for `width` channels;
/// the gate columns start at zero.
fn modulation(store: &mut ParamStore, name: &str, hidden: usize, width: usize, gated: bool, rng: &mut dyn RngCore) {
    let parts = if gated { 3 } else { 2 };
    let std = 0.02;
    let mut w = Tensor::zeros(vec![hidden, parts * width]);
    for r in 0..hidden {
        for c in 0..2 * width {
            w.row_mut(r)[c] = std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    store.insert(format!("{name}.mod.w"), w);
    store.insert(format!("{name}.mod.b"), Tensor::zeros(vec![parts * width]));
}

/// Fresh parameters. The output head and every gate are zero.
pub fn init_params(cfg: &ModelConfig, rng: &mut dyn RngCore) -> Result<ParamStore> {
    cfg.validate()?;
    let (dh, d, dd) = (cfg.hidden, cfg.joint_width(), cfg.feature_dim);
    let mut p = ParamStore::new();
    dense(&mut p, "in", dd, dh, true, rng);
    dense(&mut p, "time.l1", dh, dh, true, rng);
    dense(&mut p, "time.l2", dh, dh, true, rng);
    dense(&mut p, "skel.l1", cfg.cond_dim(), dh, true, rng);
    dense(&mut p, "skel.l2", dh, dh, true, rng);
    dense(&mut p, "merge.l1", dh, dh, true, rng);
    dense(&mut p, "merge.l2", dh, dh, true, rng);
    p.insert("text.emb", normal(vec![cfg.vocab_size, cfg.text_dim], 1.0, rng));
    dense(&mut p, "text.frm", cfg.text_dim, dh, true, rng);
    dense(&mut p, "text.jnt", cfg.text_dim, d, true, rng);
    for i in 0..cfg.layers {
        for (branch, width) in [("jattn", d), ("jtext", d), ("fattn", dh), ("ftext", dh)] {
            let name = format!("layers.{i}.{branch}");
            modulation(&mut p, &name, dh, dh, true, rng);
            for proj in ["q", "k", "v"] {
                dense(&mut p, &format!("{name}.{proj}"), width, width, false, rng);
            }
            dense(&mut p, &format!("{name}.o"), width, width, true, rng);
        }
        let name = format!("layers.{i}.ffn");
        modulation(&mut p, &name, dh, dh, true, rng);
        dense(&mut p, &format!("{name}.w1"), dh, cfg.ff_ratio * dh, false, rng);
        dense(&mut p, &format!("{name}.w3"), dh, cfg.ff_ratio * dh, false, rng);
        dense(&mut p, &format!("{name}.w2"), cfg.ff_ratio * dh, dh, true, rng);
    }
    modulation(&mut p, "final", dh, dh, false, rng);
    p.insert("out.w", Tensor::zeros(vec![dh, dd]));
    p.insert("out.b", Tensor::zeros(vec![dd]));
    Ok(p)
}

/// Dropout masks drawn from `rng` when training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

fn dropout(g: &mut Graph, x: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
    let Some(dr) = drop.as_mut() else { return Ok(x) };
    if dr.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - dr.rate;
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if dr.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

struct Ctx<'p, 'd> {
    cfg: &'p ModelConfig,
    p: &'p BoundParams,
    drop: Option<Dropout<'d>>,
}

impl Ctx<'_, '_> {
    fn w(&self, name: &str) -> Result<Var> {
        self.p.get(name)
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str, bias: bool) -> Result<Var> {
        let y = g.matmul(x, self.w(&format!("{name}.w"))?)?;
        if bias {
            g.add_bcast(y, self.w(&format!("{name}.b"))?)
        } else {
            Ok(y)
        }
    }

    fn mlp(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(g, x, &format!("{name}.l1"), true)?;
        let h = g.silu(h)?;
        self.linear(g, h, &format!("{name}.l2"), true)
    }

    /// `(shift, scale, gate)` slices of one modulation, each `[width]`-shaped
    /// (`shape` gives the per-token view).
    fn modulation(&self, g: &mut Graph, c_act: Var, name: &str, parts: usize, shape: &[usize]) -> Result<Vec<Var>> {
        let m = self.linear(g, c_act, &format!("{name}.mod"), true)?;
        let width = self.cfg.hidden;
        (0..parts)
            .map(|i| {
                let s = g.slice(m, 1, i * width, width)?;
                g.reshape(s, shape)
            })
            .collect()
    }
}

fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS)?;
    let s = g.mul_bcast(n, scale)?;
    let y = g.add(s, n)?;
    g.add_bcast(y, shift)
}

fn padding_mask(cfg: &ModelConfig, ids: &[usize]) -> Option<Tensor> {
    if !cfg.mask_padding {
        return None;
    }
    Some(Tensor::from_vec(
        ids.iter()
            .map(|&i| if i == PAD as usize { -1e9 } else { 0.0 })
            .collect(),
    ))
}

/// Projects `[T, D]` features to `[T, J, d]` joint tokens.
pub fn tokenize_joints(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.feature_dim {
        return Err(Error::shape(
            "tokenize_joints",
            format!("expected [T, {}], got {shape:?}", cfg.feature_dim),
        ));
    }
    let h = g.matmul(x, p.get("in.w")?)?;
    let h = g.add_bcast(h, p.get("in.b")?)?;
    g.reshape(h, &[shape[0], cfg.joints, cfg.joint_width()])
}

/// Condition vector `c = φ(MLP_t(emb(τ)) + MLP_s(S))`, shape `[1, D_h]`.
pub fn condition_embed(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, tau: f64, skel: &Tensor) -> Result<Var> {
    let ctx = Ctx { cfg, p, drop: None };
    embed_condition(&ctx, g, tau, skel)
}

fn embed_condition(ctx: &Ctx, g: &mut Graph, tau: f64, skel: &Tensor) -> Result<Var> {
    let cfg = ctx.cfg;
    if !tau.is_finite() {
        return Err(Error::invalid(format!("flow time must be finite, got {tau}")));
    }
    let emb = sinusoidal_embedding(tau * TIME_SCALE, cfg.hidden, TIME_MAX_PERIOD).reshaped(vec![1, cfg.hidden])?;
    let emb = g.constant(emb);
    let t = ctx.mlp(g, emb, "time")?;
    let s = g.constant(skel.reshaped(vec![1, cfg.cond_dim()])?);
    let s = ctx.mlp(g, s, "skel")?;
    let sum = g.add(t, s)?;
    ctx.mlp(g, sum, "merge")
}

/// Single-head attention of `q [.., Nq, w]` over `k, v` (same batch dims or rank 2).
fn attend(ctx: &mut Ctx, g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var> {
    let w = *g.shape(q).last().unwrap();
    let logits = g.matmul_t(q, k)?;
    let logits = g.scale(logits, 1.0 / (w as f64).sqrt())?;
    let logits = match mask {
        Some(m) => {
            let m = g.constant(m.clone());
            g.add_bcast(logits, m)?
        }
        None => logits,
    };
    let axis = g.shape(logits).len() - 1;
    let a = g.softmax(logits, axis)?;
    let a = dropout(g, a, &mut ctx.drop)?;
    g.matmul(a, v)
}

/// `[N, H·w]` → `[H, N, w]`
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], heads, s[1] / heads])?;
    g.permute(r, &[1, 0, 2])
}

/// `[H, N, w]` → `[N, H·w]`
fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.permute(x, &[1, 0, 2])?;
    g.reshape(r, &[s[1], s[0] * s[2]])
}

struct TextEmbedding {
    frame: Var,
    joint: Var,
    mask: Option<Tensor>,
}

fn gated_residual(g: &mut Graph, h: Var, branch: Var, gate: Var) -> Result<Var> {
    let gb = g.mul_bcast(branch, gate)?;
    g.add(h, gb)
}

/// Joint self-attention within each frame. `h` is `[T, J, d]`.
fn joint_attention(ctx: &mut Ctx, g: &mut Graph, h: Var, c_act: Var, layer: usize) -> Result<Var> {
    let cfg = ctx.cfg;
    let (j, d) = (cfg.joints, cfg.joint_width());
    let name = format!("layers.{layer}.jattn");
    let m = ctx.modulation(g, c_act, &name, 3, &[j, d])?;
    let x = modulate(g, h, m[0], m[1])?;
    let q = ctx.linear(g, x, &format!("{name}.q"), false)?;
    let k = ctx.linear(g, x, &format!("{name}.k"), false)?;
    let v = ctx.linear(g, x, &format!("{name}.v"), false)?;
    let q = g.rope(q, cfg.rope_base)?;
    let k = g.rope(k, cfg.rope_base)?;
    let a = attend(ctx, g, q, k, v, None)?;
    let o = ctx.linear(g, a, &format!("{name}.o"), true)?;
    gated_residual(g, h, o, m[2])
}

/// Joint tokens query the joint-level text embedding.
fn joint_text(ctx: &mut Ctx, g: &mut Graph, h: Var, c_act: Var, text: &TextEmbedding, layer: usize) -> Result<Var> {
    let cfg = ctx.cfg;
    let name = format!("layers.{layer}.jtext");
    let m = ctx.modulation(g, c_act, &name, 3, &[cfg.joints, cfg.joint_width()])?;
    let x = modulate(g, h, m[0], m[1])?;
    let q = ctx.linear(g, x, &format!("{name}.q"), false)?;
    let k = ctx.linear(g, text.joint, &format!("{name}.k"), false)?;
    let v = ctx.linear(g, text.joint, &format!("{name}.v"), false)?;
    let a = attend(ctx, g, q, k, v, text.mask.as_ref())?;
    let o = ctx.linear(g, a, &format!("{name}.o"), true)?;
    gated_residual(g, h, o, m[2])
}

/// Multi-head attention of frame tokens `f [T, D_h]` over `kv [N, D_h]`.
fn frame_mha(ctx: &mut Ctx, g: &mut Graph, x: Var, kv: Var, name: &str, rope: bool, mask: Option<&Tensor>) -> Result<Var> {
    let heads = ctx.cfg.frame_heads;
    let q = ctx.linear(g, x, &format!("{name}.q"), false)?;
    let k = ctx.linear(g, kv, &format!("{name}.k"), false)?;
    let v = ctx.linear(g, kv, &format!("{name}.v"), false)?;
    let mut q = split_heads(g, q, heads)?;
    let mut k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    if rope {
        q = g.rope(q, ctx.cfg.rope_base)?;
        k = g.rope(k, ctx.cfg.rope_base)?;
    }
    let a = attend(ctx, g, q, k, v, mask)?;
    let a = merge_heads(g, a)?;
    ctx.linear(g, a, &format!("{name}.o"), true)
}

fn frame_attention(ctx: &mut Ctx, g: &mut Graph, f: Var, c_act: Var, layer: usize) -> Result<Var> {
    let name = format!("layers.{layer}.fattn");
    let dh = ctx.cfg.hidden;
    let m = ctx.modulation(g, c_act, &name, 3, &[dh])?;
    let x = modulate(g, f, m[0], m[1])?;
    let o = frame_mha(ctx, g, x, x, &name, true, None)?;
    gated_residual(g, f, o, m[2])
}

fn frame_text(ctx: &mut Ctx, g: &mut Graph, f: Var, c_act: Var, text: &TextEmbedding, layer: usize) -> Result<Var> {
    let name = format!("layers.{layer}.ftext");
    let dh = ctx.cfg.hidden;
    let m = ctx.modulation(g, c_act, &name, 3, &[dh])?;
    let x = modulate(g, f, m[0], m[1])?;
    let o = frame_mha(ctx, g, x, text.frame, &name, false, text.mask.as_ref())?;
    gated_residual(g, f, o, m[2])
}

fn feed_forward(ctx: &mut Ctx, g: &mut Graph, f: Var, c_act: Var, layer: usize) -> Result<Var> {
    let name = format!("layers.{layer}.ffn");
    let dh = ctx.cfg.hidden;
    let m = ctx.modulation(g, c_act, &name, 3, &[dh])?;
    let x = modulate(g, f, m[0], m[1])?;
    let a = ctx.linear(g, x, &format!("{name}.w1"), false)?;
    let b = ctx.linear(g, x, &format!("{name}.w3"), false)?;
    let a = g.silu(a)?;
    let hdn = g.mul(a, b)?;
    let hdn = dropout(g, hdn, &mut ctx.drop)?;
    let o = ctx.linear(g, hdn, &format!("{name}.w2"), true)?;
    gated_residual(g, f, o, m[2])
}

fn embed_text(ctx: &Ctx, g: &mut Graph, ids: &[usize]) -> Result<TextEmbedding> {
    let e = g.gather_rows(ctx.w("text.emb")?, ids)?;
    Ok(TextEmbedding {
        frame: ctx.linear(g, e, "text.frm", true)?,
        joint: ctx.linear(g, e, "text.jnt", true)?,
        mask: padding_mask(ctx.cfg, ids),
    })
}

fn layer(ctx: &mut Ctx, g: &mut Graph, h: Var, c_act: Var, text: &TextEmbedding, i: usize) -> Result<Var> {
    let cfg = ctx.cfg;
    let t = g.shape(h)[0];
    let all_pad_masked = text.mask.as_ref().is_some_and(|m| m.data().iter().all(|&v| v < 0.0));
    let h = joint_attention(ctx, g, h, c_act, i)?;
    let h = if all_pad_masked { h } else { joint_text(ctx, g, h, c_act, text, i)? };
    let f = g.reshape(h, &[t, cfg.hidden])?;
    let f = frame_attention(ctx, g, f, c_act, i)?;
    let f = if all_pad_masked { f } else { frame_text(ctx, g, f, c_act, text, i)? };
    let f = feed_forward(ctx, g, f, c_act, i)?;
    g.reshape(f, &[t, cfg.joints, cfg.joint_width()])
}

/// Predicts `x̂₁` (`[T, D]`) from `x` (`[T, D]`). Pass `dropout` only while training.
pub fn forward(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    x: Var,
    tau: f64,
    cond: &ConditionSet,
    dropout: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let ids = cond.token_ids(cfg)?;
    let skel = cond.skeleton_vector(cfg)?;
    let mut ctx = Ctx {
        cfg,
        p,
        drop: dropout.map(|rng| Dropout { rate: cfg.dropout, rng }),
    };
    let h = tokenize_joints(g, p, cfg, x)?;
    let c = embed_condition(&ctx, g, tau, &skel).map_err(|e| e.within("condition embedding"))?;
    let c_act = g.silu(c)?;
    let text = embed_text(&ctx, g, &ids).map_err(|e| e.within("text embedding"))?;
    let mut h = h;
    for i in 0..cfg.layers {
        h = layer(&mut ctx, g, h, c_act, &text, i).map_err(|e| e.within(&format!("layer {i}")))?;
    }
    let m = ctx.modulation(g, c_act, "final", 2, &[cfg.joints, cfg.joint_width()])?;
    let y = modulate(g, h, m[0], m[1]).map_err(|e| e.within("final norm"))?;
    let t = g.shape(y)[0];
    let y = g.reshape(y, &[t, cfg.hidden])?;
    ctx.linear(g, y, "out", true).map_err(|e| e.within("output head"))
}

/// Layer `layer`'s joint self-attention sublayer (with its gated residual)
/// applied to joint tokens `h` (`[T, J, d]`), in inference mode.
pub fn joint_attention_sublayer(
    params: &ParamStore,
    cfg: &ModelConfig,
    h: &Tensor,
    tau: f64,
    cond: &ConditionSet,
    layer: usize,
) -> Result<Tensor> {
    if layer >= cfg.layers {
        return Err(Error::invalid(format!("layer {layer} of {}", cfg.layers)));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let mut ctx = Ctx { cfg, p: &p, drop: None };
    let skel = cond.skeleton_vector(cfg)?;
    let c = embed_condition(&ctx, &mut g, tau, &skel)?;
    let c_act = g.silu(c)?;
    let hv = g.constant(h.clone());
    let out = joint_attention(&mut ctx, &mut g, hv, c_act, layer)?;
    Ok(g.value(out).clone())
}

/// Parameters with every entry drawn at random, including the gates and the
/// output head that `init_params` zeroes, so that no branch is switched off.
/// Meant for gradient checks and structural tests.
pub fn random_params(cfg: &ModelConfig, rng: &mut dyn RngCore) -> Result<ParamStore> {
    let mut p = init_params(cfg, rng)?;
    for (name, t) in p.iter_mut() {
        let std = match t.rank() {
            _ if name == "text.emb" => 1.0,
            2 => 1.0 / (t.shape()[0] as f64).sqrt(),
            _ => 0.3,
        };
        *t = normal(t.shape().to_vec(), std, rng);
    }
    Ok(p)
}

/// Inference-mode forward on plain tensors.
pub fn predict(params: &ParamStore, cfg: &ModelConfig, x: &Tensor, tau: f64, cond: &ConditionSet) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let xv = g.constant(x.clone());
    let out = forward(&mut g, &bound, cfg, xv, tau, cond, None)?;
    Ok(g.value(out).clone())
}

/// Names of the AdaLN gate parameters are not separate tensors; this lists
/// the modulation projections whose last third holds the gates.
pub fn gated_modulations(cfg: &ModelConfig) -> Vec<String> {
    (0..cfg.layers)
        .flat_map(|i| BRANCHES.iter().map(move |b| format!("layers.{i}.{b}.mod")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            text_dim: 8,
            prompt_len: 4,
            ..ModelConfig::for_joints(4, 16, 2, 2)
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randomized(cfg: &ModelConfig, seed: u64) -> ParamStore {
        random_params(cfg, &mut rng(seed)).unwrap()
    }

    fn cond(cfg: &ModelConfig, seed: u64) -> ConditionSet {
        let mut r = rng(seed);
        let ids = (0..cfg.prompt_len).map(|i| if i < 3 { r.random_range(1..cfg.vocab_size as u32) } else { 0 }).collect();
        ConditionSet::new(
            Some(PromptTokens::new(ids).unwrap()),
            Some(Tensor::randn(vec![cfg.cond_dim()], 1.0, &mut r)),
        )
    }

    #[test]
    fn joint_width_examples() {
        let full = ModelConfig::paper();
        assert_eq!((full.joint_width(), full.feature_dim), (18, 584));
        full.validate().unwrap();
        let desk = ModelConfig::desk();
        assert_eq!((desk.joint_width(), desk.feature_dim), (8, 392));
        desk.validate().unwrap();
        assert!(ModelConfig { hidden: 130, ..desk.clone() }.validate().is_err());
        assert!(ModelConfig { frame_heads: 3, ..desk }.validate().is_err());
    }

    #[test]
    fn identity_projection_tokenizes_contiguous_slices() {
        let cfg = ModelConfig { hidden: 56, ..ModelConfig::for_joints(2, 56, 1, 2) };
        assert_eq!(cfg.feature_dim, 56);
        let mut p = init_params(&cfg, &mut rng(0)).unwrap();
        let mut eye = Tensor::zeros(vec![56, 56]);
        for i in 0..56 {
            eye.row_mut(i)[i] = 1.0;
        }
        *p.get_mut("in.w").unwrap() = eye;
        let x = Tensor::randn(vec![3, 56], 1.0, &mut rng(1));
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let xv = g.constant(x.clone());
        let tok = tokenize_joints(&mut g, &b, &cfg, xv).unwrap();
        assert_eq!(g.shape(tok), &[3, 2, 28]);
        assert_eq!(g.value(tok).data(), x.data());
        let bad = g.constant(Tensor::zeros(vec![3, 55]));
        assert!(tokenize_joints(&mut g, &b, &cfg, bad).is_err());
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let cfg = tiny();
        let p = init_params(&cfg, &mut rng(2)).unwrap();
        let x = Tensor::randn(vec![6, cfg.feature_dim], 1.0, &mut rng(3));
        let y = predict(&p, &cfg, &x, 0.4, &cond(&cfg, 4)).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_blocks_are_identity() {
        let cfg = tiny();
        let p = init_params(&cfg, &mut rng(5)).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let h0 = Tensor::randn(vec![5, cfg.joints, cfg.joint_width()], 1.0, &mut rng(6));
        let h = g.constant(h0.clone());
        let skel = Tensor::zeros(vec![cfg.cond_dim()]);
        let c = condition_embed(&mut g, &b, &cfg, 0.3, &skel).unwrap();
        let c_act = g.silu(c).unwrap();
        let mut ctx = Ctx { cfg: &cfg, p: &b, drop: None };
        let text = embed_text(&ctx, &mut g, &[1, 2, 0, 0]).unwrap();
        let out = layer(&mut ctx, &mut g, h, c_act, &text, 0).unwrap();
        assert_eq!(g.value(out).data(), h0.data());
    }

    #[test]
    fn single_joint_attention_weights_are_one() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::randn(vec![3, 1, 4], 1.0, &mut rng(9)));
        let k = g.constant(Tensor::randn(vec![3, 1, 4], 1.0, &mut rng(10)));
        let v = Tensor::randn(vec![3, 1, 4], 1.0, &mut rng(11));
        let vv = g.constant(v.clone());
        let cfg = tiny();
        let p = ParamStore::new();
        let b = p.bind(&mut g);
        let mut ctx = Ctx { cfg: &cfg, p: &b, drop: None };
        let out = attend(&mut ctx, &mut g, q, k, vv, None).unwrap();
        assert_eq!(g.value(out).data(), v.data());
    }

    #[test]
    fn frame_rope_logits_depend_on_offset_only() {
        let cfg = tiny();
        let p = randomized(&cfg, 12);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        // the same token at every frame makes logits a function of (i, j) through RoPE alone
        let row = Tensor::randn(vec![1, cfg.hidden], 1.0, &mut rng(13));
        let tiled = Tensor::new(vec![10, cfg.hidden], row.data().repeat(10)).unwrap();
        let x = g.constant(tiled);
        let ctx = Ctx { cfg: &cfg, p: &b, drop: None };
        let q = ctx.linear(&mut g, x, "layers.0.fattn.q", false).unwrap();
        let k = ctx.linear(&mut g, x, "layers.0.fattn.k", false).unwrap();
        let q = split_heads(&mut g, q, cfg.frame_heads).unwrap();
        let k = split_heads(&mut g, k, cfg.frame_heads).unwrap();
        let q = g.rope(q, cfg.rope_base).unwrap();
        let k = g.rope(k, cfg.rope_base).unwrap();
        let l = g.matmul_t(q, k).unwrap();
        let l = g.value(l);
        for (i, j, k) in [(0, 3, 4), (2, 1, 6), (5, 5, 3)] {
            for h in 0..cfg.frame_heads {
                let a = l.at(&[h, i, j]);
                let b = l.at(&[h, i + k, j + k]);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_all_padding_text_contributes_nothing() {
        let cfg = ModelConfig { mask_padding: true, ..tiny() };
        let p = randomized(&cfg, 14);
        let x = Tensor::randn(vec![4, cfg.feature_dim], 1.0, &mut rng(15));
        let skel = Tensor::randn(vec![cfg.cond_dim()], 1.0, &mut rng(16));
        let masked = predict(&p, &cfg, &x, 0.5, &ConditionSet::new(None, Some(skel.clone()))).unwrap();
        // zeroing every text projection and output must not change a masked, all-padding prompt
        let mut q = p.clone();
        for i in 0..cfg.layers {
            for br in ["jtext", "ftext"] {
                for n in ["o.w", "o.b"] {
                    let t = q.get_mut(&format!("layers.{i}.{br}.{n}")).unwrap();
                    *t = Tensor::zeros(t.shape().to_vec());
                }
            }
        }
        let zeroed = predict(&q, &cfg, &x, 0.5, &ConditionSet::new(None, Some(skel.clone()))).unwrap();
        assert_eq!(masked.data(), zeroed.data());
        // unmasked padding does contribute
        let open = ModelConfig { mask_padding: false, ..cfg.clone() };
        let a = predict(&p, &open, &x, 0.5, &ConditionSet::new(None, Some(skel.clone()))).unwrap();
        let b = predict(&q, &open, &x, 0.5, &ConditionSet::new(None, Some(skel))).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
    }

    #[test]
    fn condition_embedding_properties() {
        let cfg = tiny();
        let p = randomized(&cfg, 17);
        let embed = |tau: f64, s: &Tensor| {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let c = condition_embed(&mut g, &b, &cfg, tau, s).unwrap();
            g.value(c).clone()
        };
        let s = Tensor::randn(vec![cfg.cond_dim()], 1.0, &mut rng(18));
        assert_eq!(embed(0.3, &s), embed(0.3, &s));
        let zero = Tensor::zeros(vec![cfg.cond_dim()]);
        let cs: Vec<Tensor> = (0..100).map(|i| embed(i as f64 / 99.0, &zero)).collect();
        for i in 0..100 {
            for j in i + 1..100 {
                assert!(cs[i].max_abs_diff(&cs[j]).unwrap() > 1e-9, "τ grid {i} vs {j}");
            }
        }
        assert!(embed(0.0, &zero).max_abs_diff(&embed(1.0, &zero)).unwrap() > 0.0);
    }

    #[test]
    fn forward_is_deterministic_without_dropout() {
        let cfg = tiny();
        let p = randomized(&cfg, 19);
        let x = Tensor::randn(vec![5, cfg.feature_dim], 1.0, &mut rng(20));
        let c = cond(&cfg, 21);
        let a = predict(&p, &cfg, &x, 0.7, &c).unwrap();
        let b = predict(&p, &cfg, &x, 0.7, &c).unwrap();
        assert_eq!(a.data(), b.data());
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let xv = g.constant(x.clone());
        let mut r = rng(22);
        let d = forward(&mut g, &bound, &cfg, xv, 0.7, &c, Some(&mut r)).unwrap();
        assert!(g.value(d).max_abs_diff(&a).unwrap() > 0.0);
    }

    #[test]
    fn non_finite_input_names_a_stage() {
        let cfg = tiny();
        let mut p = randomized(&cfg, 23);
        *p.get_mut("in.w").unwrap() = Tensor::full(vec![cfg.feature_dim, cfg.hidden], 1.0);
        let x = Tensor::full(vec![3, cfg.feature_dim], 1e307);
        match predict(&p, &cfg, &x, 0.5, &cond(&cfg, 24)) {
            Err(Error::NonFinite { context }) => assert!(context.contains("layer") || context.contains("op"), "{context}"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn desk_parameter_count_is_stable() {
        let cfg = ModelConfig::desk();
        let p = init_params(&cfg, &mut rng(0)).unwrap();
        let (dh, d, dd, l) = (128, 8, 392, 4);
        let (v, td, s) = (cfg.vocab_size, 64, 192);
        let per_layer = 5 * (dh * 3 * dh + 3 * dh) + 2 * (4 * d * d + d) + 2 * (4 * dh * dh + dh) + 3 * dh * 3 * dh + dh;
        let expected = dd * dh + dh
            + 2 * (dh * dh + dh)
            + (s * dh + dh) + (dh * dh + dh)
            + 2 * (dh * dh + dh)
            + v * td + (td * dh + dh) + (td * d + d)
            + l * per_layer
            + dh * 2 * dh + 2 * dh
            + dh * dd + dd;
        assert_eq!(p.num_scalars(), expected);
        let q = init_params(&cfg, &mut rng(99)).unwrap();
        assert_eq!(q.num_scalars(), expected);
        for name in gated_modulations(&cfg) {
            let w = p.get(&format!("{name}.w")).unwrap();
            for r in 0..dh {
                assert!(w.row(r)[2 * dh..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_tiny_model() {
        let cfg = ModelConfig { dropout: 0.0, ..tiny() };
        let p = randomized(&cfg, 25);
        let x = Tensor::randn(vec![4, cfg.feature_dim], 1.0, &mut rng(26));
        let target = Tensor::randn(vec![4, cfg.feature_dim], 1.0, &mut rng(27));
        let c = cond(&cfg, 28);
        let report = finite_diff_check(
            &p,
            1e-5,
            &GradCheckOptions { max_elements_per_param: Some(6) },
            |g, b| {
                let xv = g.constant(x.clone());
                let y = forward(g, b, &cfg, xv, 0.35, &c, None)?;
                let t = g.constant(target.clone());
                let d = g.sub(y, t)?;
                let sq = g.mul(d, d)?;
                g.mean(sq)
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn joint_attention_keeps_frames_separate() {
        let cfg = tiny();
        let p = randomized(&cfg, 40);
        let c = cond(&cfg, 41);
        let (t, j, d) = (5, cfg.joints, cfg.joint_width());
        let h = Tensor::randn(vec![t, j, d], 1.0, &mut rng(42));
        let base = joint_attention_sublayer(&p, &cfg, &h, 0.4, &c, 1).unwrap();
        let mut h2 = h.clone();
        for v in &mut h2.data_mut()[2 * j * d..3 * j * d] {
            *v += 0.7;
        }
        let moved = joint_attention_sublayer(&p, &cfg, &h2, 0.4, &c, 1).unwrap();
        for f in 0..t {
            let r = f * j * d..(f + 1) * j * d;
            assert_eq!(base.data()[r.clone()] == moved.data()[r], f != 2, "frame {f}");
        }
        assert!(joint_attention_sublayer(&p, &cfg, &h, 0.4, &c, cfg.layers).is_err());
    }
}
