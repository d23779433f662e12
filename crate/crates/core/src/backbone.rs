//! Tiny ε-prediction UNet over two resolutions (latent side `L` and `L/2`).
//!
//! Encoder taps, in order: `conv_in` and `enc.0` at `L`, `down.0` and `enc.1` at `L/2`, then the
//! middle block. The decoder consumes the four encoder taps as skips, deepest first; control
//! signal `k` is added to tap `k` before it is used, so there are five injection points.

use controlsr_tensor::{Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{attention_block, conv, fit_groups, group_norm, linear, res_block, time_mlp, Ctx, Init};
use crate::params::ParamStore;
use crate::store::ModelConfig;
use crate::vae::LATENT_CHANNELS;

pub const INJECTION_POINTS: usize = 5;
pub const COND_EMBED_LAYERS: usize = 4;

/// Channels of each encoder tap for base width `w`.
pub fn tap_channels(w: usize) -> [usize; INJECTION_POINTS] {
    [w, w, w, 2 * w, 2 * w]
}

/// `(channels, h, w)` of each control signal for a latent of `lh × lw`.
pub fn control_shapes(cfg: &ModelConfig, lh: usize, lw: usize) -> Vec<[usize; 3]> {
    let ch = tap_channels(cfg.unet_width);
    (0..INJECTION_POINTS).map(|k| if k < 2 { [ch[k], lh, lw] } else { [ch[k], lh / 2, lw / 2] }).collect()
}

/// Condition-token width: the condition vector is split into `cond_tokens` equal tokens.
pub fn token_dim(cfg: &ModelConfig) -> usize {
    cfg.cond_dim / cfg.cond_tokens
}

/// Time MLP, `conv_in`, `enc.0`, `down.0`, `enc.1` and the middle block under `prefix`.
/// Without `attention` the middle block keeps only its ResBlocks.
pub fn init_trunk<T: Scalar, R: Rng>(init: &mut Init<T, R>, prefix: &str, cfg: &ModelConfig, attention: bool) -> Result<()> {
    let (w, td) = (cfg.unet_width, cfg.time_dim);
    init.linear(&format!("{prefix}.time.lin1"), td, td, true)?;
    init.linear(&format!("{prefix}.time.lin2"), td, td, true)?;
    init.conv(&format!("{prefix}.conv_in"), LATENT_CHANNELS, w, 3, true)?;
    init.res_block(&format!("{prefix}.enc.0"), w, w, td)?;
    init.conv(&format!("{prefix}.down.0"), w, w, 3, true)?;
    init.res_block(&format!("{prefix}.enc.1"), w, 2 * w, td)?;
    init.res_block(&format!("{prefix}.mid.res.0"), 2 * w, 2 * w, td)?;
    if attention {
        init.attention(&format!("{prefix}.mid.attn"), 2 * w, 2 * w)?;
        init.attention(&format!("{prefix}.mid.xattn"), 2 * w, token_dim(cfg))?;
    }
    init.res_block(&format!("{prefix}.mid.res.1"), 2 * w, 2 * w, td)
}

/// `(name, cin, cout)` of every decoder ResBlock.
fn decoder_blocks(w: usize) -> [(String, usize, usize); 4] {
    [
        ("unet.dec.0".into(), 4 * w, 2 * w),
        ("unet.dec.1".into(), 3 * w, 2 * w),
        ("unet.dec.2".into(), 3 * w, w),
        ("unet.dec.3".into(), 2 * w, w),
    ]
}

pub fn init_unet<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let mut init = Init { store, rng, trainable: true };
    let (w, td) = (cfg.unet_width, cfg.time_dim);
    init_trunk(&mut init, "unet", cfg, true)?;
    for (name, cin, cout) in decoder_blocks(w) {
        init.res_block(&format!("{name}.res"), cin, cout, td)?;
        init.attention(&format!("{name}.xattn"), cout, token_dim(cfg))?;
    }
    init.conv("unet.up.0", 2 * w, 2 * w, 3, true)?;
    init.norm("unet.norm_out", w)?;
    init.conv("unet.conv_out", w, LATENT_CHANNELS, 3, true)?;
    init.normal("unet.null_cond", &[cfg.cond_dim], 1.0)
}

/// Adapters on every decoder ResBlock convolution and every decoder attention linear.
pub fn init_unet_lora<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let mut init = Init { store, rng, trainable: true };
    let r = cfg.unet_lora_rank;
    for (name, cin, cout) in decoder_blocks(cfg.unet_width) {
        init.lora_conv(&format!("{name}.res.conv1"), cin, cout, 3, r)?;
        init.lora_conv(&format!("{name}.res.conv2"), cout, cout, 3, r)?;
        init.lora_conv(&format!("{name}.res.skip"), cin, cout, 1, r)?;
        let x = format!("{name}.xattn");
        init.lora_linear(&format!("{x}.q"), cout, cout, r)?;
        init.lora_linear(&format!("{x}.k"), token_dim(cfg), cout, r)?;
        init.lora_linear(&format!("{x}.v"), token_dim(cfg), cout, r)?;
        init.lora_linear(&format!("{x}.out"), cout, cout, r)?;
    }
    Ok(())
}

/// Condition vector `(n, cond_dim)` to `(n, cond_tokens, token_dim)` tokens.
pub fn condition_tokens<T: Scalar>(ctx: &mut Ctx<T>, cfg: &ModelConfig, p: Var) -> Result<Var> {
    let n = ctx.g.shape(p)[0];
    Ok(ctx.g.reshape(p, &[n, cfg.cond_tokens, token_dim(cfg)])?)
}

/// The learned null condition broadcast over a batch of `n`.
pub fn null_condition<T: Scalar>(ctx: &mut Ctx<T>, cfg: &ModelConfig, n: usize) -> Result<Var> {
    let zeros = ctx.input(Tensor::zeros(&[n, cfg.cond_dim]));
    let null = ctx.p("unet.null_cond")?;
    Ok(ctx.g.add_trailing(zeros, null)?)
}

/// Optional extras routed into a trunk forward.
#[derive(Clone, Copy, Default)]
pub struct TrunkInputs {
    /// Added to the `conv_in` output.
    pub hint: Option<Var>,
    /// Condition tokens for the middle cross-attention.
    pub cond: Option<Var>,
    /// Latent LR embedding for window cross-attention after each encoder block.
    pub x_lr: Option<Var>,
}

/// Encoder and middle block; returns the five taps.
pub fn trunk_forward<T: Scalar>(ctx: &mut Ctx<T>, prefix: &str, cfg: &ModelConfig, x: Var, temb: Var, inputs: TrunkInputs) -> Result<Vec<Var>> {
    let groups = cfg.norm_groups;
    let mut h = conv(ctx, &format!("{prefix}.conv_in"), x, 1, 1)?;
    if let Some(hint) = inputs.hint {
        h = ctx.g.add(h, hint)?;
    }
    let t0 = h;
    let mut h = res_block(ctx, &format!("{prefix}.enc.0"), t0, temb, groups)?;
    if let Some(xl) = inputs.x_lr {
        h = crate::wxattn::window_cross_attention(ctx, &format!("{prefix}.wx.0"), h, xl, cfg.heads, groups, cfg.window, cfg.window_partition)?;
    }
    let t1 = h;
    let t2 = conv(ctx, &format!("{prefix}.down.0"), t1, 2, 1)?;
    let mut h = res_block(ctx, &format!("{prefix}.enc.1"), t2, temb, groups)?;
    if let Some(xl) = inputs.x_lr {
        h = crate::wxattn::window_cross_attention(ctx, &format!("{prefix}.wx.1"), h, xl, cfg.heads, groups, cfg.window, cfg.window_partition)?;
    }
    let t3 = h;
    let mut h = res_block(ctx, &format!("{prefix}.mid.res.0"), t3, temb, groups)?;
    if ctx.has(&format!("{prefix}.mid.attn.q.weight")) {
        h = attention_block(ctx, &format!("{prefix}.mid.attn"), h, None, cfg.heads, groups)?;
        let cond = inputs.cond.ok_or_else(|| Error::validation("condition", format!("{prefix} middle block needs condition tokens")))?;
        h = attention_block(ctx, &format!("{prefix}.mid.xattn"), h, Some(cond), cfg.heads, groups)?;
    }
    let t4 = res_block(ctx, &format!("{prefix}.mid.res.1"), h, temb, groups)?;
    Ok(vec![t0, t1, t2, t3, t4])
}

/// `skip + c`, shapes must match.
pub fn inject_control<T: Scalar>(ctx: &mut Ctx<T>, skip: Var, c: Var) -> Result<Var> {
    if ctx.g.shape(skip) != ctx.g.shape(c) {
        return Err(Error::validation("control", format!("signal {:?} does not match skip {:?}", ctx.g.shape(c), ctx.g.shape(skip))));
    }
    Ok(ctx.g.add(skip, c)?)
}

fn check_latent<T: Scalar>(ctx: &Ctx<T>, x: Var) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = ctx.value(x).dims4()?;
    if c != LATENT_CHANNELS || h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::validation("latent", format!("shape {:?}: need {LATENT_CHANNELS} channels and even sides", ctx.g.shape(x))));
    }
    Ok((n, h, w))
}

/// ε̂(x_t, t, controls, p). `controls`, if given, holds one signal per injection point;
/// `cond` is the `(n, cond_dim)` condition vector, defaulting to the learned null condition.
pub fn predict_eps_graph<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &ModelConfig,
    x_t: Var,
    t: &[usize],
    controls: Option<&[Var]>,
    cond: Option<Var>,
) -> Result<Var> {
    let (n, _, _) = check_latent(ctx, x_t)?;
    if t.len() != n {
        return Err(Error::validation("timestep", format!("{} timesteps for batch of {n}", t.len())));
    }
    if let Some(c) = controls {
        if c.len() != INJECTION_POINTS {
            return Err(Error::validation("controls", format!("expected {INJECTION_POINTS} signals, got {}", c.len())));
        }
    }
    let p = match cond {
        Some(p) => p,
        None => null_condition(ctx, cfg, n)?,
    };
    let tokens = condition_tokens(ctx, cfg, p)?;
    let temb = time_mlp(ctx, "unet.time", t, cfg.time_dim)?;
    let mut taps = trunk_forward(ctx, "unet", cfg, x_t, temb, TrunkInputs { cond: Some(tokens), ..Default::default() })?;
    if let Some(c) = controls {
        for (tap, &ck) in taps.iter_mut().zip(c) {
            *tap = inject_control(ctx, *tap, ck)?;
        }
    }
    let groups = cfg.norm_groups;
    let mut h = taps[4];
    for (k, skip) in [(0usize, taps[3]), (1, taps[2]), (2, taps[1]), (3, taps[0])] {
        let name = format!("unet.dec.{k}");
        let cat = ctx.g.concat_channels(h, skip)?;
        h = res_block(ctx, &format!("{name}.res"), cat, temb, groups)?;
        h = attention_block(ctx, &format!("{name}.xattn"), h, Some(tokens), cfg.heads, groups)?;
        if k == 1 {
            h = ctx.g.upsample2x(h)?;
            h = conv(ctx, "unet.up.0", h, 1, 1)?;
        }
    }
    let c = ctx.g.shape(h)[1];
    let h = group_norm(ctx, "unet.norm_out", h, fit_groups(c, groups))?;
    let h = ctx.g.silu(h);
    conv(ctx, "unet.conv_out", h, 1, 1)
}

/// Plain-tensor wrapper of [`predict_eps_graph`].
pub fn predict_eps<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    x_t: &Tensor<T>,
    t: &[usize],
    controls: Option<&[Tensor<T>]>,
    cond: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut ctx = Ctx::inference(store);
    ctx.lora_scale = cfg.lora_scale;
    let x = ctx.input(x_t.clone());
    let cs: Option<Vec<Var>> = controls.map(|c| c.iter().map(|t| ctx.input(t.clone())).collect());
    let p = cond.map(|p| ctx.input(p.clone()));
    let out = predict_eps_graph(&mut ctx, cfg, x, t, cs.as_deref(), p)?;
    Ok(ctx.value(out).clone())
}

/// Condition embedder: four 3×3 convolutions (two of them strided) with SiLU, a global average
/// pool and a linear projection to `cond_dim`.
pub fn init_cond_embedder<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let d = cfg.cond_dim;
    let widths = [3, (d / 4).max(1), (d / 2).max(1), d, d];
    let null = store.tensor("unet.null_cond")?.clone();
    let mut init = Init { store, rng, trainable: true };
    for i in 0..COND_EMBED_LAYERS {
        init.conv(&format!("cond.conv.{i}"), widths[i], widths[i + 1], 3, true)?;
    }
    init.zeros("cond.proj.weight", &[d, d])?;
    init.tensor("cond.proj.bias", null)
}

/// `p` for a `[0, 1]` LR image batch `(n, 3, h, w)`.
pub fn embed_condition_graph<T: Scalar>(ctx: &mut Ctx<T>, lr: Var) -> Result<Var> {
    let mut h = lr;
    for i in 0..COND_EMBED_LAYERS {
        let stride = if i == 1 || i == 2 { 2 } else { 1 };
        h = conv(ctx, &format!("cond.conv.{i}"), h, stride, 1)?;
        if i + 1 < COND_EMBED_LAYERS {
            h = ctx.g.silu(h);
        }
    }
    let pooled = ctx.g.mean_spatial(h)?;
    linear(ctx, "cond.proj", pooled)
}

pub fn embed_condition<T: Scalar>(store: &ParamStore<T>, lr: &Tensor<T>) -> Result<Tensor<T>> {
    let mut ctx = Ctx::inference(store);
    let x = ctx.input(lr.clone());
    let p = embed_condition_graph(&mut ctx, x)?;
    Ok(ctx.value(p).clone())
}
