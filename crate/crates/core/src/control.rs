//! The two control branches and their fusion.
//!
//! DPM (`dpm.*`) is a copy of the backbone encoder and middle block with a window
//! cross-attention against the latent LR embedding after each encoder block. GSPM (`gspm.*`)
//! is the same copy with every attention layer removed. Each branch taps its five outputs
//! through zero-initialized 1×1 convolutions (`<branch>.zero.k`); the fused signals are the sum
//! of the two branches.

use controlsr_tensor::{Scalar, Tensor, Var};
use rand::Rng;

use crate::backbone::{condition_tokens, tap_channels, trunk_forward, TrunkInputs, INJECTION_POINTS};
use crate::error::{Error, Result};
use crate::lora::is_lora_name;
use crate::nn::{conv, time_mlp, Ctx, Init};
use crate::params::ParamStore;
use crate::store::ModelConfig;
use crate::vae::LATENT_CHANNELS;
use crate::wxattn::WindowSpec;

pub const DPM: &str = "dpm";
pub const GSPM: &str = "gspm";

const TRUNK_PARTS: [&str; 5] = ["time.", "conv_in.", "enc.", "down.", "mid."];

fn is_attention(rest: &str) -> bool {
    rest.starts_with("mid.attn.") || rest.starts_with("mid.xattn.")
}

/// Copies the backbone trunk into `branch`, optionally without attention layers.
fn copy_trunk<T: Scalar>(store: &mut ParamStore<T>, branch: &str, keep_attention: bool) -> Result<usize> {
    let copies: Vec<(String, Tensor<T>)> = store
        .iter()
        .filter_map(|(n, p)| {
            let rest = n.strip_prefix("unet.")?;
            let wanted = TRUNK_PARTS.iter().any(|part| rest.starts_with(part)) && !is_lora_name(n) && (keep_attention || !is_attention(rest));
            wanted.then(|| (format!("{branch}.{rest}"), p.value.clone()))
        })
        .collect();
    let count = copies.len();
    for (n, t) in copies {
        store.insert(n, t, true)?;
    }
    Ok(count)
}

/// Builds the enabled branches from the stage-2 backbone already in `store`.
pub fn init_control<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, latent_side: usize, rng: &mut R) -> Result<()> {
    if copy_trunk(store, DPM, true)? == 0 {
        return Err(Error::validation("checkpoint", "backbone tensors (unet.*) are required to initialize control branches"));
    }
    let w = cfg.unet_width;
    let ch = tap_channels(w);
    let key_side = WindowSpec::key_side(latent_side, cfg.window, cfg.window_partition);
    {
        let mut init = Init { store: &mut *store, rng: &mut *rng, trainable: true };
        init.conv(&format!("{DPM}.hint"), LATENT_CHANNELS, w, 3, true)?;
        if cfg.xattn_enabled() {
            init.window_xattn(&format!("{DPM}.wx.0"), w, cfg.heads, key_side)?;
            init.window_xattn(&format!("{DPM}.wx.1"), 2 * w, cfg.heads, key_side)?;
        }
        for (k, &c) in ch.iter().enumerate() {
            init.zero_conv(&format!("{DPM}.zero.{k}"), c, c)?;
        }
    }
    if cfg.gspm_enabled() {
        copy_trunk(store, GSPM, false)?;
        let mut init = Init { store, rng, trainable: true };
        init.conv(&format!("{GSPM}.hint"), LATENT_CHANNELS, w, 3, true)?;
        for (k, &c) in ch.iter().enumerate() {
            init.zero_conv(&format!("{GSPM}.zero.{k}"), c, c)?;
        }
    }
    Ok(())
}

fn check_grid<T: Scalar>(ctx: &Ctx<T>, x_t: Var, x_lr: Var) -> Result<()> {
    if ctx.g.shape(x_t) != ctx.g.shape(x_lr) {
        return Err(Error::validation("x_lr", format!("grid {:?} does not match x_t {:?}", ctx.g.shape(x_lr), ctx.g.shape(x_t))));
    }
    Ok(())
}

fn zero_taps<T: Scalar>(ctx: &mut Ctx<T>, branch: &str, taps: &[Var]) -> Result<Vec<Var>> {
    taps.iter().enumerate().map(|(k, &t)| conv(ctx, &format!("{branch}.zero.{k}"), t, 1, 0)).collect()
}

fn branch_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    branch: &str,
    cfg: &ModelConfig,
    x_t: Var,
    x_lr: Var,
    t: &[usize],
    cond: Option<Var>,
    window_attention: bool,
) -> Result<Vec<Var>> {
    check_grid(ctx, x_t, x_lr)?;
    let temb = time_mlp(ctx, &format!("{branch}.time"), t, cfg.time_dim)?;
    let hint = conv(ctx, &format!("{branch}.hint"), x_lr, 1, 1)?;
    let inputs = TrunkInputs { hint: Some(hint), cond, x_lr: window_attention.then_some(x_lr) };
    let taps = trunk_forward(ctx, branch, cfg, x_t, temb, inputs)?;
    zero_taps(ctx, branch, &taps)
}

/// DPM signals; `p` is the `(n, cond_dim)` condition vector.
pub fn dpm_forward<T: Scalar>(ctx: &mut Ctx<T>, cfg: &ModelConfig, x_t: Var, x_lr: Var, t: &[usize], p: Var) -> Result<Vec<Var>> {
    let tokens = condition_tokens(ctx, cfg, p)?;
    let wx = ctx.has(&format!("{DPM}.wx.0.bias"));
    branch_forward(ctx, DPM, cfg, x_t, x_lr, t, Some(tokens), wx)
}

/// GSPM signals; the branch has no attention and takes no condition.
pub fn gspm_forward<T: Scalar>(ctx: &mut Ctx<T>, cfg: &ModelConfig, x_t: Var, x_lr: Var, t: &[usize]) -> Result<Vec<Var>> {
    branch_forward(ctx, GSPM, cfg, x_t, x_lr, t, None, false)
}

pub fn fuse_control<T: Scalar>(ctx: &mut Ctx<T>, a: &[Var], b: &[Var]) -> Result<Vec<Var>> {
    if a.len() != b.len() {
        return Err(Error::validation("controls", format!("{} vs {} signals", a.len(), b.len())));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if ctx.g.shape(x) != ctx.g.shape(y) {
                return Err(Error::validation("controls", format!("{:?} vs {:?}", ctx.g.shape(x), ctx.g.shape(y))));
            }
            Ok(ctx.g.add(x, y)?)
        })
        .collect()
}

/// Plain-tensor elementwise sum per index.
pub fn fuse_tensors<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    if a.len() != b.len() {
        return Err(Error::validation("controls", format!("{} vs {} signals", a.len(), b.len())));
    }
    a.iter().zip(b).map(|(x, y)| Ok(x.add(y)?)).collect()
}

/// Branch outputs of one forward pass.
pub struct ControlOutputs {
    pub dpm: Vec<Var>,
    pub gspm: Option<Vec<Var>>,
    pub fused: Vec<Var>,
}

/// Runs the branches present in the store and fuses them.
pub fn control_forward<T: Scalar>(ctx: &mut Ctx<T>, cfg: &ModelConfig, x_t: Var, x_lr: Var, t: &[usize], p: Var) -> Result<ControlOutputs> {
    let dpm = dpm_forward(ctx, cfg, x_t, x_lr, t, p)?;
    let gspm = if ctx.has(&format!("{GSPM}.zero.0.weight")) { Some(gspm_forward(ctx, cfg, x_t, x_lr, t)?) } else { None };
    let fused = match &gspm {
        Some(g) => fuse_control(ctx, &dpm, g)?,
        None => dpm.clone(),
    };
    debug_assert_eq!(fused.len(), INJECTION_POINTS);
    Ok(ControlOutputs { dpm, gspm, fused })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{control_shapes, init_unet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_unet(&mut store, cfg, &mut rng).unwrap();
        init_control(&mut store, cfg, 4, &mut rng).unwrap();
        store
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn run(store: &ParamStore<f64>, cfg: &ModelConfig) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
        let mut ctx = Ctx::inference(store);
        let x = ctx.input(randn(&[2, 4, 4, 4], 1));
        let xl = ctx.input(randn(&[2, 4, 4, 4], 2));
        let p = ctx.input(randn(&[2, cfg.cond_dim], 3));
        let out = control_forward(&mut ctx, cfg, x, xl, &[5, 50], p).unwrap();
        let get = |vs: &[Var]| vs.iter().map(|&v| ctx.value(v).clone()).collect::<Vec<_>>();
        (get(&out.dpm), get(out.gspm.as_ref().unwrap()))
    }

    #[test]
    fn fresh_branches_emit_zero_with_decoder_shapes() {
        let cfg = ModelConfig::micro();
        let store = setup(&cfg);
        let (d, g) = run(&store, &cfg);
        let shapes = control_shapes(&cfg, 4, 4);
        for k in 0..INJECTION_POINTS {
            assert_eq!(&d[k].shape()[1..], &shapes[k]);
            assert_eq!(d[k].shape(), g[k].shape());
            assert!(d[k].data().iter().chain(g[k].data()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn parameter_census() {
        let cfg = ModelConfig::micro();
        let store = setup(&cfg);
        assert!(store.names_with_prefix("gspm.").all(|n| !n.contains("attn") && !n.contains(".wx.")));
        let wx: std::collections::BTreeSet<&str> =
            store.names_with_prefix("dpm.wx.").map(|n| n.split('.').take(3).last().unwrap()).collect();
        assert_eq!(wx.len(), 2);
        for k in 0..INJECTION_POINTS {
            for b in [DPM, GSPM] {
                let zw = store.tensor(&format!("{b}.zero.{k}.weight")).unwrap();
                assert!(zw.data().iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(store.tensor("dpm.enc.0.conv1.weight").unwrap(), store.tensor("unet.enc.0.conv1.weight").unwrap());
    }

    #[test]
    fn ablations_drop_modules() {
        let cfg = ModelConfig { dpm_only: true, ..ModelConfig::micro() };
        let store = setup(&cfg);
        assert_eq!(store.names_with_prefix("gspm.").count(), 0);
        assert_eq!(store.names_with_prefix("dpm.wx.").count(), 0);
        let full = ModelConfig { window_partition: false, ..ModelConfig::micro() };
        let store = setup(&full);
        assert_eq!(store.tensor("dpm.wx.0.bias").unwrap().shape(), &[full.heads, 49]);
    }

    #[test]
    fn fusion_properties() {
        let a = vec![randn(&[1, 2, 2, 2], 4), randn(&[1, 3, 1, 1], 5)];
        let b = vec![randn(&[1, 2, 2, 2], 6), randn(&[1, 3, 1, 1], 7)];
        let zero: Vec<_> = a.iter().map(|t| Tensor::zeros(t.shape())).collect();
        assert_eq!(fuse_tensors(&a, &zero).unwrap(), a);
        assert_eq!(fuse_tensors(&a, &b).unwrap(), fuse_tensors(&b, &a).unwrap());
        let neg: Vec<_> = a.iter().map(|t| t.scale(-1.0)).collect();
        assert!(fuse_tensors(&a, &neg).unwrap().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(fuse_tensors(&a, &b[..1]).is_err());
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let cfg = ModelConfig::micro();
        let store = setup(&cfg);
        let mut ctx = Ctx::inference(&store);
        let x = ctx.input(randn(&[1, 4, 4, 4], 1));
        let xl = ctx.input(randn(&[1, 4, 2, 2], 2));
        assert!(gspm_forward(&mut ctx, &cfg, x, xl, &[1]).is_err());
    }
}
