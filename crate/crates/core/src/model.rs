//! Whole-model wiring: which tensors each training stage creates and trains, and the full
//! conditional ε prediction used by stage-3 training and by the sampler.

use controlsr_tensor::{Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{embed_condition_graph, init_cond_embedder, init_unet, init_unet_lora, predict_eps_graph};
use crate::control::{control_forward, fuse_tensors, init_control, ControlOutputs};
use crate::error::{Error, Result};
use crate::lora::is_lora_name;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::schedule::NoiseSchedule;
use crate::store::{ImageBuffer, ModelConfig, Stage};
use crate::vae::{encode_graph, encode_lr, init_encoder_lora, init_vae, DOWNSCALE};

/// Whether `name` is trained in `stage`; everything else is frozen.
pub fn trainable_in(stage: Stage, name: &str) -> bool {
    match stage {
        Stage::Vae => name.starts_with("vae.") && !is_lora_name(name),
        Stage::Backbone => name.starts_with("unet.") && !is_lora_name(name),
        Stage::Control => {
            name.starts_with("dpm.") || name.starts_with("gspm.") || name.starts_with("cond.") || is_lora_name(name)
        }
    }
}

/// Stage that must precede `stage`, if any.
pub fn prerequisite(stage: Stage) -> Option<Stage> {
    match stage {
        Stage::Vae => None,
        Stage::Backbone => Some(Stage::Vae),
        Stage::Control => Some(Stage::Backbone),
    }
}

/// Adds the tensors introduced by `stage` and applies its freeze table.
pub fn init_stage<T: Scalar, R: Rng>(store: &mut ParamStore<T>, stage: Stage, cfg: &ModelConfig, image_size: usize, rng: &mut R) -> Result<()> {
    match stage {
        Stage::Vae => init_vae(store, cfg, rng)?,
        Stage::Backbone => {
            require(store, "vae.encoder.conv_in.weight", stage)?;
            init_unet(store, cfg, rng)?;
        }
        Stage::Control => {
            require(store, "unet.conv_in.weight", stage)?;
            init_encoder_lora(store, cfg, rng)?;
            init_unet_lora(store, cfg, rng)?;
            init_cond_embedder(store, cfg, rng)?;
            init_control(store, cfg, image_size / DOWNSCALE, rng)?;
        }
    }
    store.set_trainable_by(|n| trainable_in(stage, n));
    Ok(())
}

fn require<T: Scalar>(store: &ParamStore<T>, name: &str, stage: Stage) -> Result<()> {
    if !store.contains(name) {
        let prev = prerequisite(stage).map_or("", |s| s.name());
        return Err(Error::validation("checkpoint", format!("stage {} needs tensors from a trained {prev} checkpoint", stage.name())));
    }
    Ok(())
}

/// Graph nodes of one conditional forward pass.
pub struct Forward {
    pub eps: Var,
    pub x_lr: Var,
    pub cond: Var,
    pub controls: ControlOutputs,
}

/// Full conditional prediction. `lr_up_signed` is the LR batch bicubically upsampled to the HR
/// grid and mapped to `[−1, 1]`; `lr` is the raw `[0, 1]` LR batch for the condition embedder.
/// When `x_lr` is given it is used instead of re-encoding `lr_up_signed`.
pub fn controlsr_forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &ModelConfig,
    x_t: Var,
    t: &[usize],
    lr_up_signed: Option<Var>,
    x_lr: Option<Var>,
    lr: Var,
) -> Result<Forward> {
    let x_lr = match (x_lr, lr_up_signed) {
        (Some(z), _) => z,
        (None, Some(img)) => encode_graph(ctx, img, cfg.vae_width, true)?,
        (None, None) => return Err(Error::validation("x_lr", "need the LR embedding or the upsampled LR image")),
    };
    let cond = embed_condition_graph(ctx, lr)?;
    let controls = control_forward(ctx, cfg, x_t, x_lr, t, cond)?;
    let eps = predict_eps_graph(ctx, cfg, x_t, t, Some(&controls.fused), Some(cond))?;
    Ok(Forward { eps, x_lr, cond, controls })
}

/// Values of the control signals and ε̂ for given tensors, without gradients.
pub struct ForwardValues<T> {
    pub eps: Tensor<T>,
    pub dpm: Vec<Tensor<T>>,
    pub gspm: Option<Vec<Tensor<T>>>,
}

pub fn controlsr_forward_values<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    x_t: &Tensor<T>,
    t: &[usize],
    x_lr: &Tensor<T>,
    lr: &Tensor<T>,
) -> Result<ForwardValues<T>> {
    let mut ctx = Ctx::inference(store);
    ctx.lora_scale = cfg.lora_scale;
    let (xt, xl, l) = (ctx.input(x_t.clone()), ctx.input(x_lr.clone()), ctx.input(lr.clone()));
    let f = controlsr_forward(&mut ctx, cfg, xt, t, None, Some(xl), l)?;
    let vals = |vs: &[Var]| vs.iter().map(|&v| ctx.value(v).clone()).collect::<Vec<_>>();
    Ok(ForwardValues { eps: ctx.value(f.eps).clone(), dpm: vals(&f.controls.dpm), gspm: f.controls.gspm.as_deref().map(vals) })
}

/// Control signals of one LR image, evaluated at `x_t = √ᾱ_t·x_lr + √(1−ᾱ_t)·ε`.
pub struct ProbeSignals<T> {
    pub x_lr: Tensor<T>,
    pub dpm: Vec<Tensor<T>>,
    pub gspm: Option<Vec<Tensor<T>>>,
    pub fused: Vec<Tensor<T>>,
}

pub fn probe_signals<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    lr: &ImageBuffer,
    scale: usize,
    schedule: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<ProbeSignals<T>> {
    let x_lr = encode_lr(store, cfg, std::slice::from_ref(lr), scale)?;
    let eps = Tensor::randn(x_lr.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let x_t = schedule.add_noise(&x_lr, t, &eps)?;
    let v = controlsr_forward_values(store, cfg, &x_t, &[t], &x_lr, &lr.to_tensor())?;
    let fused = match &v.gspm {
        Some(g) => fuse_tensors(&v.dpm, g)?,
        None => v.dpm.clone(),
    };
    Ok(ProbeSignals { x_lr, dpm: v.dpm, gspm: v.gspm, fused })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_tables() {
        assert!(trainable_in(Stage::Vae, "vae.encoder.conv_in.weight"));
        assert!(!trainable_in(Stage::Vae, "vae.encoder.conv_in.lora.A"));
        assert!(!trainable_in(Stage::Vae, "unet.conv_in.weight"));
        assert!(trainable_in(Stage::Backbone, "unet.null_cond"));
        assert!(!trainable_in(Stage::Backbone, "vae.decoder.conv_out.bias"));
        for n in ["dpm.zero.0.weight", "gspm.hint.weight", "cond.proj.bias", "unet.dec.0.res.conv1.lora.B", "vae.encoder.down.0.lora.A"] {
            assert!(trainable_in(Stage::Control, n), "{n}");
        }
        for n in ["unet.dec.0.res.conv1.weight", "vae.encoder.down.0.weight", "unet.null_cond"] {
            assert!(!trainable_in(Stage::Control, n), "{n}");
        }
    }
}
