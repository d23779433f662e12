//! Analytic versus central finite-difference gradients for every trainable tensor of a
//! loss, at 64-bit on small models.

use controlsr_tensor::{Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::init_stage;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::schedule::make_schedule;
use crate::store::{ModelConfig, Stage};
use crate::train::{backbone_loss, controlsr_loss, ControlBatch, NoiseDraw};
use crate::vae::{to_signed, vae_loss};

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    /// `‖g_analytic − g_fd‖ / max(‖g_analytic‖, ‖g_fd‖)` over the checked entries.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

impl GradReport {
    pub fn passes(&self) -> bool {
        self.analytic_norm > 0.0 && self.rel_error < GRAD_TOLERANCE
    }
}

/// Tensor class of a parameter name, for grouping reports.
pub fn tensor_class(name: &str) -> &'static str {
    if name.contains(".lora.A") {
        "lora A"
    } else if name.contains(".lora.B") {
        "lora B"
    } else if name.starts_with("vae.") {
        "vae conv"
    } else if name.contains(".zero.") {
        "zero conv"
    } else if name.contains(".wx.") && name.ends_with(".bias") && !name.contains(".out.") && !name.contains(".norm.") {
        "window bias table"
    } else if name.contains(".wx.") {
        "window cross-attention"
    } else if name.starts_with("cond.") {
        "condition embedder"
    } else if name.contains("attn") {
        "attention"
    } else if name.contains(".res") || name.contains(".enc.") || name.contains(".mid.") {
        "resblock"
    } else {
        "other"
    }
}

/// Checks the gradient of `loss` for every trainable tensor of `store`, sampling up to
/// `per_tensor` entries of each.
pub fn check<F>(store: &ParamStore<f64>, per_tensor: usize, seed: u64, loss: F) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let grads = {
        let mut ctx = Ctx::new(store);
        let root = loss(&mut ctx)?;
        ctx.param_grads(root)
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut ctx = Ctx::inference(s);
        let root = loss(&mut ctx)?;
        Ok(ctx.value(root).data()[0])
    };
    let mut work = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for name in store.trainable_names() {
        let base = store.tensor(&name)?.clone();
        let zero = Tensor::zeros(base.shape());
        let analytic = grads.get(&name).unwrap_or(&zero);
        let live: Vec<usize> = (0..base.len()).filter(|&i| analytic.data()[i] != 0.0).collect();
        let pool = if live.is_empty() { (0..base.len()).collect() } else { live };
        let picks: Vec<usize> = sample(&mut rng, pool.len(), per_tensor.min(pool.len())).into_iter().map(|k| pool[k]).collect();
        let (mut diff, mut an, mut fd) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &picks {
            let mut plus = base.clone();
            plus.data_mut()[i] += FD_STEP;
            work.set(name.clone(), plus, true);
            let lp = eval(&work)?;
            let mut minus = base.clone();
            minus.data_mut()[i] -= FD_STEP;
            work.set(name.clone(), minus, true);
            let lm = eval(&work)?;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            diff += (a - numeric).powi(2);
            an += a * a;
            fd += numeric * numeric;
        }
        work.set(name.clone(), base, true);
        let denom = an.sqrt().max(fd.sqrt());
        let rel_error = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        reports.push(GradReport { name, checked: picks.len(), rel_error, analytic_norm: an.sqrt() });
    }
    Ok(reports)
}

/// Replaces every all-zero tensor (zero-convs, LoRA B, biases) with small noise so that no
/// gradient vanishes structurally.
pub fn randomize_zero_tensors<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R) {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let p = store.get(&n).expect("listed").clone();
        if p.value.data().iter().all(|&v| v == 0.0) {
            store.set(n, Tensor::randn(p.value.shape(), 0.1, rng), p.trainable);
        }
    }
}

/// Micro model holding every stage up to `stage`, with the freeze table of `stage`.
pub fn micro_store(stage: Stage, seed: u64) -> Result<(ParamStore<f64>, ModelConfig)> {
    let cfg = ModelConfig::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for s in [Stage::Vae, Stage::Backbone, Stage::Control] {
        init_stage(&mut store, s, &cfg, MICRO_IMAGE, &mut rng)?;
        if s == stage {
            break;
        }
    }
    randomize_zero_tensors(&mut store, &mut rng);
    Ok((store, cfg))
}

pub const MICRO_IMAGE: usize = 32;

fn micro_images(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::<f64>::randn(&[n, 3, size, size], 0.2, rng).map(|v| (v + 0.5).clamp(0.0, 1.0))
}

/// Gradient reports of one stage's loss on a micro model.
pub fn check_stage(stage: Stage, per_tensor: usize, seed: u64) -> Result<Vec<GradReport>> {
    let (store, cfg) = micro_store(stage, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let schedule = make_schedule(1000, 1e-4, 0.02)?;
    let latent = MICRO_IMAGE / 8;
    match stage {
        Stage::Vae => {
            let images = micro_images(1, 16, &mut rng);
            check(&store, per_tensor, seed, |ctx| Ok(vae_loss(ctx, &images, cfg.vae_width)?.0))
        }
        Stage::Backbone => {
            let z = Tensor::<f64>::randn(&[1, 4, latent, latent], 1.0, &mut rng);
            let draw = NoiseDraw::sample(&mut rng, z.shape(), 1000);
            check(&store, per_tensor, seed, |ctx| backbone_loss(ctx, &cfg, &schedule, &z, &draw))
        }
        Stage::Control => {
            let lr = 4;
            let batch = ControlBatch {
                hr_latents: Tensor::<f64>::randn(&[1, 4, latent, latent], 1.0, &mut rng),
                lr_up_signed: to_signed(&micro_images(1, MICRO_IMAGE, &mut rng)),
                lr: micro_images(1, MICRO_IMAGE / lr, &mut rng),
            };
            let draw = NoiseDraw::sample(&mut rng, batch.hr_latents.shape(), 1000);
            check(&store, per_tensor, seed, |ctx| {
                ctx.lora_scale = cfg.lora_scale;
                controlsr_loss(ctx, &cfg, &schedule, &batch, &draw)
            })
        }
    }
}
