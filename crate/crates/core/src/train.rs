//! Three-stage training: VAE pretraining, unconditional backbone pretraining on HR latents,
//! then the control stage (DPM, GSPM, zero-convs, LoRA and the condition embedder) against
//! the frozen rest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use controlsr_tensor::{Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::predict_eps_graph;
use crate::degrade::{degrade_all, toy_dataset};
use crate::error::{Error, Result};
use crate::model::{controlsr_forward, init_stage, prerequisite, trainable_in};
use crate::nn::Ctx;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::schedule::{make_schedule, NoiseSchedule};
use crate::store::{append_text, write_checkpoint, write_text, Checkpoint, ImageBuffer, ModelConfig, RunConfig, Stage};
use crate::vae::{encode, to_signed, upsample_lr, vae_loss};

/// Parameters, optimizer moments, step counter and RNG of one training stage.
pub struct TrainState<T: Scalar> {
    pub params: ParamStore<T>,
    pub optimizer: Adam<T>,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub stage: Stage,
    frozen: ParamStore<T>,
}

impl<T: Scalar> TrainState<T> {
    /// Applies the freeze table of `stage` to `params` and snapshots every frozen tensor.
    pub fn new(mut params: ParamStore<T>, stage: Stage, lr: f64, seed: u64) -> Self {
        params.set_trainable_by(|n| trainable_in(stage, n));
        let mut frozen = ParamStore::new();
        for (n, p) in params.iter().filter(|(_, p)| !p.trainable) {
            frozen.set(n.clone(), p.value.clone(), false);
        }
        Self { params, optimizer: Adam::new(lr), step: 0, rng: ChaCha8Rng::seed_from_u64(seed), stage, frozen }
    }

    fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Usage(format!("step for stage {} called on a {} state", stage.name(), self.stage.name())));
        }
        Ok(())
    }

    /// Largest change of any frozen tensor since the state was created.
    pub fn frozen_drift(&self) -> f64 {
        self.frozen.max_frozen_change(&self.params)
    }

    fn apply(&mut self, grads: std::collections::BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.optimizer.step(&mut self.params, &grads)?;
        self.step += 1;
        let drift = self.frozen_drift();
        if drift != 0.0 {
            return Err(Error::validation("freeze audit", format!("frozen tensors moved by {drift} at step {}", self.step)));
        }
        Ok(())
    }
}

/// Timesteps and target noise for one diffusion training step.
#[derive(Clone, Debug)]
pub struct NoiseDraw<T> {
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
}

impl<T: Scalar> NoiseDraw<T> {
    /// `t` uniform over `[0, T)` per item, `ε ~ N(0, I)` of `shape`.
    pub fn sample<R: Rng>(rng: &mut R, shape: &[usize], timesteps: usize) -> Self {
        let t = (0..shape[0]).map(|_| rng.random_range(0..timesteps)).collect();
        let eps = Tensor::randn(shape, 1.0, rng);
        Self { t, eps }
    }
}

/// `mean((ε − predict(x_t, t))²)` with `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn denoising_loss<T: Scalar, F>(ctx: &mut Ctx<T>, schedule: &NoiseSchedule, x0: &Tensor<T>, draw: &NoiseDraw<T>, predict: F) -> Result<Var>
where
    F: FnOnce(&mut Ctx<T>, Var, &[usize]) -> Result<Var>,
{
    let x_t = schedule.add_noise_batch(x0, &draw.t, &draw.eps)?;
    let xv = ctx.input(x_t);
    let eps_hat = predict(ctx, xv, &draw.t)?;
    let target = ctx.input(draw.eps.clone());
    Ok(ctx.g.mse(eps_hat, target)?)
}

/// Unconditional loss of the backbone: no controls, learned null condition.
pub fn backbone_loss<T: Scalar>(ctx: &mut Ctx<T>, cfg: &ModelConfig, schedule: &NoiseSchedule, latents: &Tensor<T>, draw: &NoiseDraw<T>) -> Result<Var> {
    denoising_loss(ctx, schedule, latents, draw, |ctx, x, t| predict_eps_graph(ctx, cfg, x, t, None, None))
}

/// Inputs of one control-stage batch.
#[derive(Clone, Debug)]
pub struct ControlBatch<T> {
    /// Frozen-VAE latents of the HR images.
    pub hr_latents: Tensor<T>,
    /// LR images bicubically upsampled to the HR grid, in `[−1, 1]`.
    pub lr_up_signed: Tensor<T>,
    /// Raw LR images in `[0, 1]`.
    pub lr: Tensor<T>,
}

/// Control-stage objective: ε-prediction error of the fully conditioned model, with
/// `x_lr` encoded inside the graph so the encoder adapters receive gradients.
pub fn controlsr_loss<T: Scalar>(ctx: &mut Ctx<T>, cfg: &ModelConfig, schedule: &NoiseSchedule, batch: &ControlBatch<T>, draw: &NoiseDraw<T>) -> Result<Var> {
    denoising_loss(ctx, schedule, &batch.hr_latents, draw, |ctx, x, t| {
        let up = ctx.input(batch.lr_up_signed.clone());
        let lr = ctx.input(batch.lr.clone());
        Ok(controlsr_forward(ctx, cfg, x, t, Some(up), None, lr)?.eps)
    })
}

/// One VAE optimizer step. Returns `(loss, reconstruction_mse)`.
pub fn pretrain_vae_step<T: Scalar>(state: &mut TrainState<T>, cfg: &ModelConfig, batch_hr: &Tensor<T>) -> Result<(f64, f64)> {
    state.expect_stage(Stage::Vae)?;
    let (loss, recon, grads) = {
        let mut ctx = Ctx::new(&state.params);
        let (loss, recon) = vae_loss(&mut ctx, batch_hr, cfg.vae_width)?;
        (ctx.value(loss).data()[0].as_f64(), ctx.value(recon).data()[0].as_f64(), ctx.param_grads(loss))
    };
    state.apply(grads)?;
    Ok((loss, recon))
}

/// One backbone optimizer step on HR latents.
pub fn pretrain_backbone_step<T: Scalar>(state: &mut TrainState<T>, cfg: &ModelConfig, schedule: &NoiseSchedule, latents: &Tensor<T>) -> Result<f64> {
    state.expect_stage(Stage::Backbone)?;
    let draw = NoiseDraw::sample(&mut state.rng, latents.shape(), schedule.total_timesteps());
    let (loss, grads) = {
        let mut ctx = Ctx::new(&state.params);
        let loss = backbone_loss(&mut ctx, cfg, schedule, latents, &draw)?;
        (ctx.value(loss).data()[0].as_f64(), ctx.param_grads(loss))
    };
    state.apply(grads)?;
    Ok(loss)
}

/// One control-stage optimizer step.
pub fn control_step<T: Scalar>(state: &mut TrainState<T>, cfg: &ModelConfig, schedule: &NoiseSchedule, batch: &ControlBatch<T>) -> Result<f64> {
    state.expect_stage(Stage::Control)?;
    let draw = NoiseDraw::sample(&mut state.rng, batch.hr_latents.shape(), schedule.total_timesteps());
    let (loss, grads) = {
        let mut ctx = Ctx::new(&state.params);
        ctx.lora_scale = cfg.lora_scale;
        let loss = controlsr_loss(&mut ctx, cfg, schedule, batch, &draw)?;
        (ctx.value(loss).data()[0].as_f64(), ctx.param_grads(loss))
    };
    state.apply(grads)?;
    Ok(loss)
}

/// Paired toy data of a run, with the tensors each stage consumes.
pub struct TrainData {
    pub hr: Vec<ImageBuffer>,
    pub lr: Vec<ImageBuffer>,
    pub hr_tensor: Tensor<f32>,
    pub lr_tensor: Tensor<f32>,
    pub lr_up_signed: Tensor<f32>,
}

impl TrainData {
    pub fn new(hr: Vec<ImageBuffer>, lr: Vec<ImageBuffer>, scale: usize) -> Result<Self> {
        if hr.len() != lr.len() || hr.is_empty() {
            return Err(Error::validation("dataset", format!("{} HR images for {} LR images", hr.len(), lr.len())));
        }
        let up: Vec<ImageBuffer> = lr.iter().map(|im| upsample_lr(im, scale)).collect();
        Ok(Self {
            hr_tensor: ImageBuffer::batch_to_tensor(&hr)?,
            lr_tensor: ImageBuffer::batch_to_tensor(&lr)?,
            lr_up_signed: to_signed(&ImageBuffer::batch_to_tensor(&up)?),
            hr,
            lr,
        })
    }

    /// The synthetic training set described by `cfg`.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let hr = toy_dataset(cfg.dataset_size, cfg.image_size, cfg.data_seed)?;
        let lr = degrade_all(&hr, &cfg.degrade, cfg.data_seed)?;
        Self::new(hr, lr, cfg.degrade.scale)
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }
}

/// Dataset indices of batch `step`: a fixed cyclic walk over the set.
pub fn batch_indices(step: usize, batch: usize, len: usize) -> Vec<usize> {
    (0..batch).map(|j| (step * batch + j) % len).collect()
}

fn select<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let items = idx.iter().map(|&i| t.batch_item(i)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Tensor::cat_batch(&items)?)
}

/// Result of [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub losses: Vec<f64>,
    pub checkpoint: Checkpoint,
}

/// Initial parameters of `stage`: fresh for the VAE stage, otherwise built on `resume`,
/// which must come from the previous stage or from the same stage.
pub fn initial_params(cfg: &RunConfig, stage: Stage, resume: Option<&Checkpoint>) -> Result<ParamStore<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prev = prerequisite(stage);
    let Some(ck) = resume else {
        return match prev {
            None => {
                let mut store = ParamStore::new();
                init_stage(&mut store, stage, &cfg.model, cfg.image_size, &mut rng)?;
                Ok(store)
            }
            Some(p) => Err(Error::Usage(format!(
                "stage {} needs a trained {} checkpoint; pass it with --resume",
                stage.name(),
                p.name()
            ))),
        };
    };
    let mut store = ParamStore::from_checkpoint(ck)?;
    if ck.stage == stage {
        return Ok(store);
    }
    if Some(ck.stage) != prev {
        return Err(Error::Usage(format!(
            "stage {} cannot resume from a {} checkpoint; it needs a {} checkpoint",
            stage.name(),
            ck.stage.name(),
            prev.map_or("fresh", |p| p.name())
        )));
    }
    init_stage(&mut store, stage, &cfg.model, cfg.image_size, &mut rng)?;
    Ok(store)
}

/// Runs `cfg.iters` steps of `stage`, writing `metrics.csv`, periodic `step_<k>.csrk` files
/// and `final.csrk` under `<out_dir>/<stage>/`.
pub fn train_loop(cfg: &RunConfig, stage: Stage, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = initial_params(cfg, stage, resume)?;
    let data = TrainData::from_config(cfg)?;
    let schedule = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end)?;
    let dir = Path::new(&cfg.out_dir).join(stage.name());
    let metrics = dir.join("metrics.csv");
    write_text(&metrics, "step,stage,loss,wall_ms\n")?;
    let meta = cfg.to_json().to_string();

    let latents = match stage {
        Stage::Vae => None,
        _ => Some(encode(&params, &cfg.model, &data.hr_tensor, false)?),
    };
    let mut state = TrainState::new(params, stage, cfg.lr, cfg.seed);
    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.iters);
    for step in 0..cfg.iters {
        let idx = batch_indices(step, cfg.batch, data.len());
        let loss = match stage {
            Stage::Vae => pretrain_vae_step(&mut state, &cfg.model, &select(&data.hr_tensor, &idx)?)?.0,
            Stage::Backbone => {
                let z = select(latents.as_ref().expect("latents"), &idx)?;
                pretrain_backbone_step(&mut state, &cfg.model, &schedule, &z)?
            }
            Stage::Control => {
                let batch = ControlBatch {
                    hr_latents: select(latents.as_ref().expect("latents"), &idx)?,
                    lr_up_signed: select(&data.lr_up_signed, &idx)?,
                    lr: select(&data.lr_tensor, &idx)?,
                };
                control_step(&mut state, &cfg.model, &schedule, &batch)?
            }
        };
        if !loss.is_finite() {
            return Err(Error::validation("loss", format!("non-finite loss {loss} at step {step}")));
        }
        losses.push(loss);
        append_text(&metrics, &format!("{step},{},{loss},{}\n", stage.name(), start.elapsed().as_millis()))?;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.iters {
            let ck = state.params.to_checkpoint(stage, cfg.seed, meta.clone());
            write_checkpoint(dir.join(format!("step_{}.csrk", step + 1)), &ck)?;
        }
        log::debug!("{} step {step}: loss {loss:.6}", stage.name());
    }
    let checkpoint = state.params.to_checkpoint(stage, cfg.seed, meta);
    let final_checkpoint = dir.join("final.csrk");
    write_checkpoint(&final_checkpoint, &checkpoint)?;
    Ok(TrainOutcome { final_checkpoint, metrics, losses, checkpoint })
}

/// Run configuration stored in a checkpoint written by [`train_loop`].
pub fn checkpoint_config(ck: &Checkpoint) -> Result<RunConfig> {
    if ck.meta.is_empty() {
        return Err(Error::validation("checkpoint", "no run configuration stored in the checkpoint"));
    }
    RunConfig::from_json_str(&ck.meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_run(dir: &Path) -> RunConfig {
        RunConfig {
            model: ModelConfig::micro(),
            image_size: 32,
            dataset_size: 2,
            batch: 2,
            iters: 2,
            lr: 1e-3,
            checkpoint_every: 0,
            out_dir: dir.to_string_lossy().into_owned(),
            ..RunConfig::default()
        }
    }

    #[test]
    fn stub_predictor_losses() {
        let store = ParamStore::<f64>::new();
        let schedule = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draw = NoiseDraw::<f64>::sample(&mut rng, &[2, 4, 2, 2], 1000);
        let x0 = Tensor::<f64>::randn(&[2, 4, 2, 2], 1.0, &mut rng);
        let mut ctx = Ctx::new(&store);
        let exact = denoising_loss(&mut ctx, &schedule, &x0, &draw, |ctx, _, _| Ok(ctx.input(draw.eps.clone()))).unwrap();
        assert_eq!(ctx.value(exact).data()[0], 0.0);
        let off = denoising_loss(&mut ctx, &schedule, &x0, &draw, |ctx, _, _| Ok(ctx.input(draw.eps.map(|v| v + 0.5)))).unwrap();
        assert!((ctx.value(off).data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn stage_mismatch_is_usage_error() {
        let cfg = ModelConfig::micro();
        let mut state = TrainState::new(ParamStore::<f32>::new(), Stage::Backbone, 1e-3, 0);
        let err = pretrain_vae_step(&mut state, &cfg, &Tensor::zeros(&[1, 3, 16, 16])).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn zero_lr_keeps_vae_loss() {
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        init_stage(&mut store, Stage::Vae, &cfg, 32, &mut rng).unwrap();
        let mut state = TrainState::new(store, Stage::Vae, 0.0, 0);
        let batch = Tensor::<f32>::randn(&[2, 3, 16, 16], 0.2, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
        let a = pretrain_vae_step(&mut state, &cfg, &batch).unwrap();
        let b = pretrain_vae_step(&mut state, &cfg, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_prerequisite_names_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_run(dir.path());
        let msg = train_loop(&cfg, Stage::Control, None).unwrap_err().to_string();
        assert!(msg.contains("control") && msg.contains("backbone"), "{msg}");
    }

    #[test]
    fn stages_chain_and_only_touch_their_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_run(dir.path());
        let vae = train_loop(&cfg, Stage::Vae, None).unwrap();
        assert_eq!(vae.losses.len(), 2);
        let bb = train_loop(&cfg, Stage::Backbone, Some(&vae.checkpoint)).unwrap();
        for r in &vae.checkpoint.records {
            assert_eq!(bb.checkpoint.record(&r.name).unwrap().data, r.data, "{}", r.name);
        }
        let ctl = train_loop(&cfg, Stage::Control, Some(&bb.checkpoint)).unwrap();
        for r in &bb.checkpoint.records {
            assert_eq!(ctl.checkpoint.record(&r.name).unwrap().data, r.data, "{}", r.name);
        }
        let text = std::fs::read_to_string(&ctl.metrics).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("0,control,"));
        assert_eq!(checkpoint_config(&ctl.checkpoint).unwrap(), cfg);
    }

    #[test]
    fn zero_iters_keeps_input_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_run(dir.path());
        let vae = train_loop(&cfg, Stage::Vae, None).unwrap();
        cfg.iters = 0;
        let again = train_loop(&cfg, Stage::Vae, Some(&vae.checkpoint)).unwrap();
        assert_eq!(again.checkpoint.records, vae.checkpoint.records);
        let bb = train_loop(&cfg, Stage::Backbone, Some(&vae.checkpoint)).unwrap();
        assert_eq!(bb.checkpoint.stage, Stage::Backbone);
        for r in &vae.checkpoint.records {
            assert_eq!(bb.checkpoint.record(&r.name).unwrap().data, r.data);
        }
    }
}
