//! Spaced DDPM sampling conditioned on the control branches, with latent space adjustment:
//! early steps are pulled toward the LR embedding, late steps pushed away from it.

use controlsr_tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::controlsr_forward_values;
use crate::params::ParamStore;
use crate::schedule::{space_schedule, NoiseSchedule};
use crate::store::{Checkpoint, ImageBuffer, LsaConfig, ModelConfig, Stage};
use crate::vae::{decode, encode_lr, LATENT_CHANNELS, DOWNSCALE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Ela,
    None,
    Lla,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Ela => "ela",
            Phase::None => "none",
            Phase::Lla => "lla",
        }
    }
}

/// Phase of executed step `i` (0 is the noisiest): ELA before `ceil(early_frac·n)`,
/// LLA from `ceil(late_frac·n)` on, nothing in between.
pub fn assign_phase(i: usize, cfg: &LsaConfig) -> Phase {
    let n = cfg.n_steps as f64;
    let boundary = |frac: f64| (frac * n - 1e-9).ceil().max(0.0) as usize;
    let (early, late) = (boundary(cfg.early_frac), boundary(cfg.late_frac));
    if i < early {
        Phase::Ela
    } else if i >= late {
        Phase::Lla
    } else {
        Phase::None
    }
}

/// `(1 − α)·x + α·x_lr`.
pub fn ela<T: Scalar>(x: &Tensor<T>, x_lr: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    let (keep, pull) = (T::of(1.0 - alpha), T::of(alpha));
    Ok(x.zip_map(x_lr, |a, b| keep * a + pull * b)?)
}

/// `(1 + β)·x − β·x_lr`.
pub fn lla<T: Scalar>(x: &Tensor<T>, x_lr: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    let (keep, push) = (T::of(1.0 + beta), T::of(beta));
    Ok(x.zip_map(x_lr, |a, b| keep * a - push * b)?)
}

/// The adjustment of `phase` applied to a step output.
pub fn adjust<T: Scalar>(phase: Phase, x: Tensor<T>, x_lr: &Tensor<T>, cfg: &LsaConfig) -> Result<Tensor<T>> {
    match phase {
        Phase::Ela => ela(&x, x_lr, cfg.alpha),
        Phase::Lla => lla(&x, x_lr, cfg.beta),
        Phase::None => Ok(x),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub phase: Phase,
    /// `‖x − x_lr‖₂` after the adjustment.
    pub dist_lr: f64,
    /// `‖x − x_lr‖₂` of the raw step output.
    pub dist_pre: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SamplerTrace {
    pub records: Vec<TraceRecord>,
    /// Decoded intermediate latents, keyed by step.
    pub snapshots: Vec<(usize, Vec<ImageBuffer>)>,
}

impl SamplerTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,phase,dist_lr\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{}\n", r.step, r.phase.name(), r.dist_lr));
        }
        s
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    /// Apply the latent space adjustment; `false` runs the plain sampler.
    pub adjust: bool,
    /// Decode the latent every this many steps.
    pub snapshot_every: Option<usize>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { adjust: true, snapshot_every: None }
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput<T> {
    pub images: Vec<ImageBuffer>,
    pub latent: Tensor<T>,
    pub x_lr: Tensor<T>,
    pub trace: SamplerTrace,
}

impl<T: Scalar> SampleOutput<T> {
    /// `‖latent − x_lr‖₂` per batch item.
    pub fn final_distances(&self) -> Result<Vec<f64>> {
        (0..self.latent.dim(0)).map(|i| Ok(self.latent.batch_item(i)?.sub(&self.x_lr.batch_item(i)?)?.norm())).collect()
    }
}

/// Samples one SR output per LR image. All images share one RNG stream seeded by `lsa.seed`.
pub fn sample<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    scale: usize,
    lr: &[ImageBuffer],
    schedule: &NoiseSchedule,
    lsa: &LsaConfig,
    opts: SampleOptions,
) -> Result<SampleOutput<T>> {
    lsa.validate()?;
    if lr.is_empty() {
        return Err(Error::validation("lr", "no input images"));
    }
    let (h, w) = (lr[0].height() * scale, lr[0].width() * scale);
    if lr.iter().any(|im| (im.height() * scale, im.width() * scale) != (h, w)) {
        return Err(Error::validation("lr", "all LR images must share one size"));
    }
    if h % DOWNSCALE != 0 || w % DOWNSCALE != 0 || (h / DOWNSCALE) % 2 != 0 || (w / DOWNSCALE) % 2 != 0 {
        return Err(Error::validation("lr", format!("upsampled size {h}x{w} must be a multiple of 16")));
    }
    let spaced = space_schedule(schedule, lsa.n_steps)?;
    let x_lr = encode_lr(store, cfg, lr, scale)?;
    let lr_t = ImageBuffer::batch_to_tensor::<T>(lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(lsa.seed);
    let shape = [lr.len(), LATENT_CHANNELS, h / DOWNSCALE, w / DOWNSCALE];
    let mut x = Tensor::<T>::randn(&shape, 1.0, &mut rng);
    let n = spaced.len();
    let mut trace = SamplerTrace::default();
    for i in 0..n {
        let k = n - 1 - i;
        let t = vec![spaced.timestep(k); lr.len()];
        let eps = controlsr_forward_values(store, cfg, &x, &t, &x_lr, &lr_t)?.eps;
        let stepped = spaced.ddpm_step(&x, &eps, k, &mut rng)?;
        let dist_pre = stepped.sub(&x_lr)?.norm();
        let phase = if opts.adjust { assign_phase(i, lsa) } else { Phase::None };
        x = adjust(phase, stepped, &x_lr, lsa)?;
        let dist_lr = x.sub(&x_lr)?.norm();
        if !dist_lr.is_finite() {
            return Err(Error::validation("sampler", format!("latent diverged at step {i}")));
        }
        trace.records.push(TraceRecord { step: i, phase, dist_lr, dist_pre });
        if let Some(every) = opts.snapshot_every.filter(|&e| e > 0) {
            if (i + 1) % every == 0 {
                trace.snapshots.push((i, decode(store, cfg, &x)?));
            }
        }
    }
    let images = decode(store, cfg, &x)?;
    Ok(SampleOutput { images, latent: x, x_lr, trace })
}

/// Model configuration and parameters of a control-stage checkpoint.
pub fn load_sampler_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<(ParamStore<T>, crate::store::RunConfig)> {
    if ck.stage != Stage::Control {
        return Err(Error::Usage(format!("sampling needs a control-stage checkpoint, got stage {}", ck.stage.name())));
    }
    let cfg = crate::train::checkpoint_config(ck)?;
    Ok((ParamStore::from_checkpoint(ck)?, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_stage;

    fn lsa(n: usize, early: f64, late: f64) -> LsaConfig {
        LsaConfig { n_steps: n, early_frac: early, late_frac: late, ..LsaConfig::default() }
    }

    #[test]
    fn default_phases() {
        let cfg = lsa(50, 0.4, 0.8);
        for i in 0..50 {
            let want = if i < 20 { Phase::Ela } else if i < 40 { Phase::None } else { Phase::Lla };
            assert_eq!(assign_phase(i, &cfg), want, "step {i}");
        }
        assert!((0..50).all(|i| assign_phase(i, &lsa(50, 0.0, 0.0)) == Phase::Lla));
        assert!((0..50).all(|i| assign_phase(i, &lsa(50, 1.0, 1.0)) == Phase::Ela));
        assert_eq!(assign_phase(1, &lsa(7, 0.2, 0.5)), Phase::Ela);
        assert_eq!(assign_phase(2, &lsa(7, 0.2, 0.5)), Phase::None);
        assert_eq!(assign_phase(4, &lsa(7, 0.2, 0.5)), Phase::Lla);
        assert_eq!(assign_phase(7, &lsa(10, 0.7, 0.7)), Phase::Lla);
    }

    #[test]
    fn adjustment_algebra() {
        let one = Tensor::<f64>::scalar(1.0);
        let zero = Tensor::<f64>::scalar(0.0);
        assert!((ela(&one, &zero, 0.01).unwrap().data()[0] - 0.99).abs() < 1e-15);
        assert!((lla(&one, &zero, 0.01).unwrap().data()[0] - 1.01).abs() < 1e-15);
        let x = Tensor::<f64>::from_vec(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        assert!(ela(&x, &x, 0.7).unwrap().max_abs_diff(&x).unwrap() < 1e-15);
        assert!(lla(&x, &x, 0.7).unwrap().max_abs_diff(&x).unwrap() < 1e-15);
        let other = Tensor::<f64>::from_vec(&[3], vec![5.0, 1.5, -4.0]).unwrap();
        assert_eq!(ela(&x, &other, 0.0).unwrap(), x);
        assert_eq!(lla(&x, &other, 0.0).unwrap(), x);
        assert!(ela(&x, &one, 0.1).is_err());
    }

    fn control_store() -> (ParamStore<f64>, ModelConfig) {
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        for stage in [Stage::Vae, Stage::Backbone, Stage::Control] {
            init_stage(&mut store, stage, &cfg, 32, &mut rng).unwrap();
        }
        (store, cfg)
    }

    #[test]
    fn trace_and_identity() {
        let (store, cfg) = control_store();
        let schedule = crate::schedule::make_schedule(100, 1e-4, 0.02).unwrap();
        let lr = vec![ImageBuffer::filled(8, 8, [0.3, 0.5, 0.2])];
        let plain = sample(&store, &cfg, 4, &lr, &schedule, &lsa(6, 0.4, 0.8), SampleOptions { adjust: false, snapshot_every: None }).unwrap();
        let zero = LsaConfig { alpha: 0.0, beta: 0.0, ..lsa(6, 0.4, 0.8) };
        let ident = sample(&store, &cfg, 4, &lr, &schedule, &zero, SampleOptions { adjust: true, snapshot_every: Some(2) }).unwrap();
        assert_eq!(plain.latent, ident.latent);
        assert_eq!(ident.trace.records.len(), 6);
        assert_eq!(ident.trace.snapshots.len(), 3);
        let on = LsaConfig { alpha: 0.2, beta: 0.3, ..lsa(6, 0.4, 0.8) };
        let adj = sample(&store, &cfg, 4, &lr, &schedule, &on, SampleOptions::default()).unwrap();
        for r in &adj.trace.records {
            let want = match r.phase {
                Phase::Ela => 0.8,
                Phase::Lla => 1.3,
                Phase::None => 1.0,
            };
            assert!((r.dist_lr - want * r.dist_pre).abs() <= 1e-9 * r.dist_pre.max(1.0), "{r:?}");
        }
        let csv = adj.trace.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,ela,"));
    }

    #[test]
    fn rejects_non_control_checkpoints() {
        let ck = ParamStore::<f32>::new().to_checkpoint(Stage::Backbone, 0, String::new());
        assert!(matches!(load_sampler_checkpoint::<f32>(&ck), Err(Error::Usage(_))));
    }
}
