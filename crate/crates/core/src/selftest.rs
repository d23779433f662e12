//! Fast invariant suite behind `controlsr selftest`.

use controlsr_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::predict_eps;
use crate::error::Result;
use crate::gradcheck::check_stage;
use crate::model::{controlsr_forward_values, init_stage};
use crate::params::ParamStore;
use crate::probe::{kl_divergence, power_2d, power_spectrum, psnr, SpatialDistribution};
use crate::sampler::{sample, SampleOptions};
use crate::schedule::{make_schedule, space_schedule};
use crate::store::{encode_checkpoint, encode_ppm, parse_checkpoint, parse_ppm, ImageBuffer, LsaConfig, ModelConfig, Stage};

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub outcome: std::result::Result<String, String>,
}

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

type Check = fn() -> Result<std::result::Result<String, String>>;

fn schedule_check() -> Result<std::result::Result<String, String>> {
    let s = make_schedule(1000, 1e-4, 0.02)?;
    let same = space_schedule(&s, 1000)?;
    let end = s.alpha_bar()[999];
    Ok(ensure(same.beta() == s.beta() && (end - 4.04e-5).abs() < 1e-6, format!("alpha_bar[999] = {end}"))
        .map(|_| format!("alpha_bar[999] = {end:.3e}")))
}

fn control_store() -> Result<(ParamStore<f64>, ModelConfig)> {
    let cfg = ModelConfig::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    for s in [Stage::Vae, Stage::Backbone, Stage::Control] {
        init_stage(&mut store, s, &cfg, 32, &mut rng)?;
    }
    Ok((store, cfg))
}

fn init_identity_check() -> Result<std::result::Result<String, String>> {
    let (store, cfg) = control_store()?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::<f64>::randn(&[1, 4, 4, 4], 1.0, &mut rng);
    let x_lr = Tensor::<f64>::randn(&[1, 4, 4, 4], 1.0, &mut rng);
    let lr = Tensor::<f64>::full(&[1, 3, 8, 8], 0.4);
    let full = controlsr_forward_values(&store, &cfg, &x, &[500], &x_lr, &lr)?.eps;
    let base = predict_eps(&store, &cfg, &x, &[500], None, None)?;
    let d = full.max_abs_diff(&base)?;
    Ok(ensure(d <= 1e-6, format!("max abs diff {d}")).map(|_| format!("max abs diff {d:.1e}")))
}

fn lsa_check() -> Result<std::result::Result<String, String>> {
    let (store, cfg) = control_store()?;
    let schedule = make_schedule(100, 1e-4, 0.02)?;
    let lr = vec![ImageBuffer::filled(8, 8, [0.2, 0.6, 0.4])];
    let zero = LsaConfig { alpha: 0.0, beta: 0.0, n_steps: 5, ..LsaConfig::default() };
    let plain = sample(&store, &cfg, 4, &lr, &schedule, &zero, SampleOptions { adjust: false, snapshot_every: None })?;
    let ident = sample(&store, &cfg, 4, &lr, &schedule, &zero, SampleOptions::default())?;
    if plain.latent != ident.latent {
        return Ok(Err("zero-strength adjustment changed the trajectory".into()));
    }
    let on = LsaConfig { alpha: 0.05, beta: 0.03, n_steps: 5, ..LsaConfig::default() };
    let adj = sample(&store, &cfg, 4, &lr, &schedule, &on, SampleOptions::default())?;
    let worst = adj
        .trace
        .records
        .iter()
        .map(|r| {
            let f = match r.phase {
                crate::sampler::Phase::Ela => 1.0 - on.alpha,
                crate::sampler::Phase::Lla => 1.0 + on.beta,
                crate::sampler::Phase::None => 1.0,
            };
            (r.dist_lr - f * r.dist_pre).abs() / r.dist_pre.max(1e-300)
        })
        .fold(0.0, f64::max);
    Ok(ensure(worst < 1e-6, format!("distance scaling off by {worst}")).map(|_| format!("worst relative scaling error {worst:.1e}")))
}

fn oracle_check() -> Result<std::result::Result<String, String>> {
    let p = SpatialDistribution { h: 1, w: 2, p: vec![0.5, 0.5] };
    let q = SpatialDistribution { h: 1, w: 2, p: vec![0.9, 0.1] };
    let kl = kl_divergence(&p, &q)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn(&[64], 1.0, &mut rng);
    let e: f64 = x.data().iter().map(|v| v * v).sum();
    let parseval = (power_2d(x.data(), 8, 8).iter().sum::<f64>() / 64.0 - e).abs() / e;
    let wave: Vec<f64> = (0..256).map(|i| (2.0 * std::f64::consts::PI * 3.0 * (i % 16) as f64 / 16.0).cos()).collect();
    let peak = power_spectrum(&Tensor::from_vec(&[1, 1, 16, 16], wave)?)?.peak();
    let a = ImageBuffer::filled(8, 8, [0.2, 0.2, 0.2]);
    let b = ImageBuffer::filled(8, 8, [0.2 + 16.0 / 255.0; 3]);
    let db = psnr(&a, &b, false)?;
    Ok(ensure(
        (kl - 0.5108).abs() < 1e-4 && parseval < 1e-4 && peak == Some(3) && (db - 24.05).abs() < 0.01,
        format!("kl {kl}, parseval {parseval}, peak {peak:?}, psnr {db}"),
    )
    .map(|_| format!("kl {kl:.4}, psnr {db:.2} dB")))
}

fn round_trip_check() -> Result<std::result::Result<String, String>> {
    let (store, _) = control_store()?;
    let ck = store.cast::<f32>().to_checkpoint(Stage::Control, 42, "{}".into());
    let bytes = encode_checkpoint(&ck)?;
    let back = parse_checkpoint(&bytes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = crate::degrade::synth_toy_image(16, &mut rng)?;
    let ppm = encode_ppm(&img);
    let again = encode_ppm(&parse_ppm(&ppm)?);
    Ok(ensure(back == ck && encode_checkpoint(&back)? == bytes && again == ppm, "round trip mismatch")
        .map(|_| format!("{} records, {} bytes", ck.records.len(), bytes.len())))
}

fn gradient_check() -> Result<std::result::Result<String, String>> {
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for stage in [Stage::Vae, Stage::Backbone, Stage::Control] {
        for r in check_stage(stage, 1, 11)? {
            count += 1;
            if !r.passes() {
                return Ok(Err(format!("{}: relative error {:.2e}, norm {:.2e}", r.name, r.rel_error, r.analytic_norm)));
            }
            if r.rel_error > worst.0 {
                worst = (r.rel_error, r.name);
            }
        }
    }
    Ok(Ok(format!("{count} tensors, worst {:.1e} ({})", worst.0, worst.1)))
}

const CHECKS: [(&str, Check); 6] = [
    ("schedule", schedule_check),
    ("init identity", init_identity_check),
    ("latent adjustment", lsa_check),
    ("metric oracles", oracle_check),
    ("round trips", round_trip_check),
    ("gradients", gradient_check),
];

/// Runs every check; errors raised inside a check count as failures.
pub fn run() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, f)| CheckResult { name, outcome: f().unwrap_or_else(|e| Err(e.to_string())) })
        .collect()
}
