//! Command-line surface: `train`, `infer`, `sweep`, `probe`, `degrade` and `selftest`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::degrade::degrade_image;
use crate::error::{Error, Result};
use crate::model::probe_signals;
use crate::params::ParamStore;
use crate::probe::{diff_kl, hf_energy_fraction, kl_to_lr, pca_project, power_spectrum, psnr, ssim};
use crate::sampler::{load_sampler_checkpoint, sample, SampleOptions};
use crate::schedule::{make_schedule, NoiseSchedule};
use crate::store::{list_ppm, load_config, read_checkpoint, read_ppm, write_ppm, write_text, ImageBuffer, LsaConfig, RunConfig, Stage};
use crate::train::train_loop;
use crate::vae::upsample_lr;

#[derive(Parser, Debug)]
#[command(name = "controlsr", version, about = "Latent-diffusion super-resolution with dual control branches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one stage: vae, backbone or control.
    Train {
        #[arg(long)]
        stage: String,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint of the previous stage (or of the same stage to continue it).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve one LR image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lr: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = LsaConfig::default().alpha)]
        alpha: f64,
        #[arg(long, default_value_t = LsaConfig::default().beta)]
        beta: f64,
        #[arg(long, default_value_t = LsaConfig::default().n_steps)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = LsaConfig::default().early_frac)]
        early_frac: f64,
        #[arg(long, default_value_t = LsaConfig::default().late_frac)]
        late_frac: f64,
        /// Directory for trace.csv and per-step snapshots.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Grid over α and β; one CSV row per cell, averaged over the images in --lr-dir.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lr_dir: PathBuf,
        /// HR references with the same file names; without it PSNR is taken against the bicubic upsample.
        #[arg(long)]
        hr_dir: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.03,0.05")]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.03")]
        betas: Vec<f64>,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = LsaConfig::default().n_steps)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// KL, spectra and PCA views of the control signals for one LR image.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lr: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
        /// DPM-only checkpoint for the KL difference.
        #[arg(long)]
        baseline_ckpt: Option<PathBuf>,
        /// Diffusion timestep of the probe; defaults to T/2.
        #[arg(long)]
        t: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Degrade every PPM in --hr-dir into --out-dir.
    Degrade {
        #[arg(long)]
        hr_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the invariant suite.
    Selftest,
}

/// Parses `argv` (program name first), runs the command and returns the process exit code:
/// 0 on success, 1 on usage or validation errors, 2 on runtime failures.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("CONTROLSR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { stage, config, resume } => {
            let stage = Stage::parse(&stage).ok_or_else(|| Error::Usage(format!("unknown stage {stage:?}; use vae, backbone or control")))?;
            let cfg = load_config(&config)?;
            let resume = resume.map(read_checkpoint).transpose()?;
            let out = train_loop(&cfg, stage, resume.as_ref())?;
            println!("{}", out.final_checkpoint.display());
            Ok(())
        }
        Command::Infer { ckpt, lr, out, alpha, beta, steps, seed, early_frac, late_frac, trace } => {
            let (store, cfg) = load_sampler_checkpoint::<f32>(&read_checkpoint(&ckpt)?)?;
            let lsa = LsaConfig { alpha, beta, n_steps: steps, early_frac, late_frac, seed };
            let img = read_ppm(&lr)?;
            let opts = SampleOptions { adjust: true, snapshot_every: trace.as_ref().map(|_| 1) };
            let res = sample(&store, &cfg.model, cfg.degrade.scale, &[img], &schedule_of(&cfg)?, &lsa, opts)?;
            write_ppm(&out, &res.images[0])?;
            if let Some(dir) = trace {
                write_text(dir.join("trace.csv"), &res.trace.to_csv())?;
                for (step, imgs) in &res.trace.snapshots {
                    write_ppm(dir.join(format!("step_{step:03}.ppm")), &imgs[0])?;
                }
            }
            Ok(())
        }
        Command::Sweep { ckpt, lr_dir, hr_dir, alphas, betas, csv, steps, seed } => {
            let (store, cfg) = load_sampler_checkpoint::<f32>(&read_checkpoint(&ckpt)?)?;
            let files = list_ppm(&lr_dir)?;
            if files.is_empty() {
                return Err(Error::validation("lr-dir", format!("no .ppm files in {}", lr_dir.display())));
            }
            let lrs = files.iter().map(read_ppm).collect::<Result<Vec<_>>>()?;
            let refs = match &hr_dir {
                Some(d) => files.iter().map(|f| read_ppm(d.join(f.file_name().expect("file")))).collect::<Result<Vec<_>>>()?,
                None => lrs.iter().map(|im| upsample_lr(im, cfg.degrade.scale)).collect(),
            };
            let reference = if hr_dir.is_some() { "hr" } else { "bicubic" };
            let text = sweep(&store, &cfg, &lrs, &refs, &alphas, &betas, steps, seed, reference)?;
            write_text(&csv, &text)
        }
        Command::Probe { ckpt, lr, outdir, baseline_ckpt, t, seed } => probe_command(&ckpt, &lr, &outdir, baseline_ckpt.as_deref(), t, seed),
        Command::Degrade { hr_dir, out_dir, config } => {
            let cfg = load_config(&config)?;
            for (i, f) in list_ppm(&hr_dir)?.iter().enumerate() {
                let hr = read_ppm(f)?;
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.data_seed.wrapping_add(i as u64));
                let lr = degrade_image(&hr, &cfg.degrade, &mut rng)?;
                write_ppm(out_dir.join(f.file_name().expect("file")), &lr)?;
            }
            Ok(())
        }
        Command::Selftest => {
            let results = crate::selftest::run();
            let mut failed = 0;
            for r in &results {
                match &r.outcome {
                    Ok(msg) => println!("PASS {}: {msg}", r.name),
                    Err(msg) => {
                        failed += 1;
                        println!("FAIL {}: {msg}", r.name);
                    }
                }
            }
            if failed > 0 {
                return Err(Error::validation("selftest", format!("{failed} of {} checks failed", results.len())));
            }
            Ok(())
        }
    }
}

fn schedule_of(cfg: &RunConfig) -> Result<NoiseSchedule> {
    make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end)
}

/// Sweep CSV: one row per (α, β) cell with mean PSNR, SSIM, HF energy and latent distance.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    store: &ParamStore<f32>,
    cfg: &RunConfig,
    lrs: &[ImageBuffer],
    refs: &[ImageBuffer],
    alphas: &[f64],
    betas: &[f64],
    steps: usize,
    seed: u64,
    reference: &str,
) -> Result<String> {
    let schedule = schedule_of(cfg)?;
    let cells: Vec<(f64, f64)> = alphas.iter().flat_map(|&a| betas.iter().map(move |&b| (a, b))).collect();
    let rows = cells
        .par_iter()
        .map(|&(alpha, beta)| -> Result<String> {
            let lsa = LsaConfig { alpha, beta, n_steps: steps, seed, ..LsaConfig::default() };
            let out = sample(store, &cfg.model, cfg.degrade.scale, lrs, &schedule, &lsa, SampleOptions::default())?;
            let n = lrs.len() as f64;
            let (mut p, mut s, mut hf) = (0.0, 0.0, 0.0);
            for (img, r) in out.images.iter().zip(refs) {
                p += psnr(img, r, true)? / n;
                s += ssim(img, r, true)? / n;
                hf += hf_energy_fraction(&img.to_tensor::<f64>())? / n;
            }
            let dist = out.final_distances()?.iter().sum::<f64>() / n;
            Ok(format!("{alpha},{beta},{p:.4},{s:.4},{hf:.6},{dist:.6},{reference}\n"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(std::iter::once("alpha,beta,psnr,ssim,hf_energy,dist_lr,reference\n".to_string()).chain(rows).collect())
}

fn probe_command(ckpt: &Path, lr: &Path, outdir: &Path, baseline: Option<&Path>, t: Option<usize>, seed: u64) -> Result<()> {
    let (store, cfg) = load_sampler_checkpoint::<f64>(&read_checkpoint(ckpt)?)?;
    let schedule = schedule_of(&cfg)?;
    let t = t.unwrap_or(cfg.schedule.timesteps / 2);
    if t >= cfg.schedule.timesteps {
        return Err(Error::validation("t", format!("{t} out of range 0..{}", cfg.schedule.timesteps)));
    }
    let img = read_ppm(lr)?;
    let sig = probe_signals(&store, &cfg.model, &img, cfg.degrade.scale, &schedule, t, seed)?;
    let ours = kl_to_lr(&sig.fused, &sig.x_lr)?;
    let base = match baseline {
        Some(p) => {
            let (bstore, bcfg) = load_sampler_checkpoint::<f64>(&read_checkpoint(p)?)?;
            let b = probe_signals(&bstore, &bcfg.model, &img, bcfg.degrade.scale, &schedule, t, seed)?;
            Some(kl_to_lr(&b.fused, &b.x_lr)?)
        }
        None => None,
    };
    let name = lr.file_name().map_or("image".into(), |n| n.to_string_lossy().into_owned());
    let (kb, diff) = base.map_or((String::new(), String::new()), |b| (format!("{b}"), format!("{}", diff_kl(b, ours))));
    write_text(outdir.join("kl.csv"), &format!("image,kl_dpm_gspm,kl_baseline,diff\n{name},{ours},{kb},{diff}\n"))?;

    let mut spectrum = String::from("branch,tap,radius,log_power\n");
    let mut hf = String::from("branch,tap,hf_energy\n");
    let mut branches = vec![("dpm", &sig.dpm), ("fused", &sig.fused)];
    if let Some(g) = &sig.gspm {
        branches.insert(1, ("gspm", g));
    }
    for (branch, taps) in branches {
        for (k, tap) in taps.iter().enumerate() {
            for (r, v) in power_spectrum(tap)?.bins {
                spectrum.push_str(&format!("{branch},{k},{r},{v}\n"));
            }
            hf.push_str(&format!("{branch},{k},{}\n", hf_energy_fraction(tap)?));
            if tap.dim(1) >= 3 {
                let (view, _) = pca_project(tap)?;
                write_ppm(outdir.join(format!("pca_{branch}_{k}.ppm")), &view)?;
            }
        }
    }
    write_text(outdir.join("spectrum.csv"), &spectrum)?;
    write_text(outdir.join("hf.csv"), &hf)
}
