//! Run configuration: a JSON object with flat keys, optionally grouped one level deep
//! (`{"model": {"unet_width": 32}}` is the same as `{"model.unet_width": 32}`).

use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Sampler-time latent adjustment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct LsaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub n_steps: usize,
    pub early_frac: f64,
    pub late_frac: f64,
    pub seed: u64,
}

impl Default for LsaConfig {
    fn default() -> Self {
        Self { alpha: 0.01, beta: 0.01, n_steps: 50, early_frac: 0.4, late_frac: 0.8, seed: 0 }
    }
}

impl LsaConfig {
    pub fn validate(&self) -> Result<()> {
        non_negative("alpha", self.alpha)?;
        non_negative("beta", self.beta)?;
        unit_interval("early_frac", self.early_frac)?;
        unit_interval("late_frac", self.late_frac)?;
        if self.early_frac > self.late_frac {
            return Err(Error::validation("early_frac", "must not exceed late_frac"));
        }
        if self.n_steps == 0 {
            return Err(Error::validation("steps", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vae_width: usize,
    pub unet_width: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub cond_tokens: usize,
    pub heads: usize,
    pub norm_groups: usize,
    /// Key/value window side on the latent grid.
    pub window: usize,
    pub vae_lora_rank: usize,
    pub unet_lora_rank: usize,
    pub lora_scale: f64,
    pub use_gspm: bool,
    pub use_xattn: bool,
    pub window_partition: bool,
    /// ControlNet-only baseline: no GSPM and no window cross-attention.
    pub dpm_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vae_width: 32,
            unet_width: 64,
            time_dim: 128,
            cond_dim: 128,
            cond_tokens: 4,
            heads: 4,
            norm_groups: 8,
            window: 4,
            vae_lora_rank: 16,
            unet_lora_rank: 16,
            lora_scale: 1.0,
            use_gspm: true,
            use_xattn: true,
            window_partition: true,
            dpm_only: false,
        }
    }
}

impl ModelConfig {
    /// Width-8 micro model used by gradient checks.
    pub fn micro() -> Self {
        Self {
            vae_width: 8,
            unet_width: 8,
            time_dim: 8,
            cond_dim: 8,
            cond_tokens: 2,
            heads: 2,
            norm_groups: 2,
            window: 2,
            vae_lora_rank: 2,
            unet_lora_rank: 2,
            ..Self::default()
        }
    }

    pub fn gspm_enabled(&self) -> bool {
        self.use_gspm && !self.dpm_only
    }

    pub fn xattn_enabled(&self) -> bool {
        self.use_xattn && !self.dpm_only
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("model.vae_width", self.vae_width),
            ("model.unet_width", self.unet_width),
            ("model.time_dim", self.time_dim),
            ("model.cond_dim", self.cond_dim),
            ("model.cond_tokens", self.cond_tokens),
            ("model.heads", self.heads),
            ("model.norm_groups", self.norm_groups),
            ("model.window", self.window),
            ("model.vae_lora_rank", self.vae_lora_rank),
            ("model.unet_lora_rank", self.unet_lora_rank),
        ] {
            if v == 0 {
                return Err(Error::validation(k, "must be positive"));
            }
        }
        if self.unet_width % self.heads != 0 {
            return Err(Error::validation("model.heads", "must divide model.unet_width"));
        }
        if self.unet_width % self.norm_groups != 0 {
            return Err(Error::validation("model.norm_groups", "must divide model.unet_width"));
        }
        if self.cond_dim % 4 != 0 {
            return Err(Error::validation("model.cond_dim", "must be a multiple of 4"));
        }
        if self.cond_dim % self.cond_tokens != 0 {
            return Err(Error::validation("model.cond_tokens", "must divide model.cond_dim"));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::validation("model.time_dim", "must be even"));
        }
        if !self.lora_scale.is_finite() {
            return Err(Error::validation("model.lora_scale", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradeConfig {
    pub scale: usize,
    pub blur_sigma: (f64, f64),
    pub noise_sigma: (f64, f64),
    /// JPEG-style quality in `[1, 100]`; 100 disables quantization.
    pub quality: (f64, f64),
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self { scale: 4, blur_sigma: (0.2, 2.0), noise_sigma: (0.0, 0.04), quality: (40.0, 95.0) }
    }
}

impl DegradeConfig {
    /// Blur, noise and compression disabled.
    pub fn identity(scale: usize) -> Self {
        Self { scale, blur_sigma: (0.0, 0.0), noise_sigma: (0.0, 0.0), quality: (100.0, 100.0) }
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.scale) {
            return Err(Error::validation("degrade.scale", "must be 1, 2 or 4"));
        }
        for (k, (lo, hi)) in [("degrade.blur_sigma", self.blur_sigma), ("degrade.noise_sigma", self.noise_sigma), ("degrade.quality", self.quality)] {
            if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || lo > hi {
                return Err(Error::validation(k, format!("range [{lo}, {hi}] must be non-negative and ordered")));
            }
        }
        if self.quality.0 < 1.0 || self.quality.1 > 100.0 {
            return Err(Error::validation("degrade.quality", "must lie in [1, 100]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub schedule: ScheduleConfig,
    pub lsa: LsaConfig,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub image_size: usize,
    pub dataset_size: usize,
    pub checkpoint_every: usize,
    pub out_dir: String,
    pub model: ModelConfig,
    pub degrade: DegradeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            schedule: ScheduleConfig::default(),
            lsa: LsaConfig::default(),
            iters: 5000,
            batch: 4,
            lr: 5e-5,
            image_size: 64,
            dataset_size: 4,
            checkpoint_every: 1000,
            out_dir: "runs".into(),
            model: ModelConfig::default(),
            degrade: DegradeConfig::default(),
        }
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::validation(key, format!("{v} must be a finite value >= 0")));
    }
    Ok(())
}

fn unit_interval(key: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::validation(key, format!("{v} must lie in [0, 1]")));
    }
    Ok(())
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::validation(key, format!("expected a number, got {v}")))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64().ok_or_else(|| Error::validation(key, format!("expected a non-negative integer, got {v}")))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    let n = as_u64(key, v)?;
    usize::try_from(n).map_err(|_| Error::validation(key, "integer too large"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::validation(key, format!("expected true or false, got {v}")))
}

fn as_string(key: &str, v: &Value) -> Result<String> {
    v.as_str().map(str::to_owned).ok_or_else(|| Error::validation(key, format!("expected a string, got {v}")))
}

impl RunConfig {
    fn apply(&mut self, key: &str, v: &Value) -> Result<()> {
        let model_key = key.strip_prefix("model.").unwrap_or(key);
        let m = &mut self.model;
        match model_key {
            "vae_width" => return as_usize(key, v).map(|x| m.vae_width = x),
            "unet_width" => return as_usize(key, v).map(|x| m.unet_width = x),
            "time_dim" => return as_usize(key, v).map(|x| m.time_dim = x),
            "cond_dim" => return as_usize(key, v).map(|x| m.cond_dim = x),
            "cond_tokens" => return as_usize(key, v).map(|x| m.cond_tokens = x),
            "heads" => return as_usize(key, v).map(|x| m.heads = x),
            "norm_groups" => return as_usize(key, v).map(|x| m.norm_groups = x),
            "window" => return as_usize(key, v).map(|x| m.window = x),
            "vae_lora_rank" => return as_usize(key, v).map(|x| m.vae_lora_rank = x),
            "unet_lora_rank" => return as_usize(key, v).map(|x| m.unet_lora_rank = x),
            "lora_rank" => {
                let r = as_usize(key, v)?;
                m.vae_lora_rank = r;
                m.unet_lora_rank = r;
                return Ok(());
            }
            "lora_scale" => return as_f64(key, v).map(|x| m.lora_scale = x),
            "use_gspm" => return as_bool(key, v).map(|x| m.use_gspm = x),
            "use_xattn" => return as_bool(key, v).map(|x| m.use_xattn = x),
            "window_partition" => return as_bool(key, v).map(|x| m.window_partition = x),
            "dpm_only" => return as_bool(key, v).map(|x| m.dpm_only = x),
            _ if key.starts_with("model.") => return Err(Error::validation(key, "unknown key")),
            _ => {}
        }
        let d = &mut self.degrade;
        match key {
            "seed" => self.seed = as_u64(key, v)?,
            "data_seed" => self.data_seed = as_u64(key, v)?,
            "T" => self.schedule.timesteps = as_usize(key, v)?,
            "beta_start" => self.schedule.beta_start = as_f64(key, v)?,
            "beta_end" => self.schedule.beta_end = as_f64(key, v)?,
            "steps" => self.lsa.n_steps = as_usize(key, v)?,
            "alpha" => self.lsa.alpha = as_f64(key, v)?,
            "beta" => self.lsa.beta = as_f64(key, v)?,
            "early_frac" => self.lsa.early_frac = as_f64(key, v)?,
            "late_frac" => self.lsa.late_frac = as_f64(key, v)?,
            "iters" => self.iters = as_usize(key, v)?,
            "batch" => self.batch = as_usize(key, v)?,
            "lr" => self.lr = as_f64(key, v)?,
            "image_size" => self.image_size = as_usize(key, v)?,
            "dataset_size" => self.dataset_size = as_usize(key, v)?,
            "checkpoint_every" => self.checkpoint_every = as_usize(key, v)?,
            "out_dir" => self.out_dir = as_string(key, v)?,
            "degrade.scale" => d.scale = as_usize(key, v)?,
            "degrade.blur_sigma_min" => d.blur_sigma.0 = as_f64(key, v)?,
            "degrade.blur_sigma_max" => d.blur_sigma.1 = as_f64(key, v)?,
            "degrade.noise_sigma_min" => d.noise_sigma.0 = as_f64(key, v)?,
            "degrade.noise_sigma_max" => d.noise_sigma.1 = as_f64(key, v)?,
            "degrade.quality_min" => d.quality.0 = as_f64(key, v)?,
            "degrade.quality_max" => d.quality.1 = as_f64(key, v)?,
            _ => return Err(Error::validation(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.timesteps == 0 {
            return Err(Error::validation("T", "must be at least 1"));
        }
        if !(s.beta_start > 0.0 && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return Err(Error::validation("beta_start", "need 0 < beta_start <= beta_end < 1"));
        }
        self.lsa.validate()?;
        if self.lsa.n_steps > s.timesteps {
            return Err(Error::validation("steps", format!("{} exceeds T = {}", self.lsa.n_steps, s.timesteps)));
        }
        if self.batch == 0 {
            return Err(Error::validation("batch", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::validation("lr", "must be a positive number"));
        }
        if self.dataset_size == 0 {
            return Err(Error::validation("dataset_size", "must be at least 1"));
        }
        self.model.validate()?;
        self.degrade.validate()?;
        let unit = 8 * self.degrade.scale;
        if self.image_size == 0 || self.image_size % unit != 0 {
            return Err(Error::validation("image_size", format!("must be a positive multiple of {unit}")));
        }
        let latent = self.image_size / 8;
        if latent % 2 != 0 {
            return Err(Error::validation("image_size", "latent side must be even (image_size multiple of 16)"));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::parse("config", e.column().saturating_sub(1), e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(Error::validation("config", "top level must be a JSON object"));
        };
        let mut cfg = RunConfig::default();
        for (key, v) in &obj {
            match v {
                Value::Object(inner) => {
                    for (sub, v2) in inner {
                        if v2.is_object() || v2.is_array() {
                            return Err(Error::validation(format!("{key}.{sub}"), "nesting deeper than two levels"));
                        }
                        cfg.apply(&format!("{key}.{sub}"), v2)?;
                    }
                }
                Value::Array(_) => return Err(Error::validation(key.as_str(), "arrays are not accepted")),
                _ => cfg.apply(key, v)?,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Value {
        let m = &self.model;
        let d = &self.degrade;
        let mut model = Map::new();
        model.insert("vae_width".into(), json!(m.vae_width));
        model.insert("unet_width".into(), json!(m.unet_width));
        model.insert("time_dim".into(), json!(m.time_dim));
        model.insert("cond_dim".into(), json!(m.cond_dim));
        model.insert("cond_tokens".into(), json!(m.cond_tokens));
        model.insert("heads".into(), json!(m.heads));
        model.insert("norm_groups".into(), json!(m.norm_groups));
        model.insert("window".into(), json!(m.window));
        model.insert("vae_lora_rank".into(), json!(m.vae_lora_rank));
        model.insert("unet_lora_rank".into(), json!(m.unet_lora_rank));
        model.insert("lora_scale".into(), json!(m.lora_scale));
        model.insert("use_gspm".into(), json!(m.use_gspm));
        model.insert("use_xattn".into(), json!(m.use_xattn));
        model.insert("window_partition".into(), json!(m.window_partition));
        model.insert("dpm_only".into(), json!(m.dpm_only));
        json!({
            "seed": self.seed,
            "data_seed": self.data_seed,
            "T": self.schedule.timesteps,
            "beta_start": self.schedule.beta_start,
            "beta_end": self.schedule.beta_end,
            "steps": self.lsa.n_steps,
            "alpha": self.lsa.alpha,
            "beta": self.lsa.beta,
            "early_frac": self.lsa.early_frac,
            "late_frac": self.lsa.late_frac,
            "iters": self.iters,
            "batch": self.batch,
            "lr": self.lr,
            "image_size": self.image_size,
            "dataset_size": self.dataset_size,
            "checkpoint_every": self.checkpoint_every,
            "out_dir": self.out_dir,
            "model": Value::Object(model),
            "degrade": {
                "scale": d.scale,
                "blur_sigma_min": d.blur_sigma.0,
                "blur_sigma_max": d.blur_sigma.1,
                "noise_sigma_min": d.noise_sigma.0,
                "noise_sigma_max": d.noise_sigma.1,
                "quality_min": d.quality.0,
                "quality_max": d.quality.1,
            },
        })
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json_str(&text)
}
