//! Noise schedules, forward noising, the reverse DDPM step and spaced timesteps.

use controlsr_tensor::{Scalar, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

/// Per-step β and ᾱ tables. Entry `k` corresponds to original timestep `timestep(k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    total: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    spaced_map: Option<Vec<usize>>,
}

/// Linear β from `beta_start` to `beta_end` over `t` steps.
pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::validation("timesteps", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::validation("beta_start", format!("need 0 < {beta_start} <= {beta_end} < 1")));
    }
    let beta: Vec<f64> = (0..t)
        .map(|i| if t == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64 })
        .collect();
    let mut alpha_bar = Vec::with_capacity(t);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { total: t, beta, alpha_bar, spaced_map: None })
}

/// Keeps `n` entries at positions `round(i·len/n)` and recomputes `β'_k = 1 − ᾱ_k/ᾱ_{k−1}`.
/// Adjacent picks keep their original β, so spacing with `n = len` reproduces `s` exactly.
pub fn space_schedule(s: &NoiseSchedule, n: usize) -> Result<NoiseSchedule> {
    let len = s.len();
    if n == 0 || n > len {
        return Err(Error::validation("steps", format!("need 1 <= steps <= {len}, got {n}")));
    }
    let mut picks: Vec<usize> = (0..n).map(|i| ((i * len) as f64 / n as f64).round() as usize).collect();
    picks.dedup();
    let alpha_bar: Vec<f64> = picks.iter().map(|&p| s.alpha_bar[p]).collect();
    let beta = (0..picks.len())
        .map(|k| {
            let prev = if k == 0 { None } else { Some(picks[k - 1]) };
            match prev {
                None if picks[0] == 0 => s.beta[0],
                Some(p) if p + 1 == picks[k] => s.beta[picks[k]],
                None => 1.0 - alpha_bar[0],
                Some(_) => 1.0 - alpha_bar[k] / alpha_bar[k - 1],
            }
        })
        .collect();
    let spaced_map = picks.iter().map(|&p| s.timestep(p)).collect();
    Ok(NoiseSchedule { total: s.total, beta, alpha_bar, spaced_map: Some(spaced_map) })
}

impl NoiseSchedule {
    /// Number of steps in this (possibly spaced) schedule.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Length of the underlying training schedule.
    pub fn total_timesteps(&self) -> usize {
        self.total
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn spaced_map(&self) -> Option<&[usize]> {
        self.spaced_map.as_deref()
    }

    /// Original timestep index of entry `k`, the value fed to the denoiser.
    pub fn timestep(&self, k: usize) -> usize {
        self.spaced_map.as_ref().map_or(k, |m| m[k])
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k >= self.len() {
            return Err(Error::validation("timestep", format!("{k} out of range 0..{}", self.len())));
        }
        Ok(())
    }

    /// Posterior standard deviation at entry `k`; zero at `k = 0`.
    pub fn sigma(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        ((1.0 - self.alpha_bar[k - 1]) / (1.0 - self.alpha_bar[k]) * self.beta[k]).sqrt()
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
    pub fn add_noise<T: Scalar>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_index(t)?;
        let (a, b) = (T::of(self.alpha_bar[t].sqrt()), T::of((1.0 - self.alpha_bar[t]).sqrt()));
        Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
    }

    /// [`add_noise`](Self::add_noise) with one timestep per batch item.
    pub fn add_noise_batch<T: Scalar>(&self, x0: &Tensor<T>, ts: &[usize], eps: &Tensor<T>) -> Result<Tensor<T>> {
        if ts.len() != x0.dim(0) {
            return Err(Error::validation("timestep", format!("{} timesteps for batch of {}", ts.len(), x0.dim(0))));
        }
        let per = x0.len() / ts.len().max(1);
        x0.expect_shape(eps.shape())?;
        let mut out = Vec::with_capacity(x0.len());
        for (i, &t) in ts.iter().enumerate() {
            self.check_index(t)?;
            let (a, b) = (T::of(self.alpha_bar[t].sqrt()), T::of((1.0 - self.alpha_bar[t]).sqrt()));
            let r = i * per..(i + 1) * per;
            out.extend(x0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(&x, &e)| a * x + b * e));
        }
        Ok(Tensor::from_vec(x0.shape(), out)?)
    }

    /// Posterior mean `(x_k − β'_k/√(1−ᾱ_k)·ε̂)/√(1−β'_k)`.
    pub fn ddpm_mean<T: Scalar>(&self, x: &Tensor<T>, eps_hat: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
        self.check_index(k)?;
        let b = self.beta[k];
        let c = T::of(b / (1.0 - self.alpha_bar[k]).sqrt());
        let inv = T::of(1.0 / (1.0 - b).sqrt());
        Ok(x.zip_map(eps_hat, |xv, e| (xv - c * e) * inv)?)
    }

    /// One reverse step from entry `k` to `k − 1`; draws noise only when `k > 0`.
    pub fn ddpm_step<T: Scalar, R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        eps_hat: &Tensor<T>,
        k: usize,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let mean = self.ddpm_mean(x, eps_hat, k)?;
        if k == 0 {
            return Ok(mean);
        }
        let z = Tensor::<T>::randn(x.shape(), 1.0, rng);
        let s = T::of(self.sigma(k));
        Ok(mean.zip_map(&z, |m, zv| m + s * zv)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.3, 0.5).unwrap();
        assert_eq!(s.beta(), &[0.3]);
        assert!((s.alpha_bar()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn final_alpha_bar_matches_direct_product() {
        let s = default_schedule();
        let mut direct = 1.0f64;
        for i in 0..1000 {
            direct *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar()[999] - direct).abs() < 1e-12);
        assert!((s.alpha_bar()[999] - 4.04e-5).abs() < 0.01e-5);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn spacing_ten_by_five() {
        let s = space_schedule(&make_schedule(10, 1e-4, 0.02).unwrap(), 5).unwrap();
        assert_eq!(s.spaced_map().unwrap(), &[0, 2, 4, 6, 8]);
        assert_eq!(s.len(), 5);
    }

    #[test]
    fn identity_spacing() {
        let s = default_schedule();
        let sp = space_schedule(&s, 1000).unwrap();
        for (a, b) in s.beta().iter().zip(sp.beta()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(space_schedule(&s, 1001).is_err());
        assert_eq!(space_schedule(&s, 50).unwrap().len(), 50);
    }

    #[test]
    fn identity_spacing_samples_identically() {
        let s = make_schedule(20, 1e-3, 0.2).unwrap();
        let sp = space_schedule(&s, 20).unwrap();
        let run = |sch: &NoiseSchedule| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut x = Tensor::<f64>::randn(&[1, 2, 2, 2], 1.0, &mut rng);
            for k in (0..sch.len()).rev() {
                let eps = x.scale(0.1);
                x = sch.ddpm_step(&x, &eps, k, &mut rng).unwrap();
            }
            x
        };
        assert_eq!(run(&s), run(&sp));
    }

    #[test]
    fn noise_limits() {
        let mut s = make_schedule(2, 0.1, 0.2).unwrap();
        s.alpha_bar = vec![1.0, 0.0];
        let x0 = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![1.5, -2.0]).unwrap();
        let eps = Tensor::from_vec(&[1, 1, 1, 2], vec![0.25, 0.75]).unwrap();
        assert_eq!(s.add_noise(&x0, 0, &eps).unwrap(), x0);
        assert_eq!(s.add_noise(&x0, 1, &eps).unwrap(), eps);
        assert!(s.add_noise(&x0, 0, &Tensor::zeros(&[1, 1, 2, 1])).is_err());
    }

    #[test]
    fn noising_preserves_unit_variance() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::<f64>::randn(&[1, 1, 1, 100_000], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[1, 1, 1, 100_000], 1.0, &mut rng);
        let xt = s.add_noise(&x0, 500, &eps).unwrap();
        let m = xt.mean();
        let var = xt.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / xt.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn ddpm_single_step_recovers_x0() {
        let s = space_schedule(&default_schedule(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::<f64>::randn(&[2, 4, 2, 2], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[2, 4, 2, 2], 1.0, &mut rng);
        let xt = s.add_noise(&x0, 0, &eps).unwrap();
        let back = s.ddpm_step(&xt, &eps, 0, &mut rng).unwrap();
        assert!(back.max_abs_diff(&x0).unwrap() < 1e-4);
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = space_schedule(&default_schedule(), 50).unwrap();
        assert_eq!(s.sigma(0), 0.0);
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 0.3);
        let e = Tensor::<f64>::full(&[1, 1, 2, 2], 0.1);
        let a = s.ddpm_step(&x, &e, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = s.ddpm_step(&x, &e, 0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_eps_mean_rescales() {
        let s = space_schedule(&default_schedule(), 50).unwrap();
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![1.0, -3.0]).unwrap();
        let k = 17;
        let m = s.ddpm_mean(&x, &Tensor::zeros(&[1, 1, 1, 2]), k).unwrap();
        let f = 1.0 / (1.0 - s.beta()[k]).sqrt();
        assert!((m.data()[0] - f).abs() < 1e-12 && (m.data()[1] + 3.0 * f).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn alpha_bar_invariants(t in 1usize..400, b0 in 1e-5f64..0.05, extra in 0.0f64..0.5) {
            let s = make_schedule(t, b0, (b0 + extra).min(0.999)).unwrap();
            let mut acc = 1.0;
            for (i, b) in s.beta().iter().enumerate() {
                acc *= 1.0 - b;
                prop_assert!((acc - s.alpha_bar()[i]).abs() < 1e-6);
                if i > 0 {
                    prop_assert!(s.alpha_bar()[i] < s.alpha_bar()[i - 1]);
                }
            }
            let n = 1 + t / 3;
            let sp = space_schedule(&s, n).unwrap();
            let map = sp.spaced_map().unwrap();
            prop_assert!(map.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn add_noise_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..100) {
            let s = default_schedule();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x1 = Tensor::<f64>::randn(&[1, 2, 2, 2], 1.0, &mut rng);
            let x2 = Tensor::<f64>::randn(&[1, 2, 2, 2], 1.0, &mut rng);
            let e1 = Tensor::<f64>::randn(&[1, 2, 2, 2], 1.0, &mut rng);
            let e2 = Tensor::<f64>::randn(&[1, 2, 2, 2], 1.0, &mut rng);
            let lhs = s.add_noise(&x1.scale(a).add(&x2.scale(b)).unwrap(), 300, &e1.scale(a).add(&e2.scale(b)).unwrap()).unwrap();
            let rhs = s.add_noise(&x1, 300, &e1).unwrap().scale(a).add(&s.add_noise(&x2, 300, &e2).unwrap().scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-6);
        }
    }
}
