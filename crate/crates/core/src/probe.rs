//! Diagnostics and metrics: spatial KL between signals and the LR embedding, PCA false
//! color, radially averaged power spectra, high-frequency energy, PSNR and SSIM.

use controlsr_tensor::{Scalar, Tensor};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::store::ImageBuffer;

pub const PROB_FLOOR: f64 = 1e-12;
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const PCA_ITERS: usize = 100;
pub const PCA_TOL: f64 = 1e-8;

/// Positive weights over an `h×w` grid summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialDistribution {
    pub h: usize,
    pub w: usize,
    pub p: Vec<f64>,
}

fn single_item<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if n != 1 {
        return Err(Error::validation("probe", format!("expected a single batch item, got {n}")));
    }
    Ok((c, h, w))
}

fn channel_mean<T: Scalar>(x: &Tensor<T>, item: usize) -> Result<Vec<f64>> {
    let (_, c, h, w) = x.dims4()?;
    let hw = h * w;
    let base = item * c * hw;
    let mut out = vec![0.0; hw];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&x.data()[base + ch * hw..base + (ch + 1) * hw]) {
            *o += v.as_f64();
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    Ok(out)
}

fn bilinear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let ratio = inp as f64 / out as f64;
    (0..out)
        .map(|u| {
            let s = ((u as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Half-pixel bilinear resize of a plane with clamped edges.
pub fn resize_bilinear(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let ys = bilinear_taps(out_h, h);
    let xs = bilinear_taps(out_w, w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Channel mean, bilinear resize to `target`, spatial softmax, then a floor at
/// [`PROB_FLOOR`] and renormalization.
pub fn to_distribution<T: Scalar>(x: &Tensor<T>, target: (usize, usize)) -> Result<SpatialDistribution> {
    let (_, h, w) = single_item(x)?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::validation("probe", "target grid must be non-empty"));
    }
    let plane = resize_bilinear(&channel_mean(x, 0)?, h, w, th, tw);
    let m = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = plane.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v = (*v / s).max(PROB_FLOOR));
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    Ok(SpatialDistribution { h: th, w: tw, p })
}

/// `Σ P·ln(P/Q)` in nats.
pub fn kl_divergence(p: &SpatialDistribution, q: &SpatialDistribution) -> Result<f64> {
    if (p.h, p.w) != (q.h, q.w) || p.p.len() != q.p.len() {
        return Err(Error::validation("kl", format!("grid {}x{} vs {}x{}", p.h, p.w, q.h, q.w)));
    }
    Ok(p.p.iter().zip(&q.p).map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum::<f64>().max(0.0))
}

/// `kl_baseline − kl_ours`; positive when ours stays closer to the LR embedding.
pub fn diff_kl(kl_baseline: f64, kl_ours: f64) -> f64 {
    kl_baseline - kl_ours
}

/// Mean over scales of `KL(x_lr ‖ signal)`, with `x_lr` resized to each signal's grid.
pub fn kl_to_lr<T: Scalar>(signals: &[Tensor<T>], x_lr: &Tensor<T>) -> Result<f64> {
    if signals.is_empty() {
        return Err(Error::validation("kl", "no control signals"));
    }
    let mut total = 0.0;
    for s in signals {
        let (_, h, w) = single_item(s)?;
        total += kl_divergence(&to_distribution(x_lr, (h, w))?, &to_distribution(s, (h, w))?)?;
    }
    Ok(total / signals.len() as f64)
}

/// Principal axes of the per-position channel vectors of one feature map.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit eigenvectors, largest variance first.
    pub axes: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

fn samples<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = single_item(x)?;
    Ok((c, h * w, x.data().iter().map(|v| v.as_f64()).collect()))
}

/// Covariance (population normalization) of channels over positions, plus the channel means.
pub fn channel_covariance<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (c, n, d) = samples(x)?;
    let mean: Vec<f64> = (0..c).map(|ch| d[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; c * c];
    for a in 0..c {
        for b in a..c {
            let s: f64 = (0..n).map(|i| (d[a * n + i] - mean[a]) * (d[b * n + i] - mean[b])).sum::<f64>() / n as f64;
            cov[a * c + b] = s;
            cov[b * c + a] = s;
        }
    }
    Ok((cov, mean))
}

fn power_iteration(cov: &[f64], c: usize) -> (Vec<f64>, f64) {
    let col = (0..c)
        .max_by(|&i, &j| {
            let ni: f64 = (0..c).map(|r| cov[r * c + i].powi(2)).sum();
            let nj: f64 = (0..c).map(|r| cov[r * c + j].powi(2)).sum();
            ni.total_cmp(&nj)
        })
        .unwrap_or(0);
    let mut v: Vec<f64> = (0..c).map(|r| cov[r * c + col] + if r == col { 1e-3 } else { 0.0 }).collect();
    normalize(&mut v);
    for _ in 0..PCA_ITERS {
        let mut nv: Vec<f64> = (0..c).map(|r| (0..c).map(|k| cov[r * c + k] * v[k]).sum()).collect();
        if normalize(&mut nv) == 0.0 {
            break;
        }
        let delta = nv.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = nv;
        if delta < PCA_TOL {
            break;
        }
    }
    let lambda: f64 = (0..c).map(|r| v[r] * (0..c).map(|k| cov[r * c + k] * v[k]).sum::<f64>()).sum();
    (v, lambda)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Top `k` principal axes by power iteration with deflation.
pub fn pca<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Pca> {
    let (mut cov, mean) = channel_covariance(x)?;
    let c = mean.len();
    if k > c {
        return Err(Error::validation("pca", format!("{k} components from {c} channels")));
    }
    let mut axes = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for _ in 0..k {
        let (v, lambda) = power_iteration(&cov, c);
        for r in 0..c {
            for s in 0..c {
                cov[r * c + s] -= lambda * v[r] * v[s];
            }
        }
        axes.push(v);
        variances.push(lambda.max(0.0));
    }
    Ok(Pca { mean, axes, variances })
}

/// Per-position scores on each axis of `p`.
pub fn pca_scores<T: Scalar>(x: &Tensor<T>, p: &Pca) -> Result<Vec<Vec<f64>>> {
    let (c, n, d) = samples(x)?;
    Ok(p.axes
        .iter()
        .map(|axis| (0..n).map(|i| (0..c).map(|ch| (d[ch * n + i] - p.mean[ch]) * axis[ch]).sum()).collect())
        .collect())
}

fn min_max(v: &[f64]) -> Vec<f32> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| ((x - lo) / (hi - lo)) as f32).collect()
}

/// False-color PCA view: the top three components, each min-max scaled to `[0, 1]`.
/// Returns the image and whether the degenerate-covariance fallback (raw first three
/// channels) was used.
pub fn pca_project<T: Scalar>(x: &Tensor<T>) -> Result<(ImageBuffer, bool)> {
    let (c, h, w) = single_item(x)?;
    if c < 3 {
        return Err(Error::validation("pca", format!("need at least 3 channels, got {c}")));
    }
    let (cov, _) = channel_covariance(x)?;
    let trace: f64 = (0..c).map(|i| cov[i * c + i]).sum();
    let (planes, fallback) = if trace < 1e-12 {
        log::warn!("degenerate covariance; showing the first three channels");
        let d: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
        ((0..3).map(|ch| d[ch * h * w..(ch + 1) * h * w].to_vec()).collect::<Vec<_>>(), true)
    } else {
        (pca_scores(x, &pca(x, 3)?)?, false)
    };
    let scaled: Vec<Vec<f32>> = planes.iter().map(|p| min_max(p)).collect();
    let mut data = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        data.extend(scaled.iter().map(|p| p[i]));
    }
    Ok((ImageBuffer::new(h, w, data)?, fallback))
}

/// `|DFT|²` of an `h×w` plane, row-major.
pub fn power_2d(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf.iter().map(|z| z.norm_sqr()).collect()
}

/// Radial frequency of DFT bin `(y, x)` in cycles per image.
pub fn radius(y: usize, x: usize, h: usize, w: usize) -> f64 {
    let fy = y.min(h - y) as f64;
    let fx = x.min(w - x) as f64;
    (fy * fy + fx * fx).sqrt()
}

/// Mean `log₁₀(power + 1e-12)` per integer radius `0..=Nyquist`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialSpectrum {
    pub bins: Vec<(usize, f64)>,
}

impl RadialSpectrum {
    /// Radius with the largest mean log-power outside DC.
    pub fn peak(&self) -> Option<usize> {
        self.bins.iter().skip(1).max_by(|a, b| a.1.total_cmp(&b.1)).map(|b| b.0)
    }
}

/// Radially averaged power spectrum of the channel mean of a single-item tensor.
pub fn power_spectrum<T: Scalar>(x: &Tensor<T>) -> Result<RadialSpectrum> {
    let (_, h, w) = single_item(x)?;
    let power = power_2d(&channel_mean(x, 0)?, h, w);
    let nyquist = h.min(w) / 2;
    let mut sums = vec![0.0; nyquist + 1];
    let mut counts = vec![0usize; nyquist + 1];
    for y in 0..h {
        for xx in 0..w {
            let r = radius(y, xx, h, w).round() as usize;
            if r <= nyquist {
                sums[r] += (power[y * w + xx] + PROB_FLOOR).log10();
                counts[r] += 1;
            }
        }
    }
    let bins = (0..=nyquist)
        .map(|r| (r, if counts[r] == 0 { PROB_FLOOR.log10() } else { sums[r] / counts[r] as f64 }))
        .collect();
    Ok(RadialSpectrum { bins })
}

/// Share of non-DC spectral energy at radius above Nyquist/2, pooled over every plane
/// (batch item and channel). Zero for constant input.
pub fn hf_energy_fraction<T: Scalar>(x: &Tensor<T>) -> Result<f64> {
    let (n, c, h, w) = x.dims4()?;
    let half = h.min(w) as f64 / 4.0;
    let (mut hi, mut total) = (0.0, 0.0);
    for plane in x.data().chunks(h * w).take(n * c) {
        let p: Vec<f64> = plane.iter().map(|v| v.as_f64()).collect();
        let power = power_2d(&p, h, w);
        for y in 0..h {
            for xx in 0..w {
                if y == 0 && xx == 0 {
                    continue;
                }
                let e = power[y * w + xx];
                total += e;
                if radius(y, xx, h, w) > half {
                    hi += e;
                }
            }
        }
    }
    if total <= 1e-20 * (n * c * h * w) as f64 {
        return Ok(0.0);
    }
    Ok(hi / total)
}

fn luma(img: &ImageBuffer) -> Vec<f64> {
    img.data().chunks(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
}

fn planes(img: &ImageBuffer, on_y: bool) -> Vec<Vec<f64>> {
    if on_y {
        return vec![luma(img)];
    }
    (0..3).map(|c| img.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect()).collect()
}

fn same_shape(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::validation(
            "metric",
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    Ok(())
}

/// `10·log₁₀(1/MSE)` on the `[0, 1]` scale, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, on_y: bool) -> Result<f64> {
    same_shape(a, b)?;
    let (pa, pb) = (planes(a, on_y), planes(b, on_y));
    let count = pa.iter().map(Vec::len).sum::<usize>() as f64;
    let mse: f64 = pa.iter().zip(&pb).flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).powi(2))).sum::<f64>() / count;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - wh {
        for x0 in 0..=w - ww {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    let (u, v) = (a[y * w + x], b[y * w + x]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    total / count as f64
}

/// Mean SSIM over all 8×8 windows with uniform weights.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, on_y: bool) -> Result<f64> {
    same_shape(a, b)?;
    let (pa, pb) = (planes(a, on_y), planes(b, on_y));
    let (h, w) = (a.height(), a.width());
    Ok(pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, h, w)).sum::<f64>() / pa.len() as f64)
}
