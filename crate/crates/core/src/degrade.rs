//! Synthetic LR generation (blur → bicubic resize → noise → block-DCT quantization) and a
//! procedural toy-image generator.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::store::{DegradeConfig, ImageBuffer};

/// Keys cubic convolution kernel parameter.
pub const BICUBIC_A: f64 = -0.5;

/// JPEG luminance quantization table, row-major over `(v, u)` frequencies.
pub const JPEG_LUMA: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69., 56.,
    14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81., 104., 113.,
    92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Planar single-channel image used by the resampling kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    fn clamped(&self, y: isize, x: isize) -> f64 {
        let yy = y.clamp(0, self.h as isize - 1) as usize;
        let xx = x.clamp(0, self.w as isize - 1) as usize;
        self.data[yy * self.w + xx]
    }
}

pub fn split_planes(img: &ImageBuffer) -> [Plane; 3] {
    let (h, w) = (img.height(), img.width());
    let mut planes = [(); 3].map(|_| Plane { h, w, data: Vec::with_capacity(h * w) });
    for px in img.data().chunks_exact(3) {
        for c in 0..3 {
            planes[c].data.push(px[c] as f64);
        }
    }
    planes
}

/// Interleaves planes back into an image, clamping to `[0, 1]`.
pub fn merge_planes(planes: &[Plane; 3]) -> ImageBuffer {
    let (h, w) = (planes[0].h, planes[0].w);
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for p in planes {
            data.push(p.data[i].clamp(0.0, 1.0) as f32);
        }
    }
    ImageBuffer::new(h, w, data).expect("clamped planes")
}

fn map_planes(img: &ImageBuffer, f: impl Fn(&Plane) -> Plane) -> ImageBuffer {
    let planes = split_planes(img);
    merge_planes(&[f(&planes[0]), f(&planes[1]), f(&planes[2])])
}

/// Keys cubic kernel with `a = −0.5`.
pub fn bicubic_weight(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four taps `(index, weight)` for output position `u` on a half-pixel-centered grid.
fn taps(u: usize, ratio: f64) -> [(isize, f64); 4] {
    let src = (u as f64 + 0.5) * ratio - 0.5;
    let base = src.floor() as isize;
    let mut out = [(0isize, 0.0); 4];
    for (j, slot) in out.iter_mut().enumerate() {
        let i = base - 1 + j as isize;
        *slot = (i, bicubic_weight(src - i as f64));
    }
    out
}

/// Separable bicubic resampling with clamped borders and no anti-aliasing prefilter.
pub fn resize_plane(p: &Plane, out_h: usize, out_w: usize) -> Plane {
    let rx = p.w as f64 / out_w as f64;
    let ry = p.h as f64 / out_h as f64;
    let mut rows = vec![0.0; p.h * out_w];
    for y in 0..p.h {
        for u in 0..out_w {
            rows[y * out_w + u] = taps(u, rx).iter().map(|&(i, wt)| wt * p.clamped(y as isize, i)).sum();
        }
    }
    let mid = Plane { h: p.h, w: out_w, data: rows };
    let mut data = vec![0.0; out_h * out_w];
    for v in 0..out_h {
        let t = taps(v, ry);
        for x in 0..out_w {
            data[v * out_w + x] = t.iter().map(|&(i, wt)| wt * mid.clamped(i, x as isize)).sum();
        }
    }
    Plane { h: out_h, w: out_w, data }
}

pub fn resize_bicubic(img: &ImageBuffer, out_h: usize, out_w: usize) -> ImageBuffer {
    map_planes(img, |p| resize_plane(p, out_h, out_w))
}

/// Normalized Gaussian taps of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

pub fn blur_plane(p: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            tmp[y * p.w + x] = k.iter().enumerate().map(|(j, wt)| wt * p.clamped(y as isize, x as isize + j as isize - r)).sum();
        }
    }
    let mid = Plane { h: p.h, w: p.w, data: tmp };
    let mut data = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            data[y * p.w + x] = k.iter().enumerate().map(|(j, wt)| wt * mid.clamped(y as isize + j as isize - r, x as isize)).sum();
        }
    }
    Plane { h: p.h, w: p.w, data }
}

pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> ImageBuffer {
    map_planes(img, |p| blur_plane(p, sigma))
}

/// Adds `N(0, σ²)` per value, clamped to `[0, 1]`.
pub fn add_gaussian_noise<R: Rng + ?Sized>(img: &ImageBuffer, sigma: f64, rng: &mut R) -> ImageBuffer {
    if sigma <= 0.0 {
        return img.clone();
    }
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    let data = img.data().iter().map(|&v| (v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32).collect();
    ImageBuffer::new(img.height(), img.width(), data).expect("clamped")
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Quantizer step sizes on the `[0, 1]` scale: `JPEG_LUMA · (100 − q)/50 / 255`.
pub fn quant_table(quality: f64) -> [f64; 64] {
    let s = (100.0 - quality) / 50.0;
    JPEG_LUMA.map(|v| v * s / 255.0)
}

/// Orthonormal 8×8 block DCT, rounding each coefficient to its quantizer step.
pub fn dct_quantize_plane(p: &Plane, quality: f64) -> Plane {
    if quality >= 100.0 {
        return p.clone();
    }
    let c = dct_basis();
    let q = quant_table(quality);
    let mut out = p.clone();
    for by in (0..p.h).step_by(8) {
        for bx in (0..p.w).step_by(8) {
            let mut block = [[0.0; 8]; 8];
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = p.clamped((by + y) as isize, (bx + x) as isize) - 0.5;
                }
            }
            let mut coef = [[0.0; 8]; 8];
            for v in 0..8 {
                for u in 0..8 {
                    let mut acc = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            acc += c[v][y] * c[u][x] * block[y][x];
                        }
                    }
                    let step = q[v * 8 + u].max(1e-12);
                    coef[v][u] = (acc / step).round() * step;
                }
            }
            for y in 0..8.min(p.h - by) {
                for x in 0..8.min(p.w - bx) {
                    let mut acc = 0.0;
                    for v in 0..8 {
                        for u in 0..8 {
                            acc += c[v][y] * c[u][x] * coef[v][u];
                        }
                    }
                    out.data[(by + y) * p.w + bx + x] = acc + 0.5;
                }
            }
        }
    }
    out
}

pub fn dct_quantize(img: &ImageBuffer, quality: f64) -> ImageBuffer {
    map_planes(img, |p| dct_quantize_plane(p, quality))
}

fn draw<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..=range.1)
    } else {
        range.0
    }
}

/// Blur → bicubic ↓scale → Gaussian noise → block-DCT quantization, with parameters
/// drawn from the configured ranges.
pub fn degrade_image<R: Rng + ?Sized>(hr: &ImageBuffer, cfg: &DegradeConfig, rng: &mut R) -> Result<ImageBuffer> {
    cfg.validate()?;
    let m = 8 * cfg.scale;
    if hr.height() % m != 0 || hr.width() % m != 0 {
        return Err(Error::validation("image", format!("{}x{} not divisible by {m}", hr.height(), hr.width())));
    }
    let sigma = draw(rng, cfg.blur_sigma);
    let noise = draw(rng, cfg.noise_sigma);
    let quality = draw(rng, cfg.quality);
    let img = gaussian_blur(hr, sigma);
    let img = if cfg.scale == 1 { img } else { resize_bicubic(&img, hr.height() / cfg.scale, hr.width() / cfg.scale) };
    let img = add_gaussian_noise(&img, noise, rng);
    Ok(dct_quantize(&img, quality))
}

/// Procedural image: a linear color gradient, a few anti-aliased ellipses and rectangles,
/// and a high-frequency sinusoidal texture.
pub fn synth_toy_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<ImageBuffer> {
    if size == 0 || size % 8 != 0 {
        return Err(Error::validation("size", format!("{size} is not a positive multiple of 8")));
    }
    let n = size as f64;
    let color = |rng: &mut R| [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
    let (c0, c1) = (color(rng), color(rng));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut px = vec![[0.0f64; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f64 + 0.5) / n - 0.5) * dx + ((y as f64 + 0.5) / n - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                px[y * size + x][c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let shapes = rng.random_range(2..=4);
    for _ in 0..shapes {
        let col = color(rng);
        let (cx, cy) = (rng.random_range(0.2..0.8) * n, rng.random_range(0.2..0.8) * n);
        let (rx, ry) = (rng.random_range(0.1..0.3) * n, rng.random_range(0.1..0.3) * n);
        let ellipse = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (ux, uy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                // signed distance in pixels, positive inside
                let d = if ellipse {
                    let r = ((ux / rx).powi(2) + (uy / ry).powi(2)).sqrt();
                    (1.0 - r) * rx.min(ry)
                } else {
                    (rx - ux.abs()).min(ry - uy.abs())
                };
                let cover = (d + 0.5).clamp(0.0, 1.0);
                for c in 0..3 {
                    let p = &mut px[y * size + x][c];
                    *p = *p * (1.0 - cover) + col[c] * cover;
                }
            }
        }
    }
    let amp = rng.random_range(0.04..0.09);
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let f = rng.random_range(0.3..0.45);
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (f * a.cos(), f * a.sin(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph)| (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).sin())
                .sum::<f64>()
                * amp
                / 2.0;
            for c in 0..3 {
                data.push((px[y * size + x][c] + tex).clamp(0.0, 1.0) as f32);
            }
        }
    }
    ImageBuffer::new(size, size, data)
}

/// `count` toy images, image `i` drawn from seed `seed + i`.
pub fn toy_dataset(count: usize, size: usize, seed: u64) -> Result<Vec<ImageBuffer>> {
    (0..count).map(|i| synth_toy_image(size, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)))).collect()
}

/// LR counterparts of `hrs`, image `i` degraded with seed `seed ^ i`-derived stream.
pub fn degrade_all(hrs: &[ImageBuffer], cfg: &DegradeConfig, seed: u64) -> Result<Vec<ImageBuffer>> {
    hrs.iter()
        .enumerate()
        .map(|(i, hr)| degrade_image(hr, cfg, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Plane {
        Plane { h: n, w: n, data: (0..n * n).map(|i| ((i / n) * 3 + (i % n) * 5) as f64 / (8.0 * n as f64)).collect() }
    }

    #[test]
    fn kernel_weights_partition_unity() {
        for f in [0.0, 0.13, 0.5, 0.77] {
            let s: f64 = (-1..=2).map(|i| bicubic_weight(f - i as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(bicubic_weight(0.0), 1.0);
        assert_eq!(bicubic_weight(1.0), 0.0);
        assert_eq!(bicubic_weight(2.5), 0.0);
    }

    #[test]
    fn downsample_matches_direct_convolution() {
        let p = ramp(16);
        let out = resize_plane(&p, 4, 4);
        for v in 0..4 {
            for u in 0..4 {
                let (sy, sx) = ((v as f64 + 0.5) * 4.0 - 0.5, (u as f64 + 0.5) * 4.0 - 0.5);
                let mut acc = 0.0;
                for y in 0..16 {
                    for x in 0..16 {
                        acc += bicubic_weight(sy - y as f64) * bicubic_weight(sx - x as f64) * p.at(y, x);
                    }
                }
                assert!((out.at(v, u) - acc).abs() < 1e-12, "({v},{u}): {} vs {acc}", out.at(v, u));
            }
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let p = ramp(8);
        let q = resize_plane(&p, 8, 8);
        for (a, b) in p.data.iter().zip(&q.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_pipeline() {
        let img = synth_toy_image(16, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let cfg = DegradeConfig::identity(1);
        let out = degrade_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0);
        }
    }

    #[test]
    fn scale_four_shape_and_determinism() {
        let img = synth_toy_image(64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = DegradeConfig::default();
        let a = degrade_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = degrade_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!((a.height(), a.width()), (16, 16));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(degrade_image(&synth_toy_image(40, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn quantization_at_full_quality_is_lossless_and_coarse_otherwise() {
        let p = ramp(8);
        assert_eq!(dct_quantize_plane(&p, 100.0), p);
        let q = dct_quantize_plane(&Plane { h: 8, w: 8, data: (0..64).map(|i| if (i / 8 + i % 8) % 2 == 0 { 0.53 } else { 0.47 }).collect() }, 10.0);
        let spread = q.data.iter().cloned().fold(f64::MIN, f64::max) - q.data.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.05, "checkerboard detail should be quantized away, spread {spread}");
    }

    #[test]
    fn blur_preserves_constants() {
        let p = Plane { h: 8, w: 8, data: vec![0.3; 64] };
        for v in blur_plane(&p, 1.5).data {
            assert!((v - 0.3).abs() < 1e-12);
        }
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn toy_images_reproducible_and_balanced() {
        let a = toy_dataset(3, 32, 77).unwrap();
        assert_eq!(a, toy_dataset(3, 32, 77).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..100 {
            let img = synth_toy_image(32, &mut rng).unwrap();
            let m = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.data().len() as f64;
            assert!((0.2..=0.8).contains(&m), "mean {m}");
        }
        assert!(synth_toy_image(12, &mut rng).is_err());
    }
}
