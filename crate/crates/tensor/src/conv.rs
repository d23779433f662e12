//! im2col convolution kernels.

use crate::scalar::{gemm, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kx: usize, wo: usize) -> (usize, usize) {
    let (s, off) = (g.stride as isize, kx as isize - g.pad as isize);
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let last = g.w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { ((last / s) as usize + 1).min(wo) };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, kx, wo);
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[first + j * g.stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, kx, wo);
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in line[first..first + hi - lo].iter_mut().zip(seg) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in seg.iter().enumerate() {
                            line[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = weight · im2col(x[n])`; `weight` is `(cout, cin, k, k)`.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], weight: &[T]) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * ho * wo;
    let rows = g.col_rows();
    let mut out = vec![T::zero(); batch * out_sz];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ho * wo] };
    for n in 0..batch {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        gemm(false, false, g.cout, rows, ho * wo, T::one(), weight, cols, T::zero(), &mut out[n * out_sz..(n + 1) * out_sz]);
    }
    out
}

/// Gradients of [`conv2d_forward`]. Either output may be skipped.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ho, wo) = g.out_hw();
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * ho * wo;
    let rows = g.col_rows();
    let mut dx = want_dx.then(|| vec![T::zero(); batch * in_sz]);
    let mut dw = want_dw.then(|| vec![T::zero(); g.cout * rows]);
    let mut col = vec![T::zero(); rows * ho * wo];
    for n in 0..batch {
        let dyn_ = &dy[n * out_sz..(n + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * in_sz..(n + 1) * in_sz];
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut col);
                &col
            };
            gemm(false, true, g.cout, ho * wo, rows, T::one(), dyn_, cols, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
            if g.is_pointwise() {
                gemm(true, false, rows, g.cout, ho * wo, T::one(), weight, dyn_, T::one(), dxn);
            } else {
                gemm(true, false, rows, g.cout, ho * wo, T::one(), weight, dyn_, T::zero(), &mut col);
                col2im_add(g, &col, dxn);
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; g.cout * ho * wo];
        for co in 0..g.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..g.cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    s += x[ci * g.h * g.w + iy as usize * g.w + ix as usize]
                                        * w[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_sum() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0), (3, 1, 2), (3, 3, 2)] {
            let g = ConvGeom { cin: 2, h: 6, w: 5, cout: 3, k, stride, pad };
            let x: Vec<f64> = (0..2 * 30).map(|i| (i as f64 * 0.7).sin()).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|i| (i as f64 * 1.3).cos()).collect();
            let got = conv2d_forward(&g, 1, &x, &w);
            let want = direct(&g, &x, &w);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} stride={stride}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 2), (3, 3, 2)] {
            let g = ConvGeom { cin: 2, h: 7, w: 5, cout: 3, k, stride, pad };
            let (ho, wo) = g.out_hw();
            let x: Vec<f64> = (0..2 * 35).map(|i| (i as f64 * 0.7).sin()).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|i| (i as f64 * 1.3).cos()).collect();
            let dy: Vec<f64> = (0..3 * ho * wo).map(|i| (i as f64 * 0.29).cos()).collect();
            let (dx, dw) = conv2d_backward(&g, 1, &x, &w, &dy, true, true);
            let (dx, dw) = (dx.unwrap(), dw.unwrap());
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let y = direct(&g, &x, &w);
            let lhs = dot(&y, &dy);
            assert!((lhs - dot(&x, &dx)).abs() < 1e-9, "dx k={k} stride={stride} pad={pad}");
            assert!((lhs - dot(&w, &dw)).abs() < 1e-9, "dw k={k} stride={stride} pad={pad}");
        }
    }
}
