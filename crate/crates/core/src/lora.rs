//! Low-rank adapters `W + scale·B·A` on linear and convolution layers.
//!
//! A linear layer `name` with weight `[out, in]` is adapted by `name.lora.A` `[r, in]` and
//! `name.lora.B` `[out, r]`. A `k×k` convolution with weight `[cout, cin, k, k]` is adapted by
//! `name.lora.A` `[r, cin, k, k]` (a convolution with the base stride and padding) followed by
//! `name.lora.B` `[cout, r, 1, 1]`. `B` starts at zero, so a fresh adapter is an exact no-op.

use controlsr_tensor::{gemm, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init};
use crate::params::ParamStore;

pub const A_STD: f64 = 0.02;

pub fn a_name(layer: &str) -> String {
    format!("{layer}.lora.A")
}

pub fn b_name(layer: &str) -> String {
    format!("{layer}.lora.B")
}

pub fn is_lora_name(name: &str) -> bool {
    name.contains(".lora.")
}

pub fn is_adapted<T: Scalar>(store: &ParamStore<T>, layer: &str) -> bool {
    store.contains(&b_name(layer))
}

/// Rank actually used for a layer with the given fan-in and fan-out.
pub fn effective_rank(rank: usize, fan_in: usize, fan_out: usize) -> usize {
    rank.min(fan_in).min(fan_out).max(1)
}

/// Plain-tensor adapter for a layer with `in_features` inputs per position.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    /// `[r, in_features]`
    pub a: Tensor<T>,
    /// `[out_features, r]`
    pub b: Tensor<T>,
    pub scale: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(a: Tensor<T>, b: Tensor<T>, scale: f64) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.dim(0) != b.dim(1) {
            return Err(Error::validation("lora", format!("A {:?} and B {:?} do not compose", a.shape(), b.shape())));
        }
        let r = a.dim(0);
        if r == 0 || r > a.dim(1).min(b.dim(0)) {
            return Err(Error::validation("lora.rank", format!("{r} exceeds min(in, out) or is zero")));
        }
        Ok(Self { a, b, scale })
    }

    /// Fresh adapter: `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn init<R: Rng + ?Sized>(in_features: usize, out_features: usize, rank: usize, rng: &mut R) -> Self {
        let r = effective_rank(rank, in_features, out_features);
        Self { a: Tensor::randn(&[r, in_features], A_STD, rng), b: Tensor::zeros(&[out_features, r]), scale: 1.0 }
    }

    pub fn rank(&self) -> usize {
        self.a.dim(0)
    }

    pub fn in_features(&self) -> usize {
        self.a.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.b.dim(0)
    }

    /// `scale·B·A`, shape `[out, in]`.
    pub fn delta_weight(&self) -> Tensor<T> {
        let (o, r, i) = (self.out_features(), self.rank(), self.in_features());
        let mut w = vec![T::zero(); o * i];
        gemm(false, false, o, r, i, T::of(self.scale), self.b.data(), self.a.data(), T::zero(), &mut w);
        Tensor::from_vec(&[o, i], w).expect("consistent dims")
    }
}

/// `base_out + scale·B(A(x))` per position. `x` is `[.., in]` (rank 2) or `[n, in, h, w]` (rank 4),
/// and `base_out` has the matching output layout.
pub fn lora_apply<T: Scalar>(base_out: &Tensor<T>, x: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let (fin, fout) = (adapter.in_features(), adapter.out_features());
    let dw = adapter.delta_weight();
    match x.shape().len() {
        2 => {
            if x.dim(1) != fin || base_out.shape() != [x.dim(0), fout] {
                return Err(Error::validation("lora input", format!("x {:?}, base {:?}, in {fin}, out {fout}", x.shape(), base_out.shape())));
            }
            let mut out = base_out.data().to_vec();
            gemm(false, true, x.dim(0), fin, fout, T::one(), x.data(), dw.data(), T::one(), &mut out);
            Ok(Tensor::from_vec(base_out.shape(), out)?)
        }
        4 => {
            let (n, c, h, w) = x.dims4()?;
            if c != fin || base_out.shape() != [n, fout, h, w] {
                return Err(Error::validation("lora input", format!("x {:?}, base {:?}, in {fin}, out {fout}", x.shape(), base_out.shape())));
            }
            let hw = h * w;
            let mut out = base_out.data().to_vec();
            for b in 0..n {
                let xs = &x.data()[b * c * hw..(b + 1) * c * hw];
                let os = &mut out[b * fout * hw..(b + 1) * fout * hw];
                gemm(false, false, fout, fin, hw, T::one(), dw.data(), xs, T::one(), os);
            }
            Ok(Tensor::from_vec(base_out.shape(), out)?)
        }
        _ => Err(Error::validation("lora input", format!("rank {} unsupported", x.shape().len()))),
    }
}

/// Folds the adapter into `w`, whose leading axis is the output and whose remaining axes
/// flatten to the input features. Merging the same adapter twice adds it twice.
pub fn lora_merge<T: Scalar>(w: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let fout = *w.shape().first().unwrap_or(&0);
    let fin = if fout == 0 { 0 } else { w.len() / fout };
    if fout != adapter.out_features() || fin != adapter.in_features() {
        return Err(Error::validation("lora merge", format!("weight {:?} vs adapter {}→{}", w.shape(), adapter.in_features(), adapter.out_features())));
    }
    let dw = adapter.delta_weight();
    Ok(Tensor::from_vec(w.shape(), w.data().iter().zip(dw.data()).map(|(&a, &b)| a + b).collect())?)
}

/// Reads the adapter for a linear or convolution `layer` out of a store, flattening conv factors.
pub fn adapter_from_store<T: Scalar>(store: &ParamStore<T>, layer: &str, scale: f64) -> Result<LoraAdapter<T>> {
    let a = store.tensor(&a_name(layer))?;
    let b = store.tensor(&b_name(layer))?;
    let r = a.dim(0);
    let a = a.clone().reshape(&[r, a.len() / r])?;
    let b = b.clone().reshape(&[b.dim(0), r])?;
    LoraAdapter::new(a, b, scale)
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    pub fn lora_linear(&mut self, layer: &str, fin: usize, fout: usize, rank: usize) -> Result<()> {
        let r = effective_rank(rank, fin, fout);
        self.normal(&a_name(layer), &[r, fin], A_STD)?;
        self.zeros(&b_name(layer), &[fout, r])
    }

    pub fn lora_conv(&mut self, layer: &str, cin: usize, cout: usize, k: usize, rank: usize) -> Result<()> {
        let r = effective_rank(rank, cin * k * k, cout);
        self.normal(&a_name(layer), &[r, cin, k, k], A_STD)?;
        self.zeros(&b_name(layer), &[cout, r, 1, 1])
    }
}

pub(crate) fn conv_delta<T: Scalar>(ctx: &mut Ctx<T>, layer: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let a = ctx.p(&a_name(layer))?;
    let b = ctx.p(&b_name(layer))?;
    let h = ctx.g.conv2d(x, a, stride, pad)?;
    let y = ctx.g.conv2d(h, b, 1, 0)?;
    Ok(scaled(ctx, y))
}

pub(crate) fn linear_delta<T: Scalar>(ctx: &mut Ctx<T>, layer: &str, x: Var) -> Result<Var> {
    let a = ctx.p(&a_name(layer))?;
    let b = ctx.p(&b_name(layer))?;
    let h = ctx.g.linear(x, a)?;
    let y = ctx.g.linear(h, b)?;
    Ok(scaled(ctx, y))
}

fn scaled<T: Scalar>(ctx: &mut Ctx<T>, y: Var) -> Var {
    if ctx.lora_scale == 1.0 {
        y
    } else {
        ctx.g.scale(y, ctx.lora_scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn dense(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
        let (m, fin, fout) = (x.dim(0), x.dim(1), w.dim(0));
        let mut out = vec![0.0; m * fout];
        for i in 0..m {
            for o in 0..fout {
                out[i * fout + o] = (0..fin).map(|j| x.data()[i * fin + j] * w.data()[o * fin + j]).sum();
            }
        }
        Tensor::from_vec(&[m, fout], out).unwrap()
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let ad = LoraAdapter::<f64>::init(6, 5, 16, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(ad.rank(), 5);
        let x = rand_t(&[3, 6], 2);
        let base = rand_t(&[3, 5], 3);
        assert_eq!(lora_apply(&base, &x, &ad).unwrap(), base);
        let w = rand_t(&[5, 6], 4);
        assert_eq!(lora_merge(&w, &ad).unwrap(), w);
    }

    #[test]
    fn identity_down_projection_adds_bx() {
        let n = 4;
        let eye = Tensor::from_vec(&[n, n], (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let b = rand_t(&[n, n], 5);
        let ad = LoraAdapter::new(eye, b.clone(), 1.0).unwrap();
        let x = rand_t(&[2, n], 6);
        let base = rand_t(&[2, n], 7);
        let expect = base.add(&dense(&x, &b)).unwrap();
        assert!(lora_apply(&base, &x, &ad).unwrap().max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn merged_forward_matches_unmerged() {
        let w = rand_t(&[4, 4], 8);
        let ad = LoraAdapter::new(rand_t(&[2, 4], 9), rand_t(&[4, 2], 10), 1.0).unwrap();
        let x = rand_t(&[7, 4], 11);
        let unmerged = lora_apply(&dense(&x, &w), &x, &ad).unwrap();
        let merged = dense(&x, &lora_merge(&w, &ad).unwrap());
        assert!(unmerged.max_abs_diff(&merged).unwrap() < 1e-5);
    }

    #[test]
    fn spatial_apply_matches_per_position() {
        let ad = LoraAdapter::new(rand_t(&[2, 3], 12), rand_t(&[5, 2], 13), 0.5).unwrap();
        let x = rand_t(&[2, 3, 2, 2], 14);
        let base = rand_t(&[2, 5, 2, 2], 15);
        let out = lora_apply(&base, &x, &ad).unwrap();
        let dw = ad.delta_weight();
        for b in 0..2 {
            for p in 0..4 {
                for o in 0..5 {
                    let want = base.data()[(b * 5 + o) * 4 + p]
                        + (0..3).map(|i| dw.data()[o * 3 + i] * x.data()[(b * 3 + i) * 4 + p]).sum::<f64>();
                    assert!((out.data()[(b * 5 + o) * 4 + p] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn double_merge_adds_twice() {
        let w = rand_t(&[4, 4], 16);
        let ad = LoraAdapter::new(rand_t(&[2, 4], 17), rand_t(&[4, 2], 18), 1.0).unwrap();
        let twice = lora_merge(&lora_merge(&w, &ad).unwrap(), &ad).unwrap();
        let expect = w.add(&ad.delta_weight().scale(2.0)).unwrap();
        assert!(twice.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let ad = LoraAdapter::<f64>::init(4, 4, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(lora_apply(&Tensor::zeros(&[1, 4]), &Tensor::zeros(&[1, 3]), &ad).is_err());
        assert!(lora_merge(&Tensor::zeros(&[4, 3]), &ad).is_err());
        assert!(LoraAdapter::new(Tensor::<f64>::zeros(&[5, 4]), Tensor::zeros(&[4, 5]), 1.0).is_err());
    }
}
