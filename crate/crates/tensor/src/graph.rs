//! Reverse-mode autodiff over a linear tape.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`] walks the
//! tape in reverse and only propagates into nodes that transitively depend on a leaf
//! created with `requires_grad = true`, so frozen weights cost no weight-gradient GEMMs.

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    AddNc(Var, Var),
    AddTrailing(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Linear { x: Var, w: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    Silu(Var),
    GroupNorm { x: Var, rstd: Vec<T> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    ConcatChannels(Var, Var),
    Upsample2x(Var),
    MeanSpatial(Var),
    Gather { src: Var, idx: Vec<usize> },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn silu<T: Scalar>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

fn geometry(msg: impl Into<String>) -> TensorError {
    TensorError::Geometry(msg.into())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    fn channel_layout(&self, x: Var, c: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.shape(c) != [xs[1]] {
            return Err(TensorError::Shape { want: vec![xs.get(1).copied().unwrap_or(0)], got: self.shape(c).to_vec() });
        }
        let inner: usize = xs[2..].iter().product();
        Ok((xs[0], xs[1], inner))
    }

    /// `x[n, c, ...] + b[c]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, inner) = self.channel_layout(x, b)?;
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        debug_assert_eq!(out.len(), n * c * inner);
        Ok(self.push(out, Op::AddChannel(x, b), &[x, b]))
    }

    /// `x[n, c, ...] * g[c]`.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        let (_, c, inner) = self.channel_layout(x, g)?;
        let mut out = self.value(x).clone();
        let gain = self.value(g).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let gv = gain[i % c];
            chunk.iter_mut().for_each(|v| *v *= gv);
        }
        Ok(self.push(out, Op::MulChannel(x, g), &[x, g]))
    }

    /// `x[n, c, ...] + v[n, c]`.
    pub fn add_nc(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(v) != [xs[0], xs[1]] {
            return Err(TensorError::Shape { want: xs.iter().take(2).copied().collect(), got: self.shape(v).to_vec() });
        }
        let inner: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let add = self.value(v).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let av = add[i];
            chunk.iter_mut().for_each(|e| *e += av);
        }
        Ok(self.push(out, Op::AddNc(x, v), &[x, v]))
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`.
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if bs.len() > as_.len() || as_[as_.len() - bs.len()..] != *bs {
            return Err(TensorError::Shape { want: as_.to_vec(), got: bs.to_vec() });
        }
        let m = self.value(b).len();
        let mut out = self.value(a).clone();
        let bias = self.value(b).data().to_vec();
        for chunk in out.data_mut().chunks_mut(m) {
            chunk.iter_mut().zip(&bias).for_each(|(v, &bv)| *v += bv);
        }
        Ok(self.push(out, Op::AddTrailing(a, b), &[a, b]))
    }

    /// 2-D convolution without bias; `w` is `(cout, cin, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return Err(geometry(format!("conv weight {:?} does not fit input {:?}", self.shape(w), self.shape(x))));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(geometry(format!("conv kernel {k} stride {stride} pad {pad} on {h}x{wd}")));
        }
        let geom = ConvGeom { cin, h, w: wd, cout, k, stride, pad };
        let (ho, wo) = geom.out_hw();
        let data = conv2d_forward(&geom, n, self.value(x).data(), self.value(w).data());
        let out = Tensor::from_vec(&[n, cout, ho, wo], data)?;
        Ok(self.push(out, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// `x[..., in] · wᵀ` with `w` stored `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let fin = *xs.last().ok_or(TensorError::Empty)?;
        if ws.len() != 2 || ws[1] != fin {
            return Err(geometry(format!("linear weight {ws:?} does not fit input {xs:?}")));
        }
        let rows = self.value(x).len() / fin.max(1);
        let mut data = vec![T::zero(); rows * ws[0]];
        gemm(false, true, rows, fin, ws[0], T::one(), self.value(x).data(), self.value(w).data(), T::zero(), &mut data);
        let mut shape = xs;
        *shape.last_mut().unwrap() = ws[0];
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Linear { x, w }, &[x, w]))
    }

    /// Batched `a[b, m, k] · b[b, k, n]`, or `a · bᵀ` with `b[b, n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(geometry(format!("bmm operands {as_:?} and {bs:?}")));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (kb, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if kb != k {
            return Err(geometry(format!("bmm inner dims {as_:?} and {bs:?}")));
        }
        let mut data = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(false, trans_b, m, k, n, T::one(), &ad[i * m * k..], &bd[i * k * n..], T::zero(), &mut data[i * m * n..]);
        }
        let out = Tensor::from_vec(&[batch, m, n], data)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let last = *self.shape(x).last().ok_or(TensorError::Empty)?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(last) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        self.push(out, Op::Silu(x), &[x])
    }

    /// Group normalization without affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || xs[1] % groups != 0 {
            return Err(geometry(format!("group norm with {groups} groups on {xs:?}")));
        }
        let group_len = xs[1] / groups * xs[2..].iter().product::<usize>();
        let mut out = self.value(x).clone();
        let mut rstd = Vec::with_capacity(xs[0] * groups);
        let eps = T::of(eps);
        for chunk in out.data_mut().chunks_mut(group_len) {
            let len = T::of(group_len as f64);
            let mean = chunk.iter().copied().sum::<T>() / len;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / len;
            let r = T::one() / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        Ok(self.push(out, Op::GroupNorm { x, rstd }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(geometry(format!("concat {:?} with {:?}", self.shape(a), self.shape(b))));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..n {
            data.extend_from_slice(&ad[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&bd[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], data)?;
        Ok(self.push(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, 2 * h, 2 * w], data)?;
        Ok(self.push(out, Op::Upsample2x(x), &[x]))
    }

    /// Spatial average: `(n, c, h, w) -> (n, c)`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = T::of((h * w) as f64);
        let data = self.value(x).data().chunks(h * w).map(|ch| ch.iter().copied().sum::<T>() / hw).collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        Ok(self.push(out, Op::MeanSpatial(x), &[x]))
    }

    /// `out[i] = src.flat[idx[i]]`, shaped `shape`.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let s = self.value(src).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= s.len()) {
            return Err(TensorError::Index { index: bad, len: s.len() });
        }
        let out = Tensor::from_vec(shape, idx.iter().map(|&i| s[i]).collect())?;
        Ok(self.push(out, Op::Gather { src, idx }, &[src]))
    }

    /// Mean squared error, a `[1]` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let n = T::of(d.len().max(1) as f64);
        let v = d.data().iter().map(|&e| e * e).sum::<T>() / n;
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x).mean();
        self.push(Tensor::scalar(v), Op::Mean(x), &[x])
    }

    /// Back-propagates from `root` (seeded with ones).
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in &[*a, *b] {
                    if self.wants(p) {
                        Self::accumulate(grads, p, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.scale(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y).unwrap());
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.scale(*s));
                }
            }
            Op::AddChannel(x, b) => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let c = self.value(*b).len();
                    let inner = g.len() / (self.shape(*x)[0] * c);
                    let mut db = vec![T::zero(); c];
                    for (j, chunk) in g.data().chunks(inner).enumerate() {
                        db[j % c] += chunk.iter().copied().sum::<T>();
                    }
                    Self::accumulate(grads, *b, Tensor::from_vec(&[c], db).unwrap());
                }
            }
            Op::MulChannel(x, gain) => {
                let c = self.value(*gain).len();
                let inner = g.len() / (self.shape(*x)[0] * c);
                if self.wants(*x) {
                    let gv = self.value(*gain).data();
                    let mut dx = g.clone();
                    for (j, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= gv[j % c]);
                    }
                    Self::accumulate(grads, *x, dx);
                }
                if self.wants(*gain) {
                    let xv = self.value(*x).data();
                    let mut dg = vec![T::zero(); c];
                    for (j, (gc, xc)) in g.data().chunks(inner).zip(xv.chunks(inner)).enumerate() {
                        dg[j % c] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    Self::accumulate(grads, *gain, Tensor::from_vec(&[c], dg).unwrap());
                }
            }
            Op::AddNc(x, v) => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, g.clone());
                }
                if self.wants(*v) {
                    let nc = self.value(*v).len();
                    let inner = g.len() / nc;
                    let dv = g.data().chunks(inner).map(|ch| ch.iter().copied().sum::<T>()).collect();
                    Self::accumulate(grads, *v, Tensor::from_vec(self.shape(*v), dv).unwrap());
                }
            }
            Op::AddTrailing(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let m = self.value(*b).len();
                    let mut db = vec![T::zero(); m];
                    for chunk in g.data().chunks(m) {
                        db.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                    }
                    Self::accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db).unwrap());
                }
            }
            Op::Conv2d { x, w, geom } => {
                let n = self.shape(*x)[0];
                let (dx, dw) = conv2d_backward(
                    geom,
                    n,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    Self::accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx).unwrap());
                }
                if let Some(dw) = dw {
                    Self::accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw).unwrap());
                }
            }
            Op::Linear { x, w } => {
                let ws = self.shape(*w);
                let (fout, fin) = (ws[0], ws[1]);
                let rows = g.len() / fout;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); rows * fin];
                    gemm(false, false, rows, fout, fin, T::one(), g.data(), self.value(*w).data(), T::zero(), &mut dx);
                    Self::accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(true, false, fout, rows, fin, T::one(), g.data(), self.value(*x).data(), T::zero(), &mut dw);
                    Self::accumulate(grads, *w, Tensor::from_vec(ws, dw).unwrap());
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (as_, bs) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (as_[0], as_[1], as_[2]);
                let n = if *trans_b { bs[1] } else { bs[2] };
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), g.data());
                if self.wants(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        // da = g · bᵀ (plain) or g · b (transposed operand)
                        gemm(false, !*trans_b, m, n, k, T::one(), &gd[i * m * n..], &bd[i * k * n..], T::zero(), &mut da[i * m * k..]);
                    }
                    Self::accumulate(grads, *a, Tensor::from_vec(as_, da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        if *trans_b {
                            gemm(true, false, n, m, k, T::one(), &gd[i * m * n..], &ad[i * m * k..], T::zero(), &mut db[i * k * n..]);
                        } else {
                            gemm(true, false, k, m, n, T::one(), &ad[i * m * k..], &gd[i * m * n..], T::zero(), &mut db[i * k * n..]);
                        }
                    }
                    Self::accumulate(grads, *b, Tensor::from_vec(bs, db).unwrap());
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = &node.value;
                    let last = *y.shape().last().unwrap();
                    let mut dx = g.clone();
                    for (drow, yrow) in dx.data_mut().chunks_mut(last).zip(y.data().chunks(last)) {
                        let dot: T = drow.iter().zip(yrow).map(|(&d, &yv)| d * yv).sum();
                        drow.iter_mut().zip(yrow).for_each(|(d, &yv)| *d = yv * (*d - dot));
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Silu(x) => {
                if self.wants(*x) {
                    let dx = g
                        .zip_map(self.value(*x), |d, v| {
                            let s = T::one() / (T::one() + (-v).exp());
                            d * s * (T::one() + v * (T::one() - s))
                        })
                        .unwrap();
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::GroupNorm { x, rstd } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let group_len = y.len() / rstd.len();
                    let len = T::of(group_len as f64);
                    let mut dx = g.clone();
                    for ((dchunk, ychunk), &r) in dx.data_mut().chunks_mut(group_len).zip(y.data().chunks(group_len)).zip(rstd) {
                        let mean_d = dchunk.iter().copied().sum::<T>() / len;
                        let mean_dy = dchunk.iter().zip(ychunk).map(|(&d, &yv)| d * yv).sum::<T>() / len;
                        dchunk.iter_mut().zip(ychunk).for_each(|(d, &yv)| *d = r * (*d - mean_d - yv * mean_dy));
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, g.clone().reshape(self.shape(*x)).unwrap());
                }
            }
            Op::Permute(x, perm) => {
                if self.wants(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    Self::accumulate(grads, *x, g.permute(&inv).unwrap());
                }
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().unwrap();
                let cb = self.shape(*b)[1];
                let hw = h * w;
                let gd = g.data();
                if self.wants(*a) {
                    let mut da = Vec::with_capacity(n * ca * hw);
                    for i in 0..n {
                        let base = i * (ca + cb) * hw;
                        da.extend_from_slice(&gd[base..base + ca * hw]);
                    }
                    Self::accumulate(grads, *a, Tensor::from_vec(self.shape(*a), da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for i in 0..n {
                        let base = i * (ca + cb) * hw + ca * hw;
                        db.extend_from_slice(&gd[base..base + cb * hw]);
                    }
                    Self::accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db).unwrap());
                }
            }
            Op::Upsample2x(x) => {
                if self.wants(*x) {
                    let (n, c, h, w) = self.value(*x).dims4().unwrap();
                    let gd = g.data();
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for p in 0..n * c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    Self::accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx).unwrap());
                }
            }
            Op::MeanSpatial(x) => {
                if self.wants(*x) {
                    let (_, _, h, w) = self.value(*x).dims4().unwrap();
                    let inv = T::one() / T::of((h * w) as f64);
                    let mut dx = Vec::with_capacity(self.value(*x).len());
                    for &gv in g.data() {
                        dx.extend(std::iter::repeat_n(gv * inv, h * w));
                    }
                    Self::accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx).unwrap());
                }
            }
            Op::Gather { src, idx } => {
                if self.wants(*src) {
                    let mut ds = Tensor::zeros(self.shape(*src));
                    let d = ds.data_mut();
                    for (&j, &gv) in idx.iter().zip(g.data()) {
                        d[j] += gv;
                    }
                    Self::accumulate(grads, *src, ds);
                }
            }
            Op::Mse(a, b) => {
                let n = T::of(self.value(*a).len().max(1) as f64);
                let coef = T::of(2.0) * g.data()[0] / n;
                let diff = self.value(*a).sub(self.value(*b)).unwrap();
                if self.wants(*a) {
                    Self::accumulate(grads, *a, diff.scale(coef));
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, diff.scale(-coef));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, Tensor::full(self.shape(*x), g.data()[0]));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = T::of(self.value(*x).len().max(1) as f64);
                    Self::accumulate(grads, *x, Tensor::full(self.shape(*x), g.data()[0] / n));
                }
            }
        }
    }
}
