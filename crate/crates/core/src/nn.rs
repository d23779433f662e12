//! Shared layers: convolutions, linears, group norm, ResBlocks and attention, all
//! addressed by parameter name inside a [`ParamStore`].

use std::collections::{BTreeMap, HashMap};

use controlsr_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::lora;
use crate::params::ParamStore;

/// One forward pass: the autodiff tape plus the parameters it reads.
pub struct Ctx<'a, T: Scalar> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: HashMap<String, Var>,
    track: bool,
    /// Route through `*.lora.*` adapters where present.
    pub lora: bool,
    pub lora_scale: f64,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Trainable parameters become gradient-tracked leaves.
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { g: Graph::new(), store, bound: HashMap::new(), track: true, lora: true, lora_scale: 1.0 }
    }

    /// No parameter tracks gradients.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self { track: false, ..Self::new(store) }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let param = self
            .store
            .get(name)
            .ok_or_else(|| Error::validation("parameter", format!("missing tensor {name:?}")))?;
        let v = self.g.leaf(param.value.clone(), self.track && param.trainable);
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.g.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.g.value(v)
    }

    /// Gradients of `root` for every trainable parameter the pass touched.
    pub fn param_grads(&self, root: Var) -> BTreeMap<String, Tensor<T>> {
        let mut grads = self.g.backward(root);
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if self.g.requires_grad(v) {
                if let Some(gr) = grads.take(v) {
                    out.insert(name.clone(), gr);
                }
            }
        }
        out
    }
}

/// Parameter initializer writing into a store.
pub struct Init<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub trainable: bool,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    pub fn tensor(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        self.store.insert(name, t, self.trainable)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = Tensor::randn(shape, std, self.rng);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Result<()> {
        self.normal(&format!("{name}.weight"), &[cout, cin, k, k], (1.0 / (cin * k * k) as f64).sqrt())?;
        if bias {
            self.zeros(&format!("{name}.bias"), &[cout])?;
        }
        Ok(())
    }

    /// All-zero 1×1 convolution.
    pub fn zero_conv(&mut self, name: &str, cin: usize, cout: usize) -> Result<()> {
        self.zeros(&format!("{name}.weight"), &[cout, cin, 1, 1])?;
        self.zeros(&format!("{name}.bias"), &[cout])
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize, bias: bool) -> Result<()> {
        self.normal(&format!("{name}.weight"), &[fout, fin], (1.0 / fin as f64).sqrt())?;
        if bias {
            self.zeros(&format!("{name}.bias"), &[fout])?;
        }
        Ok(())
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.tensor(&format!("{name}.weight"), Tensor::full(&[c], T::one()))?;
        self.zeros(&format!("{name}.bias"), &[c])
    }

    pub fn res_block(&mut self, name: &str, cin: usize, cout: usize, time_dim: usize) -> Result<()> {
        self.norm(&format!("{name}.norm1"), cin)?;
        self.conv(&format!("{name}.conv1"), cin, cout, 3, true)?;
        self.linear(&format!("{name}.temb"), time_dim, cout, true)?;
        self.norm(&format!("{name}.norm2"), cout)?;
        self.conv(&format!("{name}.conv2"), cout, cout, 3, true)?;
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1, true)?;
        }
        Ok(())
    }

    /// Pre-norm attention block; `ctx_dim` is the key/value token width.
    pub fn attention(&mut self, name: &str, c: usize, ctx_dim: usize) -> Result<()> {
        self.norm(&format!("{name}.norm"), c)?;
        self.linear(&format!("{name}.q"), c, c, false)?;
        self.linear(&format!("{name}.k"), ctx_dim, c, false)?;
        self.linear(&format!("{name}.v"), ctx_dim, c, false)?;
        self.linear(&format!("{name}.out"), c, c, true)
    }
}

pub fn conv<T: Scalar>(ctx: &mut Ctx<T>, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = ctx.p(&format!("{name}.weight"))?;
    let mut y = ctx.g.conv2d(x, w, stride, pad)?;
    let bias = format!("{name}.bias");
    if ctx.has(&bias) {
        let b = ctx.p(&bias)?;
        y = ctx.g.add_channel(y, b)?;
    }
    if ctx.lora && lora::is_adapted(ctx.store(), name) {
        let delta = lora::conv_delta(ctx, name, x, stride, pad)?;
        y = ctx.g.add(y, delta)?;
    }
    Ok(y)
}

pub fn linear<T: Scalar>(ctx: &mut Ctx<T>, name: &str, x: Var) -> Result<Var> {
    let w = ctx.p(&format!("{name}.weight"))?;
    let mut y = ctx.g.linear(x, w)?;
    let bias = format!("{name}.bias");
    if ctx.has(&bias) {
        let b = ctx.p(&bias)?;
        y = ctx.g.add_trailing(y, b)?;
    }
    if ctx.lora && lora::is_adapted(ctx.store(), name) {
        let delta = lora::linear_delta(ctx, name, x)?;
        y = ctx.g.add(y, delta)?;
    }
    Ok(y)
}

pub fn group_norm<T: Scalar>(ctx: &mut Ctx<T>, name: &str, x: Var, groups: usize) -> Result<Var> {
    let y = ctx.g.group_norm(x, groups, 1e-5)?;
    let w = ctx.p(&format!("{name}.weight"))?;
    let b = ctx.p(&format!("{name}.bias"))?;
    let y = ctx.g.mul_channel(y, w)?;
    Ok(ctx.g.add_channel(y, b)?)
}

/// Largest group count `<= groups` dividing `c`.
pub fn fit_groups(c: usize, groups: usize) -> usize {
    (1..=groups.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// GroupNorm → SiLU → conv → +time → GroupNorm → SiLU → conv, plus a (projected) skip.
pub fn res_block<T: Scalar>(ctx: &mut Ctx<T>, name: &str, x: Var, temb: Var, groups: usize) -> Result<Var> {
    let cin = ctx.g.shape(x)[1];
    let h = group_norm(ctx, &format!("{name}.norm1"), x, fit_groups(cin, groups))?;
    let h = ctx.g.silu(h);
    let h = conv(ctx, &format!("{name}.conv1"), h, 1, 1)?;
    let cout = ctx.g.shape(h)[1];
    let t = ctx.g.silu(temb);
    let t = linear(ctx, &format!("{name}.temb"), t)?;
    let h = ctx.g.add_nc(h, t)?;
    let h = group_norm(ctx, &format!("{name}.norm2"), h, fit_groups(cout, groups))?;
    let h = ctx.g.silu(h);
    let h = conv(ctx, &format!("{name}.conv2"), h, 1, 1)?;
    let skip_name = format!("{name}.skip");
    let skip = if ctx.has(&format!("{skip_name}.weight")) { conv(ctx, &skip_name, x, 1, 0)? } else { x };
    Ok(ctx.g.add(h, skip)?)
}

/// `(n, c, h, w) -> (n, h·w, c)`.
pub fn to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4()?;
    let t = g.reshape(x, &[n, c, h * w])?;
    Ok(g.permute(t, &[0, 2, 1])?)
}

/// `(n, h·w, c) -> (n, c, h, w)`.
pub fn from_tokens<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.permute(x, &[0, 2, 1])?;
    Ok(g.reshape(t, &[s[0], s[2], h, w])?)
}

/// `(b, l, heads·d) -> (b·heads, l, d)`.
pub fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, c) = (s[0], s[1], s[2]);
    let d = c / heads;
    let t = g.reshape(x, &[b, l, heads, d])?;
    let t = g.permute(t, &[0, 2, 1, 3])?;
    Ok(g.reshape(t, &[b * heads, l, d])?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (bh, l, d) = (s[0], s[1], s[2]);
    let b = bh / heads;
    let t = g.reshape(x, &[b, heads, l, d])?;
    let t = g.permute(t, &[0, 2, 1, 3])?;
    Ok(g.reshape(t, &[b, l, heads * d])?)
}

/// Multi-head scaled dot-product attention over token tensors `(b, l, c)`.
/// `bias`, when given, is `(heads, lq, lk)` and added to the logits of every batch item.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<Var>,
) -> Result<Var> {
    let c = g.shape(q)[2];
    let (b, lq) = (g.shape(q)[0], g.shape(q)[1]);
    let lk = g.shape(k)[1];
    let d = c / heads;
    let qh = split_heads(g, q, heads)?;
    let kh = split_heads(g, k, heads)?;
    let vh = split_heads(g, v, heads)?;
    let logits = g.bmm(qh, kh, true)?;
    let mut logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    if let Some(bias) = bias {
        let l4 = g.reshape(logits, &[b, heads, lq, lk])?;
        let l4 = g.add_trailing(l4, bias)?;
        logits = g.reshape(l4, &[b * heads, lq, lk])?;
    }
    let attn = g.softmax(logits)?;
    let out = g.bmm(attn, vh, false)?;
    merge_heads(g, out, heads)
}

/// Pre-norm attention with residual. Keys/values come from `context` tokens `(n, l, d)`,
/// or from the normalized input itself when `context` is `None`.
pub fn attention_block<T: Scalar>(
    ctx: &mut Ctx<T>,
    name: &str,
    x: Var,
    context: Option<Var>,
    heads: usize,
    groups: usize,
) -> Result<Var> {
    let (_, c, h, w) = ctx.value(x).dims4()?;
    let hn = group_norm(ctx, &format!("{name}.norm"), x, fit_groups(c, groups))?;
    let tokens = to_tokens(&mut ctx.g, hn)?;
    let kv = context.unwrap_or(tokens);
    let q = linear(ctx, &format!("{name}.q"), tokens)?;
    let k = linear(ctx, &format!("{name}.k"), kv)?;
    let v = linear(ctx, &format!("{name}.v"), kv)?;
    let a = multi_head_attention(&mut ctx.g, q, k, v, heads, None)?;
    let o = linear(ctx, &format!("{name}.out"), a)?;
    let o = from_tokens(&mut ctx.g, o, h, w)?;
    Ok(ctx.g.add(x, o)?)
}

/// Sinusoidal embedding `[cos(t·f_i), sin(t·f_i)]` with `f_i = 10000^(-i/half)`.
pub fn timestep_embedding<T: Scalar>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti as f64 * f).collect();
        data.extend(args.iter().map(|a| T::of(a.cos())));
        data.extend(args.iter().map(|a| T::of(a.sin())));
    }
    Tensor::from_vec(&[t.len(), dim], data).expect("consistent embedding size")
}

/// Timestep MLP: sinusoid → linear → SiLU → linear.
pub fn time_mlp<T: Scalar>(ctx: &mut Ctx<T>, prefix: &str, t: &[usize], dim: usize) -> Result<Var> {
    let e = ctx.input(timestep_embedding(t, dim));
    let h = linear(ctx, &format!("{prefix}.lin1"), e)?;
    let h = ctx.g.silu(h);
    linear(ctx, &format!("{prefix}.lin2"), h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_groups_divides() {
        assert_eq!(fit_groups(64, 8), 8);
        assert_eq!(fit_groups(12, 8), 6);
        assert_eq!(fit_groups(3, 8), 3);
        assert_eq!(fit_groups(7, 4), 1);
    }

    #[test]
    fn timestep_embedding_at_zero() {
        let e = timestep_embedding::<f64>(&[0], 8);
        assert_eq!(&e.data()[..4], &[1.0; 4]);
        assert_eq!(&e.data()[4..], &[0.0; 4]);
    }
}
