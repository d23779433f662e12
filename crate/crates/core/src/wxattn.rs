//! Window partitioning and window cross-attention from decoder-side features (queries) to the
//! latent LR embedding (keys and values), with a relative position bias aligned across the two
//! window sizes.

use controlsr_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{fit_groups, group_norm, linear, multi_head_attention, Ctx, Init};
use crate::vae::LATENT_CHANNELS;

pub const BIAS_STD: f64 = 0.02;

/// Query window side `big`, key window side `small` and the shared window grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    /// Query window side on the feature map.
    pub big: usize,
    /// Key/value window side on the latent grid.
    pub small: usize,
    /// Windows along each spatial axis.
    pub grid_h: usize,
    pub grid_w: usize,
}

impl WindowSpec {
    /// Key window side on the latent grid as the model uses it: `min(window, latent side)`,
    /// or the whole latent when partitioning is disabled.
    pub fn key_side(latent_side: usize, window: usize, partition: bool) -> usize {
        if partition {
            window.min(latent_side).max(1)
        } else {
            latent_side
        }
    }

    /// Geometry for a square-window layout with the same window count on both grids.
    pub fn new(feat: (usize, usize), latent: (usize, usize), window: usize, partition: bool) -> Result<Self> {
        if !partition && latent.0 != latent.1 {
            return Err(Error::validation("window", "unpartitioned attention needs a square latent"));
        }
        let small = Self::key_side(latent.0.min(latent.1), window, partition);
        if latent.0 % small != 0 || latent.1 % small != 0 {
            return Err(Error::validation("window", format!("latent {latent:?} not divisible by key window {small}")));
        }
        let (grid_h, grid_w) = (latent.0 / small, latent.1 / small);
        if feat.0 % grid_h != 0 || feat.1 % grid_w != 0 || feat.0 / grid_h != feat.1 / grid_w {
            return Err(Error::validation("window", format!("feature {feat:?} cannot be tiled into a {grid_h}x{grid_w} grid of square windows")));
        }
        Ok(Self { big: feat.0 / grid_h, small, grid_h, grid_w })
    }

    pub fn windows(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

fn check_side(h: usize, w: usize, side: usize) -> Result<()> {
    if side == 0 || h % side != 0 || w % side != 0 {
        return Err(Error::validation("window", format!("{h}x{w} not divisible by side {side}")));
    }
    Ok(())
}

/// `(n, c, h, w) -> (n·(h/side)·(w/side), side², c)`, windows and positions row-major.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, side: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    check_side(h, w, side)?;
    let (gh, gw) = (h / side, w / side);
    let t = x.clone().reshape(&[n, c, gh, side, gw, side])?.permute(&[0, 2, 4, 3, 5, 1])?;
    Ok(t.reshape(&[n * gh * gw, side * side, c])?)
}

/// Exact inverse of [`window_partition`].
pub fn window_merge<T: Scalar>(windows: &Tensor<T>, side: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    check_side(h, w, side)?;
    let s = windows.shape();
    let (gh, gw) = (h / side, w / side);
    if s.len() != 3 || s[1] != side * side || s[0] % (gh * gw) != 0 {
        return Err(Error::validation("window", format!("windows {s:?} inconsistent with side {side} and {h}x{w}")));
    }
    let (n, c) = (s[0] / (gh * gw), s[2]);
    let t = windows.clone().reshape(&[n, gh, gw, side, side, c])?.permute(&[0, 5, 1, 3, 2, 4])?;
    Ok(t.reshape(&[n, c, h, w])?)
}

pub fn partition_graph<T: Scalar>(g: &mut Graph<T>, x: Var, side: usize) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4()?;
    check_side(h, w, side)?;
    let (gh, gw) = (h / side, w / side);
    let t = g.reshape(x, &[n, c, gh, side, gw, side])?;
    let t = g.permute(t, &[0, 2, 4, 3, 5, 1])?;
    Ok(g.reshape(t, &[n * gh * gw, side * side, c])?)
}

pub fn merge_graph<T: Scalar>(g: &mut Graph<T>, windows: Var, side: usize, h: usize, w: usize) -> Result<Var> {
    check_side(h, w, side)?;
    let s = g.shape(windows).to_vec();
    let (gh, gw) = (h / side, w / side);
    let (n, c) = (s[0] / (gh * gw), s[2]);
    let t = g.reshape(windows, &[n, gh, gw, side, side, c])?;
    let t = g.permute(t, &[0, 5, 1, 3, 2, 4])?;
    Ok(g.reshape(t, &[n, c, h, w])?)
}

/// Nearest key-grid cell for query coordinate `i` on a `big`-sided grid.
fn align(i: usize, big: usize, small: usize) -> isize {
    (i as f64 * small as f64 / big as f64).round() as isize
}

/// For every (query, key) pair, the flat index into a `(2s−1)×(2s−1)` table.
pub fn bias_indices(big: usize, small: usize) -> Vec<usize> {
    let s = small as isize;
    let side = (2 * small - 1) as isize;
    let mut idx = Vec::with_capacity(big * big * small * small);
    for qi in 0..big {
        for qj in 0..big {
            let (mi, mj) = (align(qi, big, small), align(qj, big, small));
            for ki in 0..small as isize {
                for kj in 0..small as isize {
                    let dy = (ki - mi).clamp(-(s - 1), s - 1);
                    let dx = (kj - mj).clamp(-(s - 1), s - 1);
                    idx.push(((dy + s - 1) * side + dx + s - 1) as usize);
                }
            }
        }
    }
    idx
}

/// `B[q, k] = table[Δy + s − 1, Δx + s − 1]` for a single `(2s−1)×(2s−1)` table.
pub fn aligned_bias<T: Scalar>(table: &Tensor<T>, big: usize, small: usize) -> Result<Tensor<T>> {
    let side = 2 * small - 1;
    table.expect_shape(&[side, side])?;
    let data = bias_indices(big, small).into_iter().map(|i| table.data()[i]).collect();
    Ok(Tensor::from_vec(&[big * big, small * small], data)?)
}

/// Per-head bias `(heads, S², s²)` gathered from a `(heads, (2s−1)²)` table.
pub fn aligned_bias_graph<T: Scalar>(g: &mut Graph<T>, table: Var, big: usize, small: usize) -> Result<Var> {
    let s = g.shape(table).to_vec();
    let cells = (2 * small - 1).pow(2);
    if s.len() != 2 || s[1] != cells {
        return Err(Error::validation("bias table", format!("shape {s:?}, expected [heads, {cells}]")));
    }
    let base = bias_indices(big, small);
    let idx: Vec<usize> = (0..s[0]).flat_map(|h| base.iter().map(move |&i| h * cells + i)).collect();
    Ok(g.gather(table, idx, &[s[0], big * big, small * small])?)
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    /// Window cross-attention layer for `c`-channel features against the latent LR embedding.
    pub fn window_xattn(&mut self, name: &str, c: usize, heads: usize, key_side: usize) -> Result<()> {
        self.norm(&format!("{name}.norm"), c)?;
        self.linear(&format!("{name}.q"), c, c, false)?;
        self.linear(&format!("{name}.k"), LATENT_CHANNELS, c, false)?;
        self.linear(&format!("{name}.v"), LATENT_CHANNELS, c, false)?;
        self.linear(&format!("{name}.out"), c, c, true)?;
        self.normal(&format!("{name}.bias"), &[heads, (2 * key_side - 1).pow(2)], BIAS_STD)
    }
}

/// `x_d + out(Softmax(QKᵀ/√d + B)V)` computed window by window; `x_lr` supplies keys and values.
pub fn window_cross_attention<T: Scalar>(
    ctx: &mut Ctx<T>,
    name: &str,
    x_d: Var,
    x_lr: Var,
    heads: usize,
    groups: usize,
    window: usize,
    partition: bool,
) -> Result<Var> {
    let (n, c, fh, fw) = ctx.value(x_d).dims4()?;
    let (ln, _, lh, lw) = ctx.value(x_lr).dims4()?;
    if ln != n {
        return Err(Error::validation("x_lr", format!("batch {ln} does not match features batch {n}")));
    }
    let spec = WindowSpec::new((fh, fw), (lh, lw), window, partition)?;
    let hn = group_norm(ctx, &format!("{name}.norm"), x_d, fit_groups(c, groups))?;
    let qw = partition_graph(&mut ctx.g, hn, spec.big)?;
    let kw = partition_graph(&mut ctx.g, x_lr, spec.small)?;
    let q = linear(ctx, &format!("{name}.q"), qw)?;
    let k = linear(ctx, &format!("{name}.k"), kw)?;
    let v = linear(ctx, &format!("{name}.v"), kw)?;
    let table = ctx.p(&format!("{name}.bias"))?;
    let bias = aligned_bias_graph(&mut ctx.g, table, spec.big, spec.small)?;
    let a = multi_head_attention(&mut ctx.g, q, k, v, heads, Some(bias))?;
    let o = linear(ctx, &format!("{name}.out"), a)?;
    let o = merge_graph(&mut ctx.g, o, spec.big, fh, fw)?;
    Ok(ctx.g.add(x_d, o)?)
}

/// Attention weights `softmax(QKᵀ/√d + B)` for token tensors `q (b, lq, d)` and `k (b, lk, d)`
/// with one head and an optional `(lq, lk)` bias.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let d = q.dim(2);
    let (qv, kv) = (g.input(q.clone()), g.input(k.clone()));
    let logits = g.bmm(qv, kv, true)?;
    let mut logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    if let Some(b) = bias {
        let bv = g.input(b.clone());
        logits = g.add_trailing(logits, bv)?;
    }
    let w = g.softmax(logits)?;
    Ok(g.value(w).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn partition_counts() {
        let x = randn(&[1, 3, 8, 8], 0);
        assert_eq!(window_partition(&x, 4).unwrap().shape(), &[4, 16, 3]);
        let flat = window_partition(&x, 8).unwrap();
        assert_eq!(flat.shape(), &[1, 64, 3]);
        assert_eq!(flat, x.clone().reshape(&[1, 3, 64]).unwrap().permute(&[0, 2, 1]).unwrap());
        assert!(window_partition(&x, 3).is_err());
    }

    #[test]
    fn partition_layout_is_row_major() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let wins = window_partition(&x, 2).unwrap();
        assert_eq!(&wins.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&wins.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&wins.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn merge_is_order_sensitive() {
        let x = randn(&[1, 2, 4, 4], 1);
        let wins = window_partition(&x, 2).unwrap();
        let per = wins.len() / 4;
        let mut swapped = wins.data().to_vec();
        let (a, b) = swapped.split_at_mut(per);
        a.swap_with_slice(&mut b[..per]);
        let swapped = Tensor::from_vec(wins.shape(), swapped).unwrap();
        assert_ne!(window_merge(&swapped, 2, 4, 4).unwrap(), x);
        assert!(window_merge(&wins, 3, 4, 4).is_err());
    }

    #[test]
    fn equal_sides_give_standard_relative_bias() {
        let s = 3;
        let idx = bias_indices(s, s);
        for qi in 0..s {
            for qj in 0..s {
                for ki in 0..s {
                    for kj in 0..s {
                        let want = (ki + s - 1 - qi) * (2 * s - 1) + (kj + s - 1 - qj);
                        assert_eq!(idx[((qi * s + qj) * s + ki) * s + kj], want);
                    }
                }
            }
        }
    }

    #[test]
    fn hand_evaluated_alignment() {
        let side = 7;
        let table = Tensor::<f64>::from_vec(&[side, side], (0..49).map(f64::from).collect()).unwrap();
        let b = aligned_bias(&table, 2, 4).unwrap();
        assert_eq!(b.shape(), &[4, 16]);
        assert_eq!(b.data()[3 * 4 + 3], (6 * 7 + 6) as f64);
        let zero = aligned_bias(&Tensor::<f64>::zeros(&[side, side]), 2, 4).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spec_matches_window_counts() {
        let spec = WindowSpec::new((4, 4), (8, 8), 4, true).unwrap();
        assert_eq!((spec.big, spec.small, spec.windows()), (2, 4, 4));
        let full = WindowSpec::new((4, 4), (8, 8), 4, false).unwrap();
        assert_eq!((full.big, full.small, full.windows()), (4, 8, 1));
        assert!(WindowSpec::new((5, 5), (8, 8), 4, true).is_err());
    }

    #[test]
    fn single_key_passes_values_through() {
        let q = randn(&[3, 4, 2], 2);
        let k = randn(&[3, 1, 2], 3);
        let w = attention_weights(&q, &k, None).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn orthogonal_queries_attend_uniformly() {
        let q = Tensor::<f64>::from_vec(&[1, 2, 2], vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let k = Tensor::<f64>::from_vec(&[1, 3, 2], vec![0.0, 1.0, 0.0, -2.0, 0.0, 0.5]).unwrap();
        let w = attention_weights(&q, &k, None).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    fn layer(c: usize, heads: usize, key_side: usize, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Init { store: &mut store, rng: &mut rng, trainable: true }.window_xattn("x", c, heads, key_side).unwrap();
        store
    }

    #[test]
    fn single_key_window_outputs_projected_value() {
        let mut store = layer(4, 2, 1, 4);
        store.set("x.bias", Tensor::zeros(&[2, 1]), true);
        let xd = randn(&[1, 4, 4, 4], 5);
        let xl = randn(&[1, 4, 2, 2], 6);
        let mut ctx = Ctx::inference(&store);
        let (a, b) = (ctx.input(xd.clone()), ctx.input(xl.clone()));
        let out = window_cross_attention(&mut ctx, "x", a, b, 2, 2, 1, true).unwrap();
        let out = ctx.value(out).clone();
        let wv = store.tensor("x.v.weight").unwrap();
        let wo = store.tensor("x.out.weight").unwrap();
        for wy in 0..2 {
            for wx in 0..2 {
                let lrv: Vec<f64> = (0..4).map(|ch| xl.data()[ch * 4 + wy * 2 + wx]).collect();
                let v: Vec<f64> = (0..4).map(|o| (0..4).map(|i| wv.data()[o * 4 + i] * lrv[i]).sum()).collect();
                let p: Vec<f64> = (0..4).map(|o| (0..4).map(|i| wo.data()[o * 4 + i] * v[i]).sum()).collect();
                for y in 2 * wy..2 * wy + 2 {
                    for x in 2 * wx..2 * wx + 2 {
                        for ch in 0..4 {
                            let at = ch * 16 + y * 4 + x;
                            assert!((out.data()[at] - xd.data()[at] - p[ch]).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn partition_round_trip(n in 1usize..3, c in 1usize..4, gh in 1usize..4, gw in 1usize..4, side in 1usize..4, seed in 0u64..50) {
            let x = randn(&[n, c, gh * side, gw * side], seed);
            let w = window_partition(&x, side).unwrap();
            prop_assert_eq!(window_merge(&w, side, gh * side, gw * side).unwrap(), x);
        }

        #[test]
        fn rows_sum_to_one_and_shift_invariant(seed in 0u64..200, shift in -5.0f64..5.0) {
            let q = randn(&[2, 5, 3], seed);
            let k = randn(&[2, 4, 3], seed + 1000);
            let bias = randn(&[5, 4], seed + 2000);
            let w = attention_weights(&q, &k, Some(&bias)).unwrap();
            for row in w.data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let shifted_bias = Tensor::from_vec(&[5, 4], bias.data().iter().enumerate().map(|(i, &b)| b + shift * (i / 4) as f64).collect()).unwrap();
            let w2 = attention_weights(&q, &k, Some(&shifted_bias)).unwrap();
            prop_assert!(w.max_abs_diff(&w2).unwrap() < 1e-5);
        }
    }
}
