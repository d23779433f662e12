//! Tiny convolutional autoencoder: RGB at `H×W` to a 4-channel latent at `H/8×W/8` and back.
//!
//! Images enter the encoder rescaled to `[−1, 1]`; the decoder emits that range and
//! [`decode`] maps it back to `[0, 1]`. The encoder predicts a mean only.

use controlsr_tensor::{Scalar, Tensor, Var};
use rand::Rng;

use crate::degrade::resize_bicubic;
use crate::error::{Error, Result};
use crate::nn::{conv, Ctx, Init};
use crate::params::ParamStore;
use crate::store::{ImageBuffer, ModelConfig};

pub const LATENT_CHANNELS: usize = 4;
pub const DOWNSCALE: usize = 8;
pub const KL_WEIGHT: f64 = 1e-6;

/// `(name, cin, cout, stride)` for every encoder convolution, in order.
pub fn encoder_layers(width: usize) -> Vec<(String, usize, usize, usize)> {
    let w = width;
    vec![
        ("vae.encoder.conv_in".into(), 3, w, 1),
        ("vae.encoder.down.0".into(), w, 2 * w, 2),
        ("vae.encoder.down.1".into(), 2 * w, 4 * w, 2),
        ("vae.encoder.down.2".into(), 4 * w, 4 * w, 2),
        ("vae.encoder.conv_out".into(), 4 * w, LATENT_CHANNELS, 1),
    ]
}

/// `(name, cin, cout, upsample_first)` for every decoder convolution, in order.
pub fn decoder_layers(width: usize) -> Vec<(String, usize, usize, bool)> {
    let w = width;
    vec![
        ("vae.decoder.conv_in".into(), LATENT_CHANNELS, 4 * w, false),
        ("vae.decoder.up.0".into(), 4 * w, 2 * w, true),
        ("vae.decoder.up.1".into(), 2 * w, w, true),
        ("vae.decoder.up.2".into(), w, w, true),
        ("vae.decoder.conv_out".into(), w, 3, false),
    ]
}

pub fn init_vae<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let mut init = Init { store, rng, trainable: true };
    for (name, cin, cout, _) in encoder_layers(cfg.vae_width) {
        init.conv(&name, cin, cout, 3, true)?;
    }
    for (name, cin, cout, _) in decoder_layers(cfg.vae_width) {
        init.conv(&name, cin, cout, 3, true)?;
    }
    Ok(())
}

/// Adds zero-initialized adapters to every encoder convolution.
pub fn init_encoder_lora<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let mut init = Init { store, rng, trainable: true };
    for (name, cin, cout, _) in encoder_layers(cfg.vae_width) {
        init.lora_conv(&name, cin, cout, 3, cfg.vae_lora_rank)?;
    }
    Ok(())
}

fn check_image_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % DOWNSCALE != 0 || w % DOWNSCALE != 0 {
        return Err(Error::validation("image", format!("{h}x{w} is not divisible by {DOWNSCALE}")));
    }
    Ok(())
}

/// `[0, 1]` image tensor to the encoder's `[−1, 1]` input range.
pub fn to_signed<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let two = T::of(2.0);
    x.map(|v| two * v - T::one())
}

/// Encoder on a graph input already in `[−1, 1]`.
pub fn encode_graph<T: Scalar>(ctx: &mut Ctx<T>, x: Var, width: usize, use_lora: bool) -> Result<Var> {
    let (_, _, h, w) = ctx.value(x).dims4()?;
    check_image_dims(h, w)?;
    let saved = ctx.lora;
    ctx.lora = use_lora;
    let layers = encoder_layers(width);
    let last = layers.len() - 1;
    let mut h = x;
    for (i, (name, _, _, stride)) in layers.iter().enumerate() {
        h = conv(ctx, name, h, *stride, 1)?;
        if i != last {
            h = ctx.g.silu(h);
        }
    }
    ctx.lora = saved;
    Ok(h)
}

/// Decoder returning the `[−1, 1]`-range reconstruction.
pub fn decode_graph<T: Scalar>(ctx: &mut Ctx<T>, z: Var, width: usize) -> Result<Var> {
    let layers = decoder_layers(width);
    let last = layers.len() - 1;
    let mut h = z;
    for (i, (name, _, _, up)) in layers.iter().enumerate() {
        if *up {
            h = ctx.g.upsample2x(h)?;
        }
        h = conv(ctx, name, h, 1, 1)?;
        if i != last {
            h = ctx.g.silu(h);
        }
    }
    Ok(h)
}

/// Deterministic latent of a `[0, 1]` image batch `(n, 3, h, w)`.
pub fn encode<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, images: &Tensor<T>, use_lora: bool) -> Result<Tensor<T>> {
    let mut ctx = Ctx::inference(store);
    let x = ctx.input(to_signed(images));
    let z = encode_graph(&mut ctx, x, cfg.vae_width, use_lora)?;
    Ok(ctx.value(z).clone())
}

pub fn encode_images<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, images: &[ImageBuffer], use_lora: bool) -> Result<Tensor<T>> {
    encode(store, cfg, &ImageBuffer::batch_to_tensor(images)?, use_lora)
}

/// `[0, 1]`-range decoder output, unclamped.
pub fn decode_tensor<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, z: &Tensor<T>) -> Result<Tensor<T>> {
    if z.shape().len() != 4 || z.dim(1) != LATENT_CHANNELS {
        return Err(Error::validation("latent", format!("shape {:?} needs {LATENT_CHANNELS} channels", z.shape())));
    }
    let mut ctx = Ctx::inference(store);
    let zi = ctx.input(z.clone());
    let o = decode_graph(&mut ctx, zi, cfg.vae_width)?;
    let half = T::of(0.5);
    Ok(ctx.value(o).map(|v| (v + T::one()) * half))
}

/// Decoded images, clamped to `[0, 1]`.
pub fn decode<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, z: &Tensor<T>) -> Result<Vec<ImageBuffer>> {
    ImageBuffer::batch_from_tensor(&decode_tensor(store, cfg, z)?)
}

/// Bicubic ×`scale` onto the HR grid.
pub fn upsample_lr(lr: &ImageBuffer, scale: usize) -> ImageBuffer {
    if scale == 1 {
        return lr.clone();
    }
    resize_bicubic(lr, lr.height() * scale, lr.width() * scale)
}

/// Latent LR embedding: upsample to the HR grid, then encode through the adapters.
pub fn encode_lr<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, lr: &[ImageBuffer], scale: usize) -> Result<Tensor<T>> {
    let up: Vec<ImageBuffer> = lr.iter().map(|im| upsample_lr(im, scale)).collect();
    encode_images(store, cfg, &up, true)
}

/// Reconstruction MSE on the `[0, 1]` scale plus `KL_WEIGHT · ½·mean(μ²)`.
/// Returns `(loss, reconstruction_mse)`.
pub fn vae_loss<T: Scalar>(ctx: &mut Ctx<T>, images: &Tensor<T>, width: usize) -> Result<(Var, Var)> {
    let signed = to_signed(images);
    let x = ctx.input(signed.clone());
    let target = ctx.input(signed);
    let mu = encode_graph(ctx, x, width, false)?;
    let out = decode_graph(ctx, mu, width)?;
    let signed_mse = ctx.g.mse(out, target)?;
    let recon = ctx.g.scale(signed_mse, 0.25);
    let mu2 = ctx.g.mul(mu, mu)?;
    let kl = ctx.g.mean(mu2);
    let kl = ctx.g.scale(kl, 0.5 * KL_WEIGHT);
    let loss = ctx.g.add(recon, kl)?;
    Ok((loss, recon))
}
