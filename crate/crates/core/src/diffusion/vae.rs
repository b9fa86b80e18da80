use candle_core::{Tensor, Var};

use crate::error::{bail, Result};
use crate::nn::{Conv2d, Scope};

pub const LATENT_CHANNELS: usize = 4;
pub const DOWNSAMPLE: usize = 8;
const PIXEL_BLOCK: usize = 4;

/// Deterministic convolutional autoencoder: 8x spatial reduction to 4 channels.
///
/// Latents are multiplied by a stored `latent_scale` so that, once fitted, they
/// have roughly unit variance, which the noise schedule assumes.
#[derive(Clone)]
pub struct Vae {
    enc: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec: Vec<Conv2d>,
    dec_out: Conv2d,
    latent_scale: Var,
    input_size: usize,
}

impl std::fmt::Debug for Vae {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vae")
            .field("input_size", &self.input_size)
            .finish()
    }
}

impl Vae {
    pub fn new(vs: &Scope, width: usize, input_size: usize) -> Result<Self> {
        let w = width;
        // 4x4 patches in, 2x2 patches, then 3x3 convs; the decoder mirrors it
        // and ends with a depth-to-space of 4x4 pixel blocks
        let enc = vec![
            Conv2d::new(&vs.pp("enc.0"), 3, w, 4, 4, 0)?,
            Conv2d::new(&vs.pp("enc.1"), w, w, 3, 1, 1)?,
            Conv2d::new(&vs.pp("enc.2"), w, 2 * w, 2, 2, 0)?,
            Conv2d::new(&vs.pp("enc.3"), 2 * w, 2 * w, 3, 1, 1)?,
        ];
        let dec = vec![
            Conv2d::new(&vs.pp("dec.0"), 2 * w, 2 * w, 3, 1, 1)?,
            Conv2d::new(&vs.pp("dec.1"), 2 * w, w, 3, 1, 1)?,
            Conv2d::new(&vs.pp("dec.2"), w, w, 3, 1, 1)?,
        ];
        Ok(Self {
            enc,
            enc_out: Conv2d::new(&vs.pp("enc_out"), 2 * w, LATENT_CHANNELS, 3, 1, 1)?,
            dec_in: Conv2d::new(&vs.pp("dec_in"), LATENT_CHANNELS, 2 * w, 3, 1, 1)?,
            dec,
            dec_out: Conv2d::new(&vs.pp("dec_out"), w, 3 * PIXEL_BLOCK * PIXEL_BLOCK, 1, 1, 0)?,
            latent_scale: vs.buffer("latent_scale", &[1], 1.0)?,
            input_size,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn latent_size(&self) -> usize {
        self.input_size / DOWNSAMPLE
    }

    pub fn latent_scale(&self) -> Result<f64> {
        Ok(self
            .latent_scale
            .as_tensor()
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?[0])
    }

    pub fn set_latent_scale(&self, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            bail!(
                Input,
                "latent scale must be positive and finite, got {scale}"
            );
        }
        let t = Tensor::new(&[scale], self.latent_scale.device())?
            .to_dtype(self.latent_scale.dtype())?;
        self.latent_scale.set(&t)?;
        Ok(())
    }

    /// Unscaled latent, `[B, 4, S/8, S/8]` for `[B, 3, S, S]` input in `[-0.5, 0.5]`.
    pub fn encode_raw(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != self.input_size || w != self.input_size {
            bail!(
                Shape,
                "autoencoder expects [B, 3, {0}, {0}] input, got [_, {c}, {h}, {w}]",
                self.input_size
            );
        }
        let mut h = x.clone();
        for conv in &self.enc {
            h = conv.forward(&h)?.silu()?;
        }
        self.enc_out.forward(&h)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self
            .encode_raw(x)?
            .broadcast_mul(&self.latent_scale.as_tensor().to_dtype(x.dtype())?)?)
    }

    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let (n, c, _, _) = z.dims4()?;
        if c != LATENT_CHANNELS {
            bail!(
                Shape,
                "latent must have {LATENT_CHANNELS} channels, got {c}"
            );
        }
        let mut h = self.dec_in.forward(z)?.silu()?;
        h = self.dec[0].forward(&h)?.silu()?;
        let (_, _, hh, ww) = h.dims4()?;
        h = h.upsample_nearest2d(hh * 2, ww * 2)?;
        for conv in &self.dec[1..] {
            h = conv.forward(&h)?.silu()?;
        }
        let y = self.dec_out.forward(&h)?;
        let (_, _, gh, gw) = y.dims4()?;
        let p = PIXEL_BLOCK;
        Ok(y.reshape((n, 3, p, p, gh, gw))?
            .permute((0, 1, 4, 2, 5, 3))?
            .reshape((n, 3, gh * p, gw * p))?)
    }

    /// Image tensor in `[-0.5, 0.5]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let scale = self.latent_scale.as_tensor().to_dtype(z.dtype())?;
        Ok(self
            .decode_raw(&z.broadcast_div(&scale)?)?
            .clamp(-0.5, 0.5)?)
    }
}
