//! Text-conditioned latent diffusion used as a template/caption fusion module.
//!
//! The template is encoded to a latent, noised to a fixed mid-schedule step and
//! denoised for a few strided steps by a transformer U-Net conditioned on the
//! caption. The intermediate U-Net features ("taps") from the final step are the
//! fused template representation consumed by the decoders.

mod schedule;
mod unet;
mod vae;

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use schedule::NoiseSchedule;
pub use unet::{mse_loss, submodule_level, UNet, UNetOutput, UNetTaps, CONTRACTING, SUBMODULES};
pub use vae::{Vae, DOWNSAMPLE, LATENT_CHANNELS};

use crate::config::{DiffusionConfig, TextConfig};
use crate::encoders::{TextEncoder, TextFeatures};
use crate::error::{bail, Result};
use crate::imaging::{images_to_tensor, resize, tensor_to_image, Image};
use crate::nn::Scope;

/// What the tracker needs from a diffusion model. A pretrained latent-diffusion
/// backend can implement this without touching the decoders or the tracker.
pub trait DiffusionBackend: Send + Sync {
    /// Caption features used for U-Net conditioning, batched over `texts`.
    fn encode_text(&self, texts: &[&str]) -> Result<TextFeatures>;

    /// Noises and denoises each template for `steps` iterations and returns the
    /// configured taps of the final U-Net call.
    fn fuse(&self, templates: &[&Image], text: &TextFeatures, steps: usize) -> Result<UNetTaps>;

    /// Full reverse pass to a clean latent, decoded back to image space.
    fn inpaint_template(
        &self,
        template: &Image,
        text: &TextFeatures,
        steps: usize,
        seed: u64,
    ) -> Result<Image>;

    fn tap_shapes(&self) -> Result<Vec<(usize, usize, usize)>>;

    fn text_dim(&self) -> usize;

    /// Number of `fuse`/`inpaint_template` calls so far.
    fn fusion_calls(&self) -> usize;

    /// Number of denoiser evaluations so far.
    fn denoiser_calls(&self) -> usize;
}

/// Small trainable diffusion stack: caption encoder, autoencoder, U-Net.
pub struct ToyDiffusion {
    cfg: DiffusionConfig,
    text: TextEncoder,
    vae: Vae,
    unet: UNet,
    schedule: NoiseSchedule,
    text_dim: usize,
    dtype: DType,
    device: Device,
    fusion_calls: AtomicUsize,
    denoiser_calls: AtomicUsize,
}

impl std::fmt::Debug for ToyDiffusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyDiffusion")
            .field("cfg", &self.cfg)
            .finish()
    }
}

impl ToyDiffusion {
    pub fn new(vs: &Scope, cfg: &DiffusionConfig, text_cfg: &TextConfig) -> Result<Self> {
        let input = cfg.input_size as usize;
        if !input.is_multiple_of(64) {
            bail!(
                Config,
                "diffusion input size {input} must be a multiple of 64"
            );
        }
        for &t in &cfg.taps {
            submodule_level(t)?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            text: TextEncoder::new(&vs.pp("text"), text_cfg)?,
            vae: Vae::new(&vs.pp("vae"), cfg.vae_width, input)?,
            unet: UNet::new(
                &vs.pp("unet"),
                cfg.width,
                text_cfg.dim,
                cfg.heads,
                input / DOWNSAMPLE,
            )?,
            schedule: NoiseSchedule::standard(cfg.timesteps)?,
            text_dim: text_cfg.dim,
            dtype: vs.dtype(),
            device: vs.device().clone(),
            fusion_calls: AtomicUsize::new(0),
            denoiser_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn vae(&self) -> &Vae {
        &self.vae
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    /// Resamples images to the autoencoder input and stacks them into a batch.
    pub fn prepare(&self, images: &[&Image]) -> Result<Tensor> {
        let s = self.cfg.input_size;
        let resized: Vec<Image> = images
            .iter()
            .map(|im| {
                if im.width() == s && im.height() == s {
                    (*im).clone()
                } else {
                    resize(im, s, s)
                }
            })
            .collect();
        let refs: Vec<&Image> = resized.iter().collect();
        images_to_tensor(&refs, self.dtype, &self.device)
    }

    /// `[B, 3, S, S]` image tensor to scaled latents `[B, 4, S/8, S/8]`.
    pub fn vae_encode(&self, x: &Tensor) -> Result<Tensor> {
        self.vae.encode(x)
    }

    pub fn vae_decode(&self, z: &Tensor) -> Result<Tensor> {
        self.vae.decode(z)
    }

    pub fn forward_noise(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.schedule.forward_noise(x0, t, eps)
    }

    pub fn unet_step(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        text: &TextFeatures,
        taps: &[usize],
    ) -> Result<UNetOutput> {
        self.denoiser_calls.fetch_add(1, Ordering::Relaxed);
        self.unet.forward(x_t, ts, text, taps)
    }

    /// Standard-normal noise for one latent, replicated across `batch`.
    pub fn seeded_noise(&self, seed: u64, batch: usize) -> Result<Tensor> {
        let l = self.unet.latent_size();
        let n = LATENT_CHANNELS * l * l;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        let eps = Tensor::from_vec(data, (1, LATENT_CHANNELS, l, l), &self.device)?
            .to_dtype(self.dtype)?;
        Ok(eps
            .broadcast_as((batch, LATENT_CHANNELS, l, l))?
            .contiguous()?)
    }

    /// `E ||eps - eps_theta(x_t, t)||^2` with `t ~ U{1..T}` and `eps ~ N(0, I)`.
    pub fn ddpm_training_loss<R: Rng>(
        &self,
        x0: &Tensor,
        text: &TextFeatures,
        rng: &mut R,
    ) -> Result<Tensor> {
        let b = x0.dims()[0];
        let ts: Vec<usize> = (0..b)
            .map(|_| rng.random_range(1..=self.schedule.len()))
            .collect();
        let n = x0.elem_count();
        let data: Vec<f32> = (0..n)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        let eps = Tensor::from_vec(data, x0.dims(), x0.device())?.to_dtype(x0.dtype())?;
        self.ddpm_loss_at(x0, text, &ts, &eps)
    }

    /// Denoising loss for given timesteps and noise.
    pub fn ddpm_loss_at(
        &self,
        x0: &Tensor,
        text: &TextFeatures,
        ts: &[usize],
        eps: &Tensor,
    ) -> Result<Tensor> {
        let x_t = self.schedule.forward_noise_batch(x0, ts, eps)?;
        let out = self.unet_step(&x_t, ts, text, &[])?;
        mse_loss(&out.eps, eps)
    }

    /// Reverse iterations from `noise_t`; returns the final latent and the taps
    /// of the last U-Net call.
    fn reverse(
        &self,
        x0: &Tensor,
        text: &TextFeatures,
        steps: usize,
        seed: u64,
    ) -> Result<(Tensor, UNetTaps)> {
        if steps < 1 {
            bail!(Config, "diffusion.steps must be at least 1, got {steps}");
        }
        let t_start = self.cfg.noise_t();
        let ts = self.schedule.strided(t_start, steps)?;
        let eps = self.seeded_noise(seed, x0.dims()[0])?;
        let mut x = self.schedule.forward_noise(x0, t_start, &eps)?;
        let mut taps = None;
        for pair in ts.windows(2) {
            let out = self.unet_step(&x, &[pair[0]], text, &self.cfg.taps)?;
            x = self.schedule.ddim_step(&x, &out.eps, pair[0], pair[1])?;
            taps = Some(out.taps);
        }
        Ok((x, taps.expect("at least one reverse step")))
    }

    /// The noised latent that `fuse`/`inpaint_template` start from.
    pub fn noised_latent(&self, template: &Image, seed: u64) -> Result<Tensor> {
        let z = self.vae_encode(&self.prepare(&[template])?)?;
        let eps = self.seeded_noise(seed, 1)?;
        self.schedule.forward_noise(&z, self.cfg.noise_t(), &eps)
    }
}

impl DiffusionBackend for ToyDiffusion {
    fn encode_text(&self, texts: &[&str]) -> Result<TextFeatures> {
        let feats = texts
            .iter()
            .map(|t| self.text.encode_str(t))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TextFeatures> = feats.iter().collect();
        TextFeatures::cat(&refs)
    }

    fn fuse(&self, templates: &[&Image], text: &TextFeatures, steps: usize) -> Result<UNetTaps> {
        if steps < 1 {
            bail!(Config, "diffusion.steps must be at least 1, got {steps}");
        }
        self.fusion_calls.fetch_add(1, Ordering::Relaxed);
        let z = self.vae_encode(&self.prepare(templates)?)?;
        Ok(self.reverse(&z, text, steps, self.cfg.seed)?.1)
    }

    fn inpaint_template(
        &self,
        template: &Image,
        text: &TextFeatures,
        steps: usize,
        seed: u64,
    ) -> Result<Image> {
        if steps < 1 {
            bail!(Config, "diffusion.steps must be at least 1, got {steps}");
        }
        self.fusion_calls.fetch_add(1, Ordering::Relaxed);
        let z = self.vae_encode(&self.prepare(&[template])?)?;
        let (x0, _) = self.reverse(&z, text, steps, seed)?;
        tensor_to_image(&self.vae_decode(&x0)?.squeeze(0)?)
    }

    fn tap_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        self.cfg
            .taps
            .iter()
            .map(|t| self.unet.tap_shape(*t))
            .collect()
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn fusion_calls(&self) -> usize {
        self.fusion_calls.load(Ordering::Relaxed)
    }

    fn denoiser_calls(&self) -> usize {
        self.denoiser_calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::imaging::blank;
    use crate::nn::ParamStore;

    fn desk() -> (ParamStore, ToyDiffusion) {
        let cfg = ModelConfig::desk();
        let store = ParamStore::new(DType::F32, 5);
        let d =
            ToyDiffusion::new(&store.root().pp("diffusion"), &cfg.diffusion, &cfg.text).unwrap();
        (store, d)
    }

    #[test]
    fn fuse_is_deterministic_and_counts_calls() {
        let (_, d) = desk();
        let img = blank(32, 32, [0.8, 0.2, 0.1]);
        let text = d.encode_text(&["red square"]).unwrap();
        let a = d.fuse(&[&img], &text, 1).unwrap();
        let b = d.fuse(&[&img], &text, 1).unwrap();
        assert_eq!(d.fusion_calls(), 2);
        assert_eq!(d.denoiser_calls(), 2);
        for (x, y) in a.taps.iter().zip(&b.taps) {
            let diff: f32 = (&x.tokens - &y.tokens)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar()
                .unwrap();
            assert_eq!(diff, 0.0);
        }
        assert!(d.fuse(&[&img], &text, 0).is_err());
        let four = d.fuse(&[&img], &text, 4).unwrap();
        assert_eq!(four.len(), 3);
        assert_eq!(d.denoiser_calls(), 6);
    }

    #[test]
    fn latent_shape_and_constant_interior() {
        let (_, d) = desk();
        let x = d.prepare(&[&blank(128, 128, [0.3, 0.6, 0.2])]).unwrap();
        let z = d.vae_encode(&x).unwrap();
        assert_eq!(z.dims(), &[1, 4, 16, 16]);
        let inner: Vec<Vec<Vec<f32>>> = z
            .squeeze(0)
            .unwrap()
            .narrow(1, 4, 8)
            .unwrap()
            .narrow(2, 4, 8)
            .unwrap()
            .to_vec3()
            .unwrap();
        for ch in inner {
            let v0 = ch[0][0];
            assert!(ch.iter().flatten().all(|v| (v - v0).abs() < 1e-5));
        }
        let wrong = Tensor::zeros((1, 3, 96, 96), DType::F32, &Device::Cpu).unwrap();
        assert!(d.vae_encode(&wrong).is_err());
    }
}
