//! Staged fitting of the toy diffusion stack: autoencoder first, then the
//! caption encoder and U-Net on the frozen latents.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{mse_loss, DiffusionBackend, ToyDiffusion};
use crate::error::{bail, GladError, Result};
use crate::imaging::{psnr, tensor_to_image, Image};
use crate::model::DIFFUSION_PREFIX;
use crate::nn::ParamStore;
use crate::training::optim::ClippedAdamW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub vae_steps: usize,
    pub denoiser_steps: usize,
    pub vae_batch: usize,
    pub denoiser_batch: usize,
    pub vae_lr: f64,
    pub denoiser_lr: f64,
    /// Template crops drawn for fitting; the last eighth is held out for PSNR.
    pub crops: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            vae_steps: 600,
            denoiser_steps: 300,
            vae_batch: 4,
            denoiser_batch: 8,
            vae_lr: 5e-3,
            denoiser_lr: 1e-3,
            crops: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub vae_losses: Vec<f64>,
    /// Mean reconstruction PSNR on held-out crops, dB.
    pub psnr: f64,
    pub latent_scale: f64,
    pub denoiser_losses: Vec<f64>,
}

fn batch_indices<R: Rng>(rng: &mut R, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

fn check_finite(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GladError::NanLoss {
            term: term.to_string(),
            value: v,
        })
    }
}

/// Mean PSNR of `decode(encode(x))` over `images`.
pub fn reconstruction_psnr(toy: &ToyDiffusion, images: &[&Image]) -> Result<f64> {
    if images.is_empty() {
        bail!(Input, "no images to reconstruct");
    }
    let mut total = 0.0;
    for chunk in images.chunks(8) {
        let x = toy.prepare(chunk)?;
        let y = toy.vae_decode(&toy.vae_encode(&x)?)?;
        for i in 0..chunk.len() {
            let a = tensor_to_image(&x.get(i)?)?;
            let b = tensor_to_image(&y.get(i)?)?;
            total += psnr(&a, &b).min(100.0);
        }
    }
    Ok(total / images.len() as f64)
}

/// Fits the autoencoder, then sets the latent scale to `1 / std` of the
/// training latents.
pub fn pretrain_vae(
    toy: &ToyDiffusion,
    store: &ParamStore,
    crops: &[(Image, String)],
    cfg: &PretrainConfig,
    mut log: impl FnMut(usize, f64),
) -> Result<(Vec<f64>, f64, f64)> {
    let held = (crops.len() / 8).max(1);
    if crops.len() <= held {
        bail!(Input, "need more than {held} crops for autoencoder fitting");
    }
    let (train, test) = crops.split_at(crops.len() - held);
    let vars = store.trainable_vars(&[&format!("{DIFFUSION_PREFIX}vae.")]);
    let mut opt = ClippedAdamW::new(vars, cfg.vae_lr, 0.0, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0076_6165);
    toy.vae().set_latent_scale(1.0)?;
    let mut losses = Vec::with_capacity(cfg.vae_steps);
    for step in 0..cfg.vae_steps {
        // cosine decay to a tenth of the base rate
        let frac = step as f64 / cfg.vae_steps.max(1) as f64;
        opt.set_lr(cfg.vae_lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos())));
        let idx = batch_indices(&mut rng, train.len(), cfg.vae_batch);
        let imgs: Vec<&Image> = idx.iter().map(|i| &train[*i].0).collect();
        let x = toy.prepare(&imgs)?;
        let y = toy.vae().decode_raw(&toy.vae().encode_raw(&x)?)?;
        let loss = mse_loss(&y, &x)?;
        let v = check_finite(
            "reconstruction",
            loss.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        )?;
        opt.backward_step(&loss)?;
        losses.push(v);
        log(step, v);
    }
    let imgs: Vec<&Image> = train.iter().take(64).map(|c| &c.0).collect();
    let z = toy.vae().encode_raw(&toy.prepare(&imgs)?)?;
    let vals = z.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    let scale = 1.0 / var.sqrt().max(1e-6);
    toy.vae().set_latent_scale(scale)?;
    let test_imgs: Vec<&Image> = test.iter().map(|c| &c.0).collect();
    let p = reconstruction_psnr(toy, &test_imgs)?;
    Ok((losses, p, scale))
}

/// Noise-prediction fitting of the U-Net and caption encoder on frozen latents.
pub fn pretrain_denoiser(
    toy: &ToyDiffusion,
    store: &ParamStore,
    crops: &[(Image, String)],
    cfg: &PretrainConfig,
    mut log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if crops.is_empty() {
        bail!(Input, "no crops for denoiser fitting");
    }
    // latents are fixed once the autoencoder is frozen
    let mut latents = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(16) {
        let imgs: Vec<&Image> = chunk.iter().map(|c| &c.0).collect();
        latents.push(toy.vae_encode(&toy.prepare(&imgs)?)?.detach());
    }
    let latents = Tensor::cat(&latents, 0)?;
    let vars = store.trainable_vars(&[
        &format!("{DIFFUSION_PREFIX}unet."),
        &format!("{DIFFUSION_PREFIX}text."),
    ]);
    let mut opt = ClippedAdamW::new(vars, cfg.denoiser_lr, 1e-4, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x756e_6574);
    let mut losses = Vec::with_capacity(cfg.denoiser_steps);
    for step in 0..cfg.denoiser_steps {
        let frac = step as f64 / cfg.denoiser_steps.max(1) as f64;
        opt.set_lr(cfg.denoiser_lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos())));
        let idx = batch_indices(&mut rng, crops.len(), cfg.denoiser_batch);
        let ids = Tensor::from_vec(
            idx.iter().map(|i| *i as u32).collect::<Vec<_>>(),
            idx.len(),
            latents.device(),
        )?;
        let x0 = latents.index_select(&ids, 0)?;
        let texts: Vec<&str> = idx.iter().map(|i| crops[*i].1.as_str()).collect();
        let text = toy.encode_text(&texts)?;
        let loss = toy.ddpm_training_loss(&x0, &text, &mut rng)?;
        let v = check_finite("denoising", loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)?;
        opt.backward_step(&loss)?;
        losses.push(v);
        log(step, v);
    }
    Ok(losses)
}
