//! Model configuration and the presets used across the crate.

use serde::{Deserialize, Serialize};

use crate::error::{bail, GladError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub search_size: u32,
    pub template_size: u32,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Learnable positional encoding on the patch tokens.
    pub pos_embed: bool,
}

impl EncoderConfig {
    pub fn search_grid(&self) -> usize {
        self.search_size as usize / self.patch
    }

    pub fn template_grid(&self) -> usize {
        self.template_size as usize / self.patch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    /// Side of the square image fed to the autoencoder.
    pub input_size: u32,
    /// Base U-Net width `c`; levels use `c`, `2c`, `4c`.
    pub width: usize,
    pub vae_width: usize,
    pub heads: usize,
    pub timesteps: usize,
    pub taps: Vec<usize>,
    pub steps: usize,
    pub noise_t_frac: f64,
    pub seed: u64,
}

impl DiffusionConfig {
    pub fn latent_size(&self) -> usize {
        self.input_size as usize / 8
    }

    pub fn noise_t(&self) -> usize {
        ((self.noise_t_frac * self.timesteps as f64).round() as usize).clamp(1, self.timesteps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Attention pooling of U-Net taps + cross-attention decoding.
    Pooled,
    /// Hadamard modulation of visual tokens by projected pooled text features.
    Modulation,
    /// Text tokens appended to the visual tokens before plain self-attention.
    Concat,
}

impl std::str::FromStr for FusionMode {
    type Err = GladError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pooled" => Ok(FusionMode::Pooled),
            "modulation" => Ok(FusionMode::Modulation),
            "concat" => Ok(FusionMode::Concat),
            other => Err(GladError::Config(format!(
                "unknown fusion mode `{other}` (expected pooled, modulation or concat)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Pooled => "pooled",
            FusionMode::Modulation => "modulation",
            FusionMode::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub n_decoders: usize,
    pub m_pool: usize,
    pub heads: usize,
    pub mode: FusionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub layers: usize,
    pub channels: usize,
    pub hann_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub template_factor: f64,
    pub search_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub text: TextConfig,
    pub diffusion: DiffusionConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub crop: CropConfig,
}

impl ModelConfig {
    /// 256/128 inputs, patch 16.
    pub fn base() -> Self {
        Self {
            encoder: EncoderConfig {
                search_size: 256,
                template_size: 128,
                patch: 16,
                dim: 192,
                depth: 4,
                heads: 3,
                pos_embed: true,
            },
            text: TextConfig {
                max_len: 16,
                dim: 64,
                layers: 2,
                heads: 1,
            },
            diffusion: DiffusionConfig {
                input_size: 512,
                width: 64,
                vae_width: 32,
                heads: 1,
                timesteps: 1000,
                taps: vec![5, 6, 7],
                steps: 1,
                noise_t_frac: 0.3,
                seed: 0,
            },
            fusion: FusionConfig {
                n_decoders: 3,
                m_pool: 64,
                heads: 1,
                mode: FusionMode::Pooled,
            },
            head: HeadConfig {
                layers: 3,
                channels: 64,
                hann_weight: 0.49,
            },
            crop: CropConfig {
                template_factor: 2.0,
                search_factor: 4.0,
            },
        }
    }

    /// 384/192 inputs, same patch size.
    pub fn large() -> Self {
        let mut c = Self::base();
        c.encoder.search_size = 384;
        c.encoder.template_size = 192;
        c.encoder.dim = 256;
        c.encoder.heads = 4;
        c.fusion.m_pool = 144;
        c
    }

    /// Laptop-sized configuration used for training from scratch.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                search_size: 64,
                template_size: 32,
                patch: 8,
                dim: 32,
                depth: 1,
                heads: 2,
                pos_embed: true,
            },
            text: TextConfig {
                max_len: 16,
                dim: 32,
                layers: 2,
                heads: 1,
            },
            diffusion: DiffusionConfig {
                input_size: 128,
                width: 16,
                vae_width: 16,
                heads: 1,
                timesteps: 1000,
                taps: vec![5, 6, 7],
                steps: 1,
                noise_t_frac: 0.3,
                seed: 0,
            },
            fusion: FusionConfig {
                n_decoders: 3,
                m_pool: 16,
                heads: 1,
                mode: FusionMode::Pooled,
            },
            head: HeadConfig {
                layers: 2,
                channels: 32,
                hann_weight: 0.49,
            },
            crop: CropConfig {
                template_factor: 2.0,
                search_factor: 4.0,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            "desk" => Ok(Self::desk()),
            other => Err(GladError::Config(format!(
                "unknown preset `{other}` (expected base, large or desk)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.patch == 0
            || !(e.search_size as usize).is_multiple_of(e.patch)
            || !(e.template_size as usize).is_multiple_of(e.patch)
        {
            bail!(
                Config,
                "input sizes {}/{} must be multiples of patch {}",
                e.search_size,
                e.template_size,
                e.patch
            );
        }
        if e.template_size > e.search_size {
            bail!(Config, "template larger than search region");
        }
        let d = &self.diffusion;
        if !d.input_size.is_multiple_of(64) {
            bail!(
                Config,
                "diffusion.input_size must be a multiple of 64, got {}",
                d.input_size
            );
        }
        if d.taps.is_empty() {
            bail!(Config, "diffusion.taps must not be empty");
        }
        if let Some(t) = d.taps.iter().find(|t| !(1..=16).contains(*t)) {
            bail!(Config, "tap index {t} outside 1..16");
        }
        if d.steps < 1 {
            bail!(Config, "diffusion.steps must be at least 1");
        }
        if !(d.noise_t_frac > 0.0 && d.noise_t_frac <= 1.0) {
            bail!(Config, "diffusion.noise_t_frac must be in (0, 1]");
        }
        if d.timesteps < 2 {
            bail!(Config, "diffusion.timesteps must be at least 2");
        }
        if self.fusion.mode == FusionMode::Pooled && self.fusion.n_decoders != d.taps.len() {
            bail!(
                Config,
                "fusion.n_decoders ({}) must equal the number of taps ({})",
                self.fusion.n_decoders,
                d.taps.len()
            );
        }
        if self.fusion.n_decoders == 0 || self.fusion.m_pool == 0 {
            bail!(
                Config,
                "fusion.n_decoders and fusion.m_pool must be positive"
            );
        }
        if !(0.0..=1.0).contains(&self.head.hann_weight) {
            bail!(Config, "head.hann_weight must lie in [0, 1]");
        }
        if self.head.layers == 0 {
            bail!(Config, "head.layers must be positive");
        }
        if !(self.crop.template_factor > 0.0 && self.crop.search_factor > 0.0) {
            bail!(Config, "crop factors must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["base", "large", "desk"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn grid_sizes_follow_resolutions() {
        let b = ModelConfig::base();
        assert_eq!(b.encoder.search_grid(), 16);
        assert_eq!(b.encoder.template_grid(), 8);
        let l = ModelConfig::large();
        assert_eq!(l.encoder.search_grid(), 24);
        assert_eq!(l.encoder.template_grid(), 12);
        assert_eq!(b.diffusion.latent_size(), 64);
        assert_eq!(b.diffusion.noise_t(), 300);
    }

    #[test]
    fn bad_tap_index_is_a_config_error() {
        let mut c = ModelConfig::base();
        c.diffusion.taps = vec![5, 6, 17];
        assert!(matches!(c.validate(), Err(GladError::Config(_))));
    }

    #[test]
    fn mode_parses() {
        assert_eq!("concat".parse::<FusionMode>().unwrap(), FusionMode::Concat);
        assert!("fancy".parse::<FusionMode>().is_err());
    }
}
