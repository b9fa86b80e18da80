//! Flat `key = value` run configuration.
//!
//! Files hold one assignment per line; `#` starts a comment. `model.preset` is
//! applied first so the remaining keys override the preset. Unknown keys and
//! malformed values are rejected before any command does work.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use glad_core::config::ModelConfig;
use glad_core::semantics::{TemplateSource, DEFAULT_LOGIT_SCALE, DEFAULT_STRIDE};
use glad_core::synthetic::SyntheticSceneConfig;
use glad_core::training::{PretrainConfig, TrainConfig};
use glad_core::FusionMode;

/// Environment variable giving the root that relative output directories live under.
pub const OUTPUT_ROOT_ENV: &str = "GLAD_OUTPUT_ROOT";

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    (
        "model.preset",
        "desk | base | large; applied before every other key",
    ),
    ("seed", "seed for weight init, batches and pretraining"),
    ("output.dir", "directory all outputs are written to"),
    (
        "data.root",
        "dataset root with one directory per sequence (synthetic data when unset)",
    ),
    ("checkpoint", "weights file for track and inpaint"),
    ("encoder.search_size", "search crop side in pixels"),
    ("encoder.template_size", "template crop side in pixels"),
    ("encoder.patch", "patch size P"),
    ("encoder.dim", "token width"),
    ("encoder.depth", "transformer blocks in the image encoder"),
    ("encoder.heads", "attention heads in the image encoder"),
    (
        "diffusion.taps",
        "comma-separated U-Net submodule indices (1..16)",
    ),
    ("diffusion.steps", "denoising steps during fusion"),
    (
        "diffusion.noise_t_frac",
        "starting timestep as a fraction of the schedule",
    ),
    ("diffusion.timesteps", "length of the noise schedule"),
    ("diffusion.seed", "seed of the fusion noise"),
    ("fusion.mode", "pooled | modulation | concat"),
    (
        "fusion.n_decoders",
        "decoder blocks (defaults to the number of taps)",
    ),
    ("fusion.m_pool", "pooled tokens per tap"),
    ("fusion.heads", "attention heads in pooling and decoding"),
    ("head.layers", "conv layers per head branch"),
    ("head.channels", "head branch width"),
    ("head.hann_weight", "Hanning window blend weight in [0, 1]"),
    ("crop.template_factor", "template context factor"),
    ("crop.search_factor", "search context factor"),
    ("train.epochs", "training epochs"),
    ("train.warmup_epochs", "linear warm-up length in epochs"),
    (
        "train.decay_epoch",
        "epoch where the rate drops to train.decayed_lr",
    ),
    ("train.peak_lr", "rate after warm-up"),
    ("train.decayed_lr", "rate after train.decay_epoch"),
    ("train.weight_decay", "AdamW weight decay"),
    ("train.grad_clip", "global gradient-norm bound"),
    ("train.batch_size", "pairs per step"),
    ("train.steps_per_epoch", "optimizer steps per epoch"),
    ("train.sequences", "synthetic training sequences"),
    (
        "train.finetune_diffusion",
        "true to update the diffusion stack with the tracker",
    ),
    ("pretrain.vae_steps", "autoencoder fitting steps"),
    ("pretrain.denoiser_steps", "U-Net fitting steps"),
    ("pretrain.vae_batch", "autoencoder batch size"),
    ("pretrain.denoiser_batch", "U-Net batch size"),
    ("pretrain.vae_lr", "autoencoder base rate"),
    ("pretrain.denoiser_lr", "U-Net base rate"),
    ("pretrain.crops", "template crops drawn for pretraining"),
    ("synthetic.canvas", "synthetic frame side in pixels"),
    ("synthetic.frames", "frames per synthetic sequence"),
    ("synthetic.max_distractors", "maximum distractor objects"),
    (
        "synthetic.first_seed",
        "seed of the first synthetic training sequence",
    ),
    (
        "synthetic.eval_sequences",
        "held-out synthetic sequences scored after training",
    ),
    (
        "synthetic.eval_first_seed",
        "seed of the first held-out sequence",
    ),
    ("semantics.stride", "frame sampling stride"),
    ("semantics.logit_scale", "logit scale of the stub backend"),
    (
        "semantics.template",
        "full | crop: what the template score is computed on",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub scene: SyntheticSceneConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data_root: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub first_seed: u64,
    pub eval_sequences: usize,
    pub eval_first_seed: u64,
    pub stride: usize,
    pub logit_scale: f64,
    pub template: TemplateSource,
    /// Keys assigned explicitly, by file, `--set` or flag.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            pretrain: PretrainConfig::default(),
            scene: SyntheticSceneConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("glad-out"),
            data_root: None,
            checkpoint: None,
            first_seed: 0,
            eval_sequences: 10,
            eval_first_seed: 10_000,
            stride: DEFAULT_STRIDE,
            logit_scale: DEFAULT_LOGIT_SCALE,
            template: TemplateSource::FullFrame,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}`: cannot parse `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("`{key}`: expected true or false, got `{value}`")),
    }
}

fn parse_taps(value: &str) -> Result<Vec<usize>, String> {
    value
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| format!("`diffusion.taps`: bad index `{t}`"))
        })
        .collect()
}

impl RunConfig {
    /// Assigns one key. `model.preset` resets the model to the preset.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let p = &mut self.pretrain;
        match key {
            "model.preset" => {
                self.model = ModelConfig::preset(v).map_err(|e| e.to_string())?;
                self.preset = v.to_string();
            }
            "seed" => {
                self.seed = parse(key, v)?;
                t.seed = self.seed;
                p.seed = self.seed;
            }
            "output.dir" => self.output_dir = PathBuf::from(v),
            "data.root" => self.data_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "encoder.search_size" => m.encoder.search_size = parse(key, v)?,
            "encoder.template_size" => m.encoder.template_size = parse(key, v)?,
            "encoder.patch" => m.encoder.patch = parse(key, v)?,
            "encoder.dim" => m.encoder.dim = parse(key, v)?,
            "encoder.depth" => m.encoder.depth = parse(key, v)?,
            "encoder.heads" => m.encoder.heads = parse(key, v)?,
            "diffusion.taps" => m.diffusion.taps = parse_taps(v)?,
            "diffusion.steps" => m.diffusion.steps = parse(key, v)?,
            "diffusion.noise_t_frac" => m.diffusion.noise_t_frac = parse(key, v)?,
            "diffusion.timesteps" => m.diffusion.timesteps = parse(key, v)?,
            "diffusion.seed" => m.diffusion.seed = parse(key, v)?,
            "fusion.mode" => m.fusion.mode = v.parse::<FusionMode>().map_err(|e| e.to_string())?,
            "fusion.n_decoders" => m.fusion.n_decoders = parse(key, v)?,
            "fusion.m_pool" => m.fusion.m_pool = parse(key, v)?,
            "fusion.heads" => m.fusion.heads = parse(key, v)?,
            "head.layers" => m.head.layers = parse(key, v)?,
            "head.channels" => m.head.channels = parse(key, v)?,
            "head.hann_weight" => m.head.hann_weight = parse(key, v)?,
            "crop.template_factor" => m.crop.template_factor = parse(key, v)?,
            "crop.search_factor" => m.crop.search_factor = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "train.decay_epoch" => t.decay_epoch = parse(key, v)?,
            "train.peak_lr" => t.peak_lr = parse(key, v)?,
            "train.decayed_lr" => t.decayed_lr = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.grad_clip" => t.grad_clip = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.steps_per_epoch" => t.steps_per_epoch = parse(key, v)?,
            "train.sequences" => t.train_sequences = parse(key, v)?,
            "train.finetune_diffusion" => t.finetune_diffusion = parse_bool(key, v)?,
            "pretrain.vae_steps" => p.vae_steps = parse(key, v)?,
            "pretrain.denoiser_steps" => p.denoiser_steps = parse(key, v)?,
            "pretrain.vae_batch" => p.vae_batch = parse(key, v)?,
            "pretrain.denoiser_batch" => p.denoiser_batch = parse(key, v)?,
            "pretrain.vae_lr" => p.vae_lr = parse(key, v)?,
            "pretrain.denoiser_lr" => p.denoiser_lr = parse(key, v)?,
            "pretrain.crops" => p.crops = parse(key, v)?,
            "synthetic.canvas" => self.scene.canvas = parse(key, v)?,
            "synthetic.frames" => self.scene.frames = parse(key, v)?,
            "synthetic.max_distractors" => self.scene.max_distractors = parse(key, v)?,
            "synthetic.first_seed" => self.first_seed = parse(key, v)?,
            "synthetic.eval_sequences" => self.eval_sequences = parse(key, v)?,
            "synthetic.eval_first_seed" => self.eval_first_seed = parse(key, v)?,
            "semantics.stride" => self.stride = parse(key, v)?,
            "semantics.logit_scale" => self.logit_scale = parse(key, v)?,
            "semantics.template" => {
                self.template = match v {
                    "full" => TemplateSource::FullFrame,
                    "crop" => TemplateSource::Crop,
                    _ => {
                        return Err(format!(
                            "`semantics.template`: expected full or crop, got `{v}`"
                        ))
                    }
                }
            }
            _ => {
                return Err(format!(
                    "unknown config key `{key}` (see --help for the list)"
                ))
            }
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Current value of `key`, formatted so that `set(key, get(key))` is a no-op.
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        let p = &self.pretrain;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        Some(match key {
            "model.preset" => self.preset.clone(),
            "seed" => self.seed.to_string(),
            "output.dir" => self.output_dir.display().to_string(),
            "data.root" => path(&self.data_root),
            "checkpoint" => path(&self.checkpoint),
            "encoder.search_size" => m.encoder.search_size.to_string(),
            "encoder.template_size" => m.encoder.template_size.to_string(),
            "encoder.patch" => m.encoder.patch.to_string(),
            "encoder.dim" => m.encoder.dim.to_string(),
            "encoder.depth" => m.encoder.depth.to_string(),
            "encoder.heads" => m.encoder.heads.to_string(),
            "diffusion.taps" => m
                .diffusion
                .taps
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "diffusion.steps" => m.diffusion.steps.to_string(),
            "diffusion.noise_t_frac" => m.diffusion.noise_t_frac.to_string(),
            "diffusion.timesteps" => m.diffusion.timesteps.to_string(),
            "diffusion.seed" => m.diffusion.seed.to_string(),
            "fusion.mode" => m.fusion.mode.to_string(),
            "fusion.n_decoders" => m.fusion.n_decoders.to_string(),
            "fusion.m_pool" => m.fusion.m_pool.to_string(),
            "fusion.heads" => m.fusion.heads.to_string(),
            "head.layers" => m.head.layers.to_string(),
            "head.channels" => m.head.channels.to_string(),
            "head.hann_weight" => m.head.hann_weight.to_string(),
            "crop.template_factor" => m.crop.template_factor.to_string(),
            "crop.search_factor" => m.crop.search_factor.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.warmup_epochs" => t.warmup_epochs.to_string(),
            "train.decay_epoch" => t.decay_epoch.to_string(),
            "train.peak_lr" => t.peak_lr.to_string(),
            "train.decayed_lr" => t.decayed_lr.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.grad_clip" => t.grad_clip.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.steps_per_epoch" => t.steps_per_epoch.to_string(),
            "train.sequences" => t.train_sequences.to_string(),
            "train.finetune_diffusion" => t.finetune_diffusion.to_string(),
            "pretrain.vae_steps" => p.vae_steps.to_string(),
            "pretrain.denoiser_steps" => p.denoiser_steps.to_string(),
            "pretrain.vae_batch" => p.vae_batch.to_string(),
            "pretrain.denoiser_batch" => p.denoiser_batch.to_string(),
            "pretrain.vae_lr" => p.vae_lr.to_string(),
            "pretrain.denoiser_lr" => p.denoiser_lr.to_string(),
            "pretrain.crops" => p.crops.to_string(),
            "synthetic.canvas" => self.scene.canvas.to_string(),
            "synthetic.frames" => self.scene.frames.to_string(),
            "synthetic.max_distractors" => self.scene.max_distractors.to_string(),
            "synthetic.first_seed" => self.first_seed.to_string(),
            "synthetic.eval_sequences" => self.eval_sequences.to_string(),
            "synthetic.eval_first_seed" => self.eval_first_seed.to_string(),
            "semantics.stride" => self.stride.to_string(),
            "semantics.logit_scale" => self.logit_scale.to_string(),
            "semantics.template" => match self.template {
                TemplateSource::FullFrame => "full".into(),
                TemplateSource::Crop => "crop".into(),
            },
            _ => return None,
        })
    }

    /// Parses `key = value` lines into ordered pairs.
    pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, String> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected `key = value`", i + 1))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// Applies pairs with the preset first, then the rest in order.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), String> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "model.preset") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "model.preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply(&Self::parse_pairs(&text, &path.display().to_string())?)?;
        Ok(cfg)
    }

    /// Derived defaults and cross-key checks, run once all sources are merged.
    pub fn finish(&mut self) -> Result<(), String> {
        if !self.explicit.contains("fusion.n_decoders") {
            self.model.fusion.n_decoders = self.model.diffusion.taps.len().max(1);
        }
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if self.stride == 0 {
            return Err("semantics.stride must be positive".into());
        }
        Ok(())
    }

    /// `output.dir`, placed under `$GLAD_OUTPUT_ROOT` when relative and the variable is set.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => {
                PathBuf::from(root).join(&self.output_dir)
            }
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }
}

/// The key list as shown by `--help`.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s =
        String::from("Config keys (`key = value` in --config files, or --set key=value):\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<width$}  {d}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let mut c = RunConfig::default();
        let before = c.clone();
        for (k, _) in KEYS {
            let v = c.get(k).unwrap_or_else(|| panic!("no getter for {k}"));
            c.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        assert_eq!(c.model, before.model);
        assert_eq!(c.train, before.train);
        assert_eq!(c.pretrain, before.pretrain);
        assert_eq!(c.explicit.len(), KEYS.len());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut c = RunConfig::default();
        assert!(c
            .set("head.layerz", "3")
            .unwrap_err()
            .contains("unknown config key"));
        assert!(c.set("head.layers", "three").is_err());
    }

    #[test]
    fn preset_applies_first() {
        let pairs = RunConfig::parse_pairs("head.layers = 5\nmodel.preset = base # comment\n", "t")
            .unwrap();
        let mut c = RunConfig::default();
        c.apply(&pairs).unwrap();
        assert_eq!(c.model.encoder.search_size, 256);
        assert_eq!(c.model.head.layers, 5);
    }

    #[test]
    fn taps_drive_decoder_count() {
        let mut c = RunConfig::default();
        c.set("diffusion.taps", "6,7").unwrap();
        c.finish().unwrap();
        assert_eq!(c.model.fusion.n_decoders, 2);
    }
}
