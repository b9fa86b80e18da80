//! Tracker optimization: the warm-up/step learning-rate schedule, batches of
//! template/search pairs, and the training loop.

mod data;
mod loss;
mod optim;
mod pretrain;

use std::collections::BTreeMap;
use std::io::Write;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{synthetic_sequences, template_crops, Jitter, Sample, TrainSet};
pub use loss::{focal_loss, giou_tensor, total_loss, LossBreakdown, LossWeights, FOCAL_EPS};
pub use optim::{clip_grad_norm, global_norm, ClipStats, ClippedAdamW};
pub use pretrain::{
    pretrain_denoiser, pretrain_vae, reconstruction_psnr, PretrainConfig, PretrainReport,
};

use crate::datasets::SequenceRecord;
use crate::error::{bail, GladError, Result};
use crate::fusion::Fused;
use crate::geometry::iou;
use crate::head::{encode_targets, Targets};
use crate::imaging::Image;
use crate::model::{GladModel, DIFFUSION_PREFIX, ENCODER_PREFIX, FUSION_PREFIX, HEAD_PREFIX};
use crate::tracker::{run_sequence, Tracker};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub decay_epoch: usize,
    pub peak_lr: f64,
    pub decayed_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub train_sequences: usize,
    pub seed: u64,
    pub finetune_diffusion: bool,
    pub jitter: Jitter,
    pub loss: LossWeights,
}

impl TrainConfig {
    /// 20 epochs with the landmarks at 2 and 16.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            warmup_epochs: 2,
            decay_epoch: 16,
            peak_lr: 4e-4,
            decayed_lr: 4e-5,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            batch_size: 16,
            steps_per_epoch: 25,
            train_sequences: 48,
            seed: 0,
            finetune_diffusion: false,
            jitter: Jitter::default(),
            loss: LossWeights::default(),
        }
    }

    /// The full-length schedule: 300 epochs, landmarks at 30 and 240.
    pub fn full_length() -> Self {
        Self {
            epochs: 300,
            warmup_epochs: 30,
            decay_epoch: 240,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_epochs < self.decay_epoch && self.decay_epoch < self.epochs) {
            bail!(
                Config,
                "need warmup_epochs < decay_epoch < epochs, got {} / {} / {}",
                self.warmup_epochs,
                self.decay_epoch,
                self.epochs
            );
        }
        if !(self.peak_lr > 0.0 && self.decayed_lr > 0.0) {
            bail!(Config, "learning rates must be positive");
        }
        if self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            bail!(Config, "weight_decay must be >= 0 and grad_clip > 0");
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.train_sequences == 0 {
            bail!(
                Config,
                "batch_size, steps_per_epoch and train_sequences must be positive"
            );
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn epoch_frac(&self, step: usize) -> f64 {
        step as f64 / self.total_steps() as f64
    }
}

/// Learning rate at a point of training given in epochs.
pub fn lr_at_epoch(epoch: f64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs as f64;
    if epoch < warm {
        cfg.peak_lr * epoch / warm
    } else if epoch < cfg.decay_epoch as f64 {
        cfg.peak_lr
    } else {
        cfg.decayed_lr
    }
}

/// Linear warm-up from 0, constant peak, then the decayed rate.
/// `epoch_frac` is the fraction of the whole schedule.
pub fn lr_at(epoch_frac: f64, cfg: &TrainConfig) -> f64 {
    lr_at_epoch(epoch_frac * cfg.epochs as f64, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

pub const LOG_HEADER: &str = "step\tlr\ttotal\tl1\tgiou\tfocal";

impl StepLog {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.lr, self.loss.total, self.loss.l1, self.loss.giou, self.loss.focal
        )
    }
}

/// Parameter-name prefixes updated during tracker training.
pub fn trainable_prefixes(finetune_diffusion: bool) -> Vec<&'static str> {
    let mut p = vec![ENCODER_PREFIX, FUSION_PREFIX, HEAD_PREFIX];
    if finetune_diffusion {
        p.push(DIFFUSION_PREFIX);
    }
    p
}

pub struct Trainer<'a> {
    model: &'a GladModel,
    data: &'a TrainSet,
    cfg: TrainConfig,
    /// Per-sequence conditioning, computed once while the diffusion side is frozen.
    fused: Vec<Fused>,
    opt: ClippedAdamW,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a GladModel, data: &'a TrainSet, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut fused = Vec::new();
        if !cfg.finetune_diffusion {
            for (t, seq) in data.templates.iter().zip(&data.sequences) {
                fused.push(model.condition(&[t], &[seq.text.as_str()])?.detach());
            }
        }
        let vars = model
            .store()
            .trainable_vars(&trainable_prefixes(cfg.finetune_diffusion));
        let opt = ClippedAdamW::new(vars, 0.0, cfg.weight_decay, cfg.grad_clip)?;
        Ok(Self {
            model,
            data,
            cfg: cfg.clone(),
            fused,
            opt,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// The batch for `step` depends only on the seed and the step index.
    pub fn batch(&self, step: usize) -> Result<Vec<Sample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step as u64 + 1);
        (0..self.cfg.batch_size)
            .map(|_| self.data.sample(&mut rng, &self.cfg.jitter))
            .collect()
    }

    /// Forward pass and loss on `samples`.
    pub fn loss(&self, samples: &[Sample], train: bool) -> Result<(Tensor, LossBreakdown)> {
        let templates: Vec<&Image> = samples
            .iter()
            .map(|s| &self.data.templates[s.seq])
            .collect();
        let searches: Vec<&Image> = samples.iter().map(|s| &s.search).collect();
        let fused = if self.cfg.finetune_diffusion {
            let texts: Vec<&str> = samples
                .iter()
                .map(|s| self.data.sequences[s.seq].text.as_str())
                .collect();
            self.model.condition(&templates, &texts)?
        } else {
            let parts: Vec<&Fused> = samples.iter().map(|s| &self.fused[s.seq]).collect();
            Fused::cat(&parts)?
        };
        let tt = self.model.encode_images(&templates)?;
        let st = self.model.encode_images(&searches)?;
        let out = self.model.predict(&tt, &st, &fused, train)?;
        let (_, _, h, w) = out.c.dims4()?;
        let targets = samples
            .iter()
            .map(|s| encode_targets(&s.gt, (h, w)))
            .collect::<Result<Vec<Targets>>>()?;
        let gts: Vec<_> = samples.iter().map(|s| s.gt).collect();
        total_loss(&out, &targets, &gts, &self.cfg.loss)
    }

    /// One update on `samples` at learning rate `lr`.
    pub fn update(&mut self, samples: &[Sample], lr: f64) -> Result<(LossBreakdown, ClipStats)> {
        let (loss, parts) = self.loss(samples, true)?;
        self.opt.set_lr(lr);
        let clip = self.opt.backward_step(&loss)?;
        Ok((parts, clip))
    }

    pub fn step(&mut self, step: usize) -> Result<StepLog> {
        let batch = self.batch(step)?;
        let lr = lr_at(self.cfg.epoch_frac(step), &self.cfg);
        let (loss, clip) = self.update(&batch, lr)?;
        Ok(StepLog {
            step,
            lr,
            loss,
            grad_norm: clip.norm_before,
        })
    }

    /// Steps `start..total_steps`; each log line goes to `on_step`.
    pub fn run(
        &mut self,
        start: usize,
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        for step in start..self.cfg.total_steps() {
            let log = self.step(step)?;
            on_step(&log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Writes the header and returns a step sink appending TSV lines to `w`.
pub fn tsv_logger<W: Write>(mut w: W, header: bool) -> Result<impl FnMut(&StepLog) -> Result<()>> {
    if header {
        writeln!(w, "{LOG_HEADER}").map_err(|e| GladError::Input(format!("training log: {e}")))?;
    }
    Ok(move |log: &StepLog| {
        writeln!(w, "{}", log.tsv()).map_err(|e| GladError::Input(format!("training log: {e}")))
    })
}

/// Staged fitting of the model's toy diffusion stack on template crops of
/// `sequences`: autoencoder, then caption encoder and U-Net.
/// `log` receives `(stage, step, loss)` with stage `vae` or `denoiser`.
pub fn pretrain_diffusion(
    model: &GladModel,
    sequences: &[SequenceRecord],
    cfg: &PretrainConfig,
    mut log: impl FnMut(&str, usize, f64),
) -> Result<PretrainReport> {
    let toy = model.toy_diffusion().ok_or_else(|| {
        GladError::Config("pretraining needs the built-in diffusion stack".into())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let crops = template_crops(
        sequences,
        cfg.crops,
        model.config(),
        &Jitter::default(),
        &mut rng,
    )?;
    let (vae_losses, psnr, latent_scale) =
        pretrain_vae(toy, model.store(), &crops, cfg, |i, v| log("vae", i, v))?;
    let denoiser_losses = pretrain_denoiser(toy, model.store(), &crops, cfg, |i, v| {
        log("denoiser", i, v)
    })?;
    Ok(PretrainReport {
        vae_losses,
        psnr,
        latent_scale,
        denoiser_losses,
    })
}

/// Mean over sequences of the per-sequence mean IoU on frames after the first.
pub fn mean_iou(tracker: &Tracker, sequences: &[SequenceRecord]) -> Result<f64> {
    if sequences.is_empty() {
        bail!(Input, "no sequences to evaluate");
    }
    let mut total = 0.0;
    for seq in sequences {
        let run = run_sequence(tracker, seq)?;
        let n = seq.gt_boxes.len().min(run.boxes.len());
        if n < 2 {
            bail!(
                Input,
                "sequence {} needs at least two annotated frames",
                seq.name
            );
        }
        let mut s = 0.0;
        for i in 1..n {
            s += iou(&run.boxes[i], &seq.gt_boxes[i])?;
        }
        total += s / (n - 1) as f64;
    }
    Ok(total / sequences.len() as f64)
}

/// Copies every tensor whose name starts with `prefix` (e.g. pretrained
/// diffusion weights shared between runs).
pub fn tensors_with_prefix(model: &GladModel, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
    model
        .store()
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| Ok((n, t.copy()?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let d = TrainConfig::desk();
        assert_eq!(lr_at(0.0, &d), 0.0);
        assert_eq!(lr_at_epoch(2.0, &d), 4e-4);
        assert_eq!(lr_at_epoch(10.0, &d), 4e-4);
        assert_eq!(lr_at_epoch(16.0, &d), 4e-5);
        assert_eq!(lr_at_epoch(1.0, &d), 2e-4);
        let p = TrainConfig::full_length();
        assert_eq!(lr_at(0.1, &p), 4e-4);
        assert_eq!(lr_at(0.5, &p), 4e-4);
        assert_eq!(lr_at(250.0 / 300.0, &p), 4e-5);
    }

    #[test]
    fn invalid_landmarks_rejected() {
        let mut c = TrainConfig::desk();
        c.decay_epoch = 1;
        assert!(c.validate().is_err());
    }
}
