//! Training pairs: a fixed first-frame template per sequence and jittered
//! search crops from random frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::datasets::SequenceRecord;
use crate::error::{bail, Result};
use crate::geometry::{crop_region, map_box_to_crop, BoundingBox, Unit};
use crate::imaging::Image;
use crate::synthetic::{make_synthetic_sequence, SyntheticSceneConfig};

/// Search-anchor perturbation, relative to `sqrt(w * h)` of the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Maximum center shift per axis.
    pub shift: f64,
    /// Log-scale half range of the anchor size.
    pub scale: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            shift: 0.5,
            scale: 0.15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub seq: usize,
    pub search: Image,
    /// Ground truth inside the search crop, NORMALIZED.
    pub gt: BoundingBox,
}

#[derive(Debug, Clone)]
pub struct TrainSet {
    pub sequences: Vec<SequenceRecord>,
    pub templates: Vec<Image>,
    cfg: ModelConfig,
}

impl TrainSet {
    pub fn new(sequences: Vec<SequenceRecord>, cfg: &ModelConfig) -> Result<Self> {
        if sequences.is_empty() {
            bail!(Input, "no training sequences");
        }
        let mut templates = Vec::with_capacity(sequences.len());
        for seq in &sequences {
            if seq.gt_boxes.len() < seq.len() {
                bail!(
                    Input,
                    "training sequence {} is not fully annotated",
                    seq.name
                );
            }
            let (t, _) = crop_region(
                &seq.frame(0)?,
                &seq.first_box()?,
                cfg.crop.template_factor,
                cfg.encoder.template_size,
            )?;
            templates.push(t);
        }
        Ok(Self {
            sequences,
            templates,
            cfg: cfg.clone(),
        })
    }

    /// `count` synthetic sequences with seeds `first_seed..first_seed + count`.
    pub fn synthetic(
        count: usize,
        first_seed: u64,
        scene: &SyntheticSceneConfig,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let seqs = synthetic_sequences(count, first_seed, scene);
        Self::new(seqs, cfg)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn captions(&self) -> Vec<&str> {
        self.sequences.iter().map(|s| s.text.as_str()).collect()
    }

    /// One search crop from a random frame of a random sequence.
    pub fn sample<R: Rng>(&self, rng: &mut R, jitter: &Jitter) -> Result<Sample> {
        let seq = rng.random_range(0..self.sequences.len());
        let record = &self.sequences[seq];
        let frame_idx = rng.random_range(0..record.len());
        let frame = record.frame(frame_idx)?;
        let gt = record.gt_boxes[frame_idx];
        let (cx, cy) = gt.center();
        let side = gt.area().sqrt();
        let dx = rng.random_range(-jitter.shift..=jitter.shift) * side;
        let dy = rng.random_range(-jitter.shift..=jitter.shift) * side;
        let s = rng.random_range(-jitter.scale..=jitter.scale).exp();
        let anchor = BoundingBox::cxcywh(
            cx + dx,
            cy + dy,
            gt.width() * s,
            gt.height() * s,
            Unit::Pixel,
        );
        let (search, mapping) = crop_region(
            &frame,
            &anchor,
            self.cfg.crop.search_factor,
            self.cfg.encoder.search_size,
        )?;
        let n = mapping.crop_size as f64;
        let [x, y, w, h] = map_box_to_crop(&gt, &mapping).as_xywh();
        Ok(Sample {
            seq,
            search,
            gt: BoundingBox::xywh(x / n, y / n, w / n, h / n, Unit::Normalized),
        })
    }
}

pub fn synthetic_sequences(
    count: usize,
    first_seed: u64,
    scene: &SyntheticSceneConfig,
) -> Vec<SequenceRecord> {
    (0..count as u64)
        .map(|i| make_synthetic_sequence(first_seed + i, scene))
        .collect()
}

/// Template-sized crops around the ground truth of random frames, with their
/// captions; used to fit the autoencoder and the denoiser.
pub fn template_crops<R: Rng>(
    sequences: &[SequenceRecord],
    count: usize,
    cfg: &ModelConfig,
    jitter: &Jitter,
    rng: &mut R,
) -> Result<Vec<(Image, String)>> {
    if sequences.is_empty() {
        bail!(Input, "no sequences to crop from");
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let seq = &sequences[rng.random_range(0..sequences.len())];
        let i = rng.random_range(0..seq.len());
        let gt = seq.gt_boxes[i];
        let (cx, cy) = gt.center();
        let side = gt.area().sqrt();
        let dx = rng.random_range(-jitter.shift..=jitter.shift) * side * 0.5;
        let dy = rng.random_range(-jitter.shift..=jitter.shift) * side * 0.5;
        let anchor = BoundingBox::cxcywh(cx + dx, cy + dy, gt.width(), gt.height(), Unit::Pixel);
        let (crop, _) = crop_region(
            &seq.frame(i)?,
            &anchor,
            cfg.crop.template_factor,
            cfg.encoder.template_size,
        )?;
        out.push((crop, seq.text.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_keep_the_target_in_the_crop() {
        let cfg = ModelConfig::desk();
        let scene = SyntheticSceneConfig {
            frames: 10,
            ..Default::default()
        };
        let set = TrainSet::synthetic(3, 0, &scene, &cfg).unwrap();
        assert_eq!(set.templates[0].width(), cfg.encoder.template_size);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = set.sample(&mut rng, &Jitter::default()).unwrap();
            assert_eq!(s.search.width(), cfg.encoder.search_size);
            let (cx, cy) = s.gt.center();
            assert!((0.0..1.0).contains(&cx) && (0.0..1.0).contains(&cy));
            assert!(s.gt.is_inside(1.0, 1.0), "{:?}", s.gt.as_xywh());
        }
    }
}
