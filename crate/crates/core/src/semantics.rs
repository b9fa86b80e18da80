//! Template semantics analysis: CLIP-style image/text scores of the template
//! frame and of frames sampled through a video, high/low-semantic
//! classification, dataset aggregates and an image degradation study.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::SequenceRecord;
use crate::error::{bail, GladError, Result};
use crate::geometry::{crop_region, BoundingBox};
use crate::imaging::Image;
use crate::vocab;

pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;
pub const DEFAULT_STRIDE: usize = 20;

/// Image/text embedding model.
pub trait EmbeddingBackend: Send + Sync {
    fn embed_image(&self, img: &Image) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn logit_scale(&self) -> f64 {
        DEFAULT_LOGIT_SCALE
    }
}

/// `LS * cos(img, txt)`.
pub fn clip_score(img: &[f64], txt: &[f64], logit_scale: f64) -> Result<f64> {
    if img.len() != txt.len() {
        bail!(
            Shape,
            "embedding sizes differ: {} vs {}",
            img.len(),
            txt.len()
        );
    }
    let ni = img.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = txt.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ni == 0.0 || nt == 0.0 {
        bail!(Degenerate, "zero embedding vector");
    }
    let dot: f64 = img.iter().zip(txt).map(|(a, b)| a * b).sum();
    Ok(logit_scale * dot / (ni * nt))
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn seeded_unit(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Hash-seeded unit vectors: identical inputs share an embedding, anything else
/// is (nearly) orthogonal. Useful only for plumbing tests.
#[derive(Debug, Clone)]
pub struct StubBackend {
    pub dim: usize,
}

impl Default for StubBackend {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

impl EmbeddingBackend for StubBackend {
    fn embed_image(&self, img: &Image) -> Result<Vec<f64>> {
        let bytes = img.as_raw().iter().flat_map(|v| v.to_le_bytes());
        Ok(seeded_unit(fnv1a(bytes) ^ 0x1, self.dim))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(seeded_unit(
            fnv1a(text.trim().to_lowercase().bytes()) ^ 0x2,
            self.dim,
        ))
    }
}

/// Hand-set embeddings: images are looked up by their mean color, texts by
/// exact string. For building fixtures with exactly known scores.
#[derive(Debug, Clone, Default)]
pub struct TableBackend {
    pub images: Vec<([f32; 3], Vec<f64>)>,
    pub texts: HashMap<String, Vec<f64>>,
    pub logit_scale: f64,
}

impl EmbeddingBackend for TableBackend {
    fn embed_image(&self, img: &Image) -> Result<Vec<f64>> {
        let m = crate::imaging::mean_color(img);
        self.images
            .iter()
            .find(|(c, _)| c.iter().zip(&m).all(|(a, b)| (a - b).abs() < 1e-4))
            .map(|(_, v)| v.clone())
            .ok_or_else(|| GladError::Input(format!("no table embedding for mean color {m:?}")))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.texts
            .get(text)
            .cloned()
            .ok_or_else(|| GladError::Input(format!("no table embedding for `{text}`")))
    }

    fn logit_scale(&self) -> f64 {
        self.logit_scale
    }
}

/// Color-vocabulary embedding: an image maps to the fraction of its pixels
/// nearest to each named color (plus a bucket for pixels far from all of them);
/// a caption maps to the counts of the color words it contains.
#[derive(Debug, Clone)]
pub struct PaletteBackend {
    /// Pixels farther than this (RGB Euclidean) from every palette color go to the extra bucket.
    pub max_distance: f32,
}

impl Default for PaletteBackend {
    fn default() -> Self {
        Self { max_distance: 0.35 }
    }
}

impl EmbeddingBackend for PaletteBackend {
    fn embed_image(&self, img: &Image) -> Result<Vec<f64>> {
        let k = vocab::COLORS.len();
        let mut hist = vec![0.0; k + 1];
        for px in img.pixels() {
            let mut best = (k, self.max_distance);
            for (i, (_, rgb)) in vocab::COLORS.iter().enumerate() {
                let d =
                    px.0.iter()
                        .zip(rgb)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f32>()
                        .sqrt();
                if d < best.1 {
                    best = (i, d);
                }
            }
            hist[best.0] += 1.0;
        }
        let n = (img.width() * img.height()).max(1) as f64;
        Ok(hist.into_iter().map(|v| v / n).collect())
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; vocab::COLORS.len() + 1];
        for word in text.to_lowercase().split(|c: char| !c.is_alphanumeric()) {
            if let Some(i) = vocab::COLORS.iter().position(|(c, _)| *c == word) {
                v[i] += 1.0;
            }
        }
        Ok(v)
    }
}

/// Which image stands for the template when computing `S_0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TemplateSource {
    #[default]
    FullFrame,
    /// Crop around the first box with the given area factor's default (2.0).
    Crop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub name: String,
    /// Template score `S_0`.
    pub s0: f64,
    /// `(frame index, score)` for frames `stride, 2 stride, ...`.
    pub frames: Vec<(usize, f64)>,
}

impl VideoScores {
    /// Sampled indices including the template frame.
    pub fn indices(&self) -> Vec<usize> {
        std::iter::once(0)
            .chain(self.frames.iter().map(|f| f.0))
            .collect()
    }
}

pub fn sample_indices(len: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        bail!(Config, "sampling stride must be positive");
    }
    Ok((0..len).step_by(stride).collect())
}

pub fn score_video(
    seq: &SequenceRecord,
    backend: &dyn EmbeddingBackend,
    stride: usize,
    template: TemplateSource,
) -> Result<VideoScores> {
    if seq.text.trim().is_empty() {
        bail!(
            Input,
            "sequence {} has no caption to score against",
            seq.name
        );
    }
    if seq.is_empty() {
        bail!(Input, "sequence {} has no frames", seq.name);
    }
    let txt = backend.embed_text(&seq.text)?;
    let ls = backend.logit_scale();
    let score = |img: &Image| -> Result<f64> { clip_score(&backend.embed_image(img)?, &txt, ls) };
    let first = seq.frame(0)?;
    let s0 = match template {
        TemplateSource::FullFrame => score(&first)?,
        TemplateSource::Crop => {
            let b = seq.first_box()?;
            let side = (2.0 * b.area().sqrt()).round().max(1.0) as u32;
            score(&crop_region(&first, &b, 2.0, side)?.0)?
        }
    };
    let mut frames = Vec::new();
    for i in sample_indices(seq.len(), stride)?.into_iter().skip(1) {
        frames.push((i, score(&seq.frame(i)?)?));
    }
    Ok(VideoScores {
        name: seq.name.clone(),
        s0,
        frames,
    })
}

/// `score_video` over many sequences, in parallel; results keep the input order.
pub fn score_videos(
    sequences: &[SequenceRecord],
    backend: &dyn EmbeddingBackend,
    stride: usize,
    template: TemplateSource,
) -> Result<Vec<VideoScores>> {
    sequences
        .par_iter()
        .map(|s| score_video(s, backend, stride, template))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    /// `true` = high-semantic, per sampled frame (excluding the template).
    pub frames: Vec<bool>,
    pub mean: f64,
    pub video_high: bool,
}

/// A frame is high-semantic iff its score is strictly greater than `S_0`; a
/// video iff the mean of its frame scores is strictly greater than `S_0`.
pub fn classify(scores: &VideoScores) -> Result<Classification> {
    if scores.frames.is_empty() {
        bail!(
            Undefined,
            "video {} has only the template score",
            scores.name
        );
    }
    let frames: Vec<bool> = scores.frames.iter().map(|(_, s)| *s > scores.s0).collect();
    let mean = scores.frames.iter().map(|f| f.1).sum::<f64>() / scores.frames.len() as f64;
    Ok(Classification {
        frames,
        mean,
        video_high: mean > scores.s0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSemantics {
    pub high_frames: usize,
    pub low_frames: usize,
    pub high_frame_ratio: f64,
    pub low_frame_ratio: f64,
    pub high_videos: usize,
    pub low_videos: usize,
    pub high_video_ratio: f64,
    pub low_video_ratio: f64,
    pub average_template: f64,
    /// Videos with only a template score (no video label).
    pub unlabeled_videos: usize,
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Ratios complementary by construction and rounded to four decimals.
fn ratio_pair(high: usize, low: usize) -> (f64, f64) {
    let total = high + low;
    if total == 0 {
        return (0.0, 0.0);
    }
    let h = round4(high as f64 / total as f64);
    (h, round4(1.0 - h))
}

pub fn aggregate(videos: &[VideoScores]) -> Result<DatasetSemantics> {
    if videos.is_empty() {
        bail!(Undefined, "aggregate over zero videos");
    }
    let (mut hf, mut lf, mut hv, mut lv, mut unlabeled) = (0, 0, 0, 0, 0);
    for v in videos {
        match classify(v) {
            Ok(c) => {
                let high = c.frames.iter().filter(|h| **h).count();
                hf += high;
                lf += c.frames.len() - high;
                if c.video_high {
                    hv += 1;
                } else {
                    lv += 1;
                }
            }
            Err(GladError::Undefined(_)) => unlabeled += 1,
            Err(e) => return Err(e),
        }
    }
    let (hfr, lfr) = ratio_pair(hf, lf);
    let (hvr, lvr) = ratio_pair(hv, lv);
    Ok(DatasetSemantics {
        high_frames: hf,
        low_frames: lf,
        high_frame_ratio: hfr,
        low_frame_ratio: lfr,
        high_videos: hv,
        low_videos: lv,
        high_video_ratio: hvr,
        low_video_ratio: lvr,
        average_template: videos.iter().map(|v| v.s0).sum::<f64>() / videos.len() as f64,
        unlabeled_videos: unlabeled,
    })
}

impl DatasetSemantics {
    /// Human-readable table with the dataset columns.
    pub fn table(&self, dataset: &str) -> String {
        format!(
            "dataset\thigh_frames\tlow_frames\thigh_videos\tlow_videos\tavg_template\n\
             {dataset}\t{} ({:.2}%)\t{} ({:.2}%)\t{} ({:.2}%)\t{} ({:.2}%)\t{:.2}\n",
            self.high_frames,
            100.0 * self.high_frame_ratio,
            self.low_frames,
            100.0 * self.low_frame_ratio,
            self.high_videos,
            100.0 * self.high_video_ratio,
            self.low_videos,
            100.0 * self.low_video_ratio,
            self.average_template
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Degradation {
    Blur,
    Occlusion,
    Darken,
    Jitter,
}

impl Degradation {
    pub const ALL: [Degradation; 4] = [
        Degradation::Blur,
        Degradation::Occlusion,
        Degradation::Darken,
        Degradation::Jitter,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Degradation::Blur => "blur",
            Degradation::Occlusion => "occlusion",
            Degradation::Darken => "darken",
            Degradation::Jitter => "jitter",
        }
    }
}

impl std::str::FromStr for Degradation {
    type Err = GladError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blur" => Ok(Degradation::Blur),
            "occlusion" => Ok(Degradation::Occlusion),
            "darken" => Ok(Degradation::Darken),
            "jitter" => Ok(Degradation::Jitter),
            other => Err(GladError::Config(format!(
                "unknown degradation `{other}` (expected blur, occlusion, darken or jitter)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub blur_sigma: f64,
    /// Fraction of the box area covered by the occluder.
    pub occlusion_fraction: f64,
    pub darken_factor: f32,
    /// Maximum hue shift (fraction of a turn) and relative saturation change.
    pub jitter: f64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            blur_sigma: 3.0,
            occlusion_fraction: 0.3,
            darken_factor: 0.4,
            jitter: 0.2,
        }
    }
}

/// Mid-gray occluder color.
pub const OCCLUDER: [f32; 3] = [0.5, 0.5, 0.5];

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / sum).collect();
    let (w, h) = (img.width() as i64, img.height() as i64);
    let pass = |src: &Image, horizontal: bool| -> Image {
        let mut out = Image::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for (k, kv) in kernel.iter().enumerate() {
                    let o = k as i64 - r;
                    let (sx, sy) = if horizontal {
                        ((x + o).clamp(0, w - 1), y)
                    } else {
                        (x, (y + o).clamp(0, h - 1))
                    };
                    let p = src.get_pixel(sx as u32, sy as u32).0;
                    for c in 0..3 {
                        acc[c] += kv * p[c] as f64;
                    }
                }
                out.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([acc[0] as f32, acc[1] as f32, acc[2] as f32]),
                );
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Applies one degradation. Occlusion covers `occlusion_fraction` of `region`
/// (the whole image when `None`) with a full-width band at a seeded position.
pub fn degrade(
    img: &Image,
    kind: Degradation,
    params: &DegradeParams,
    region: Option<&BoundingBox>,
    seed: u64,
) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match kind {
        Degradation::Blur => gaussian_blur(img, params.blur_sigma),
        Degradation::Darken => {
            let mut out = img.clone();
            out.pixels_mut()
                .for_each(|p| p.0.iter_mut().for_each(|v| *v *= params.darken_factor));
            out
        }
        Degradation::Jitter => {
            let dh = rng.random_range(-params.jitter..=params.jitter) as f32;
            let ds = 1.0 + rng.random_range(-params.jitter..=params.jitter) as f32;
            let mut out = img.clone();
            for p in out.pixels_mut() {
                let [h, s, v] = rgb_to_hsv(p.0);
                p.0 = hsv_to_rgb([h + dh, (s * ds).clamp(0.0, 1.0), v]);
            }
            out
        }
        Degradation::Occlusion => {
            if !(0.0..=1.0).contains(&params.occlusion_fraction) {
                bail!(Config, "occlusion fraction must lie in [0, 1]");
            }
            let (iw, ih) = (img.width() as f64, img.height() as f64);
            let [x, y, w, h] = match region {
                Some(b) => b.clip(iw, ih).as_xywh(),
                None => [0.0, 0.0, iw, ih],
            };
            let (x0, y0) = (x.round() as u32, y.round() as u32);
            let (bw, bh) = (w.round() as u32, h.round() as u32);
            let band = (params.occlusion_fraction * bh as f64).round() as u32;
            let mut out = img.clone();
            if band > 0 && bw > 0 {
                let top = y0 + rng.random_range(0..=bh - band);
                for yy in top..(top + band).min(img.height()) {
                    for xx in x0..(x0 + bw).min(img.width()) {
                        out.put_pixel(xx, yy, image::Rgb(OCCLUDER));
                    }
                }
            }
            out
        }
    })
}

/// Average template score `S_0` per condition: `None` is the raw template,
/// then one entry per degradation, each applied to the first frame.
pub fn degradation_study(
    sequences: &[SequenceRecord],
    backend: &dyn EmbeddingBackend,
    kinds: &[Degradation],
    params: &DegradeParams,
    seed: u64,
) -> Result<Vec<(Option<Degradation>, f64)>> {
    if sequences.is_empty() {
        bail!(Input, "no sequences for the degradation study");
    }
    let conditions: Vec<Option<Degradation>> = std::iter::once(None)
        .chain(kinds.iter().copied().map(Some))
        .collect();
    let mut out = Vec::with_capacity(conditions.len());
    for cond in conditions {
        let scores = sequences
            .par_iter()
            .enumerate()
            .map(|(i, seq)| {
                let first = seq.frame(0)?;
                let img = match cond {
                    None => first,
                    Some(kind) => degrade(
                        &first,
                        kind,
                        params,
                        Some(&seq.first_box()?),
                        seed.wrapping_add(i as u64),
                    )?,
                };
                clip_score(
                    &backend.embed_image(&img)?,
                    &backend.embed_text(&seq.text)?,
                    backend.logit_scale(),
                )
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push((cond, scores.iter().sum::<f64>() / sequences.len() as f64));
    }
    Ok(out)
}
