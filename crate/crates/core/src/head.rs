//! Center-based localization head: classification, offset and size maps over
//! the search grid, Hanning-window penalty, box decoding and training targets.

use candle_core::{DType, IndexOp, Tensor};

use crate::config::HeadConfig;
use crate::encoders::TokenGrid;
use crate::error::{bail, Result};
use crate::geometry::{BoundingBox, Unit};
use crate::nn::{BatchNorm2d, Conv2d, Scope};

/// Prior probability 0.1 for the classification logits: `-ln(0.9 / 0.1)`.
const CLS_BIAS: f64 = -2.19;

#[derive(Clone)]
struct Branch {
    convs: Vec<(Conv2d, BatchNorm2d)>,
    out: Conv2d,
}

impl Branch {
    fn new(
        vs: &Scope,
        in_ch: usize,
        ch: usize,
        layers: usize,
        out_ch: usize,
        bias: f64,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(layers);
        for i in 0..layers {
            let c_in = if i == 0 { in_ch } else { ch };
            convs.push((
                Conv2d::new(&vs.pp(format!("conv.{i}")), c_in, ch, 3, 1, 1)?,
                BatchNorm2d::new(&vs.pp(format!("bn.{i}")), ch)?,
            ));
        }
        Ok(Self {
            convs,
            out: Conv2d::with_bias(&vs.pp("out"), ch, out_ch, 1, 1, 0, bias)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, bn) in &self.convs {
            h = bn.forward(&conv.forward(&h)?, train)?.relu()?;
        }
        Ok(candle_nn::ops::sigmoid(&self.out.forward(&h)?)?)
    }
}

/// Raw head output tensors: `c` is `[B, 1, H, W]`, `o` and `s` are `[B, 2, H, W]`.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub c: Tensor,
    pub o: Tensor,
    pub s: Tensor,
}

impl HeadOutput {
    pub fn batch(&self) -> usize {
        self.c.dims()[0]
    }

    /// Host copy of one batch item.
    pub fn maps(&self, index: usize) -> Result<ScoreMaps> {
        let (_, _, h, w) = self.c.dims4()?;
        let flat = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
        };
        let c = flat(&self.c.i(index)?)?;
        let o = self.o.i(index)?;
        let s = self.s.i(index)?;
        Ok(ScoreMaps {
            c,
            o: [flat(&o.i(0)?)?, flat(&o.i(1)?)?],
            s: [flat(&s.i(0)?)?, flat(&s.i(1)?)?],
            h,
            w,
        })
    }
}

#[derive(Clone)]
pub struct CenterHead {
    cls: Branch,
    offset: Branch,
    size: Branch,
}

impl std::fmt::Debug for CenterHead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("CenterHead")
    }
}

impl CenterHead {
    pub fn new(vs: &Scope, in_ch: usize, cfg: &HeadConfig) -> Result<Self> {
        Ok(Self {
            cls: Branch::new(&vs.pp("cls"), in_ch, cfg.channels, cfg.layers, 1, CLS_BIAS)?,
            offset: Branch::new(&vs.pp("offset"), in_ch, cfg.channels, cfg.layers, 2, 0.0)?,
            size: Branch::new(&vs.pp("size"), in_ch, cfg.channels, cfg.layers, 2, 0.0)?,
        })
    }

    /// `train` selects batch statistics (and updates running ones) in the norm layers.
    pub fn forward(&self, search: &TokenGrid, train: bool) -> Result<HeadOutput> {
        let x = search.to_map()?;
        Ok(HeadOutput {
            c: self.cls.forward(&x, train)?,
            o: self.offset.forward(&x, train)?,
            s: self.size.forward(&x, train)?,
        })
    }
}

/// Host-side maps for one search region, all row-major `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps {
    pub c: Vec<f64>,
    pub o: [Vec<f64>; 2],
    pub s: [Vec<f64>; 2],
    pub h: usize,
    pub w: usize,
}

/// Symmetric Hann window of length `n` (`0.5 - 0.5 cos(2 pi k / (n - 1))`).
pub fn hanning(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    // Mirrored so equal-by-symmetry entries are bit-identical.
    (0..n)
        .map(|k| {
            let k = k.min(n - 1 - k);
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos()
        })
        .collect()
}

/// Outer product of two Hann windows, scaled to a maximum of 1.
pub fn hanning_2d(h: usize, w: usize) -> Vec<f64> {
    let (wy, wx) = (hanning(h), hanning(w));
    let mut out: Vec<f64> = wy
        .iter()
        .flat_map(|a| wx.iter().map(move |b| a * b))
        .collect();
    let max = out.iter().cloned().fold(f64::MIN, f64::max);
    if max > 0.0 {
        out.iter_mut().for_each(|v| *v /= max);
    }
    out
}

/// `(1 - weight) C + weight W_hann`.
pub fn apply_hanning(c: &[f64], h: usize, w: usize, weight: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&weight) {
        bail!(Config, "hanning weight {weight} outside [0, 1]");
    }
    if c.len() != h * w {
        bail!(Shape, "{} scores for a {h}x{w} grid", c.len());
    }
    if weight == 0.0 {
        return Ok(c.to_vec());
    }
    let win = hanning_2d(h, w);
    Ok(c.iter()
        .zip(&win)
        .map(|(s, p)| (1.0 - weight) * s + weight * p)
        .collect())
}

/// Index of the maximum, first in row-major order on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl ScoreMaps {
    /// Box at a given cell: center `((col + O_x) / W, (row + O_y) / H)`, size `(S_w, S_h)`.
    pub fn box_at(&self, row: usize, col: usize) -> BoundingBox {
        let k = row * self.w + col;
        let cx = (col as f64 + self.o[0][k]) / self.w as f64;
        let cy = (row as f64 + self.o[1][k]) / self.h as f64;
        BoundingBox::cxcywh(
            cx,
            cy,
            self.s[0][k].max(0.0),
            self.s[1][k].max(0.0),
            Unit::Normalized,
        )
    }

    /// Box at the highest classification score.
    pub fn decode(&self) -> BoundingBox {
        self.decode_with(&self.c)
    }

    /// Box at the highest entry of an alternative score map (e.g. after the window penalty).
    pub fn decode_with(&self, scores: &[f64]) -> BoundingBox {
        let k = argmax(scores);
        self.box_at(k / self.w, k % self.w)
    }
}

pub fn decode_box(maps: &ScoreMaps) -> BoundingBox {
    maps.decode()
}

/// Training targets for one ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// Gaussian heatmap, 1 at the center cell.
    pub heatmap: Vec<f64>,
    pub offset: (f64, f64),
    pub size: (f64, f64),
    /// `(row, col)` of the center cell.
    pub cell: (usize, usize),
    pub h: usize,
    pub w: usize,
}

/// Center cell `floor(c * W)` (clamped), sub-cell offset, size, and a Gaussian
/// heatmap with per-axis sigma of one sixth of the box extent in cells (at least 0.5).
pub fn encode_targets(gt: &BoundingBox, grid: (usize, usize)) -> Result<Targets> {
    if gt.unit != Unit::Normalized {
        bail!(Unit, "targets need a NORMALIZED box");
    }
    let (h, w) = grid;
    let [cx, cy, bw, bh] = gt.as_cxcywh();
    if !(bw > 0.0 && bh > 0.0) {
        bail!(Degenerate, "zero-area ground truth");
    }
    let (fx, fy) = (cx * w as f64, cy * h as f64);
    let col = (fx.floor().max(0.0) as usize).min(w - 1);
    let row = (fy.floor().max(0.0) as usize).min(h - 1);
    let offset = (fx - col as f64, fy - row as f64);
    let sx = (bw * w as f64 / 6.0).max(0.5);
    let sy = (bh * h as f64 / 6.0).max(0.5);
    let mut heatmap = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let dx = c as f64 - col as f64;
            let dy = r as f64 - row as f64;
            heatmap.push((-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp());
        }
    }
    Ok(Targets {
        heatmap,
        offset,
        size: (bw, bh),
        cell: (row, col),
        h,
        w,
    })
}
