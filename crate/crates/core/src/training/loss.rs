//! Tracking loss: L1 and GIoU on the box read at the ground-truth cell, plus a
//! Gaussian focal loss on the classification map.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{bail, GladError, Result};
use crate::geometry::{BoundingBox, Unit, GIOU_EPS};
use crate::head::{HeadOutput, Targets};

/// Classification probabilities are clamped to `[FOCAL_EPS, 1 - FOCAL_EPS]`.
pub const FOCAL_EPS: f64 = 1e-4;
const FOCAL_ALPHA: f64 = 2.0;
const FOCAL_BETA: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub focal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            focal: 1.0,
        }
    }
}

/// Unweighted terms; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Reads `[B, 2, H, W]` at one flat cell index per item, giving `[B, 2]`.
fn gather_cells(map: &Tensor, cells: &Tensor) -> Result<Tensor> {
    let (b, ch, h, w) = map.dims4()?;
    let idx = cells
        .reshape((b, 1, 1))?
        .broadcast_as((b, ch, 1))?
        .contiguous()?;
    Ok(map.reshape((b, ch, h * w))?.gather(&idx, 2)?.squeeze(2)?)
}

/// `[B, 4]` CXCYWH boxes to their corners.
fn corners(b: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let cx = b.narrow(1, 0, 1)?;
    let cy = b.narrow(1, 1, 1)?;
    let w = b.narrow(1, 2, 1)?;
    let h = b.narrow(1, 3, 1)?;
    Ok((
        (&cx - (&w * 0.5)?)?,
        (&cy - (&h * 0.5)?)?,
        (&cx + (&w * 0.5)?)?,
        (&cy + (&h * 0.5)?)?,
    ))
}

/// Per-item GIoU of `[B, 4]` CXCYWH boxes, `[B, 1]`.
pub fn giou_tensor(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let wh = pred.narrow(1, 2, 2)?.maximum(GIOU_EPS)?;
    let pred = Tensor::cat(&[&pred.narrow(1, 0, 2)?, &wh], 1)?;
    let (px1, py1, px2, py2) = corners(&pred)?;
    let (gx1, gy1, gx2, gy2) = corners(gt)?;
    let iw = (px2.minimum(&gx2)? - px1.maximum(&gx1)?)?.relu()?;
    let ih = (py2.minimum(&gy2)? - py1.maximum(&gy1)?)?.relu()?;
    let inter = (iw * ih)?;
    let pa = ((&px2 - &px1)? * (&py2 - &py1)?)?;
    let ga = ((&gx2 - &gx1)? * (&gy2 - &gy1)?)?;
    let union = ((pa + ga)? - &inter)?;
    let hw = (px2.maximum(&gx2)? - px1.minimum(&gx1)?)?;
    let hh = (py2.maximum(&gy2)? - py1.minimum(&gy1)?)?;
    let hull = (hw * hh)?;
    let iou = (inter / &union)?;
    Ok((iou - ((&hull - &union)? / &hull)?)?)
}

/// CenterNet-style focal loss against Gaussian heatmaps, normalized by the
/// number of peak cells. `c` is `[B, 1, H, W]`, `heat` is `[B, H*W]`.
pub fn focal_loss(c: &Tensor, heat: &Tensor) -> Result<Tensor> {
    let b = c.dims()[0];
    let p = c.reshape((b, ()))?.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)?;
    let pos = heat.ge(1.0)?.to_dtype(p.dtype())?;
    let neg = (1.0 - &pos)?;
    let one_minus_p = (1.0 - &p)?;
    let pos_term = (one_minus_p.powf(FOCAL_ALPHA)? * p.log()?)?;
    let neg_w = (1.0 - heat)?.powf(FOCAL_BETA)?;
    let neg_term = ((neg_w * p.powf(FOCAL_ALPHA)?)? * one_minus_p.log()?)?;
    let all = ((pos_term * &pos)? + (neg_term * neg)?)?;
    let n_pos = scalar(&pos.sum_all()?)?.max(1.0);
    Ok((all.sum_all()?.neg()? / n_pos)?)
}

/// Weighted tracking loss over a batch and its per-term breakdown.
///
/// The box is read at each item's ground-truth cell: center
/// `((col + o_x) / W, (row + o_y) / H)`, size `s`. Errors with the offending
/// term's name if any term is not finite.
pub fn total_loss(
    out: &HeadOutput,
    targets: &[Targets],
    gts: &[BoundingBox],
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let (b, _, h, w) = out.c.dims4()?;
    if targets.len() != b || gts.len() != b {
        bail!(
            Input,
            "batch of {b} maps with {} targets and {} boxes",
            targets.len(),
            gts.len()
        );
    }
    if gts.iter().any(|g| g.unit != Unit::Normalized) {
        bail!(Unit, "loss targets must be NORMALIZED boxes");
    }
    let dev = out.c.device();
    let dt = out.c.dtype();
    let mut cells = Vec::with_capacity(b);
    let mut origin = Vec::with_capacity(2 * b);
    let mut heat = Vec::with_capacity(b * h * w);
    let mut gt_flat = Vec::with_capacity(4 * b);
    for (t, g) in targets.iter().zip(gts) {
        if (t.h, t.w) != (h, w) {
            bail!(
                Shape,
                "targets for a {}x{} grid, maps are {h}x{w}",
                t.h,
                t.w
            );
        }
        let (row, col) = t.cell;
        cells.push((row * w + col) as u32);
        origin.push(col as f64 / w as f64);
        origin.push(row as f64 / h as f64);
        heat.extend_from_slice(&t.heatmap);
        gt_flat.extend_from_slice(&g.as_cxcywh());
    }
    let cells = Tensor::from_vec(cells, b, dev)?;
    let origin = Tensor::from_vec(origin, (b, 2), dev)?.to_dtype(dt)?;
    let inv = Tensor::new(&[1.0 / w as f64, 1.0 / h as f64], dev)?
        .to_dtype(dt)?
        .reshape((1, 2))?;
    let heat = Tensor::from_vec(heat, (b, h * w), dev)?.to_dtype(dt)?;
    let gt = Tensor::from_vec(gt_flat, (b, 4), dev)?.to_dtype(dt)?;

    let center = (origin + gather_cells(&out.o, &cells)?.broadcast_mul(&inv)?)?;
    let size = gather_cells(&out.s, &cells)?;
    let pred = Tensor::cat(&[&center, &size], D::Minus1)?;

    let l1 = (&pred - &gt)?.abs()?.mean_all()?;
    let giou = (1.0 - giou_tensor(&pred, &gt)?)?.mean_all()?;
    let focal = focal_loss(&out.c, &heat)?;
    let total = (((&l1 * weights.l1)? + (&giou * weights.giou)?)? + (&focal * weights.focal)?)?;

    let parts = LossBreakdown {
        total: scalar(&total)?,
        l1: scalar(&l1)?,
        giou: scalar(&giou)?,
        focal: scalar(&focal)?,
    };
    for (term, value) in [
        ("l1", parts.l1),
        ("giou", parts.giou),
        ("focal", parts.focal),
    ] {
        if !value.is_finite() {
            return Err(GladError::NanLoss {
                term: term.to_string(),
                value,
            });
        }
    }
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{giou, localization_loss};
    use crate::gradcheck::check_gradient;
    use crate::head::encode_targets;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perfect_output(gt: &BoundingBox, grid: usize) -> (HeadOutput, Targets) {
        let t = encode_targets(gt, (grid, grid)).unwrap();
        let n = grid * grid;
        let mut o = vec![0.0; 2 * n];
        let mut s = vec![0.0; 2 * n];
        let k = t.cell.0 * grid + t.cell.1;
        o[k] = t.offset.0;
        o[n + k] = t.offset.1;
        s[k] = t.size.0;
        s[n + k] = t.size.1;
        let dev = Device::Cpu;
        let out = HeadOutput {
            c: Tensor::from_vec(t.heatmap.clone(), (1, 1, grid, grid), &dev).unwrap(),
            o: Tensor::from_vec(o, (1, 2, grid, grid), &dev).unwrap(),
            s: Tensor::from_vec(s, (1, 2, grid, grid), &dev).unwrap(),
        };
        (out, t)
    }

    #[test]
    fn perfect_maps_have_zero_box_terms() {
        let gt = BoundingBox::cxcywh(0.4, 0.55, 0.2, 0.3, Unit::Normalized);
        let (out, t) = perfect_output(&gt, 8);
        let (_, parts) = total_loss(&out, &[t], &[gt], &LossWeights::default()).unwrap();
        assert!(parts.l1.abs() < 1e-12, "{parts:?}");
        assert!(parts.giou.abs() < 1e-12, "{parts:?}");
        assert!(parts.focal > 0.0 && parts.focal.is_finite());
    }

    #[test]
    fn box_terms_match_the_host_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let gt = BoundingBox::cxcywh(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                Unit::Normalized,
            );
            let (mut out, t) = perfect_output(&gt, 4);
            let noise = |shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng| {
                let n = shape.0 * shape.1 * shape.2 * shape.3;
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.05..0.05)).collect();
                Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
            };
            out.o = (&out.o + noise((1, 2, 4, 4), &mut rng)).unwrap();
            out.s = (&out.s + noise((1, 2, 4, 4), &mut rng)).unwrap();
            let maps = out.maps(0).unwrap();
            let pred = maps.box_at(t.cell.0, t.cell.1);
            let w = LossWeights::default();
            let (_, parts) = total_loss(&out, &[t], &[gt], &w).unwrap();
            let host = localization_loss(&pred, &gt, w.l1, w.giou).unwrap();
            assert!((w.l1 * parts.l1 + w.giou * parts.giou - host).abs() < 1e-12);
            assert!((1.0 - parts.giou - giou(&pred, &gt).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_is_reported_by_term() {
        let gt = BoundingBox::cxcywh(0.5, 0.5, 0.2, 0.2, Unit::Normalized);
        let (mut out, t) = perfect_output(&gt, 4);
        out.s = (&out.s * f64::NAN).unwrap();
        match total_loss(&out, &[t], &[gt], &LossWeights::default()) {
            Err(GladError::NanLoss { term, .. }) => assert_eq!(term, "l1"),
            other => panic!("expected a NaN-loss error, got {other:?}"),
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dev = Device::Cpu;
        let gt = BoundingBox::cxcywh(0.4, 0.6, 0.3, 0.25, Unit::Normalized);
        let t = encode_targets(&gt, (4, 4)).unwrap();
        // one packed input so a single check covers all three maps
        let mut v: Vec<f64> = (0..16).map(|_| rng.random_range(0.05..0.95)).collect();
        v.extend((0..32).map(|_| rng.random_range(0.1..0.9)));
        v.extend((0..32).map(|_| rng.random_range(0.1..0.5)));
        let x = Tensor::from_vec(v, 80, &dev).unwrap();
        let f = |x: &Tensor| -> Result<Tensor> {
            let out = HeadOutput {
                c: x.narrow(0, 0, 16)?.reshape((1, 1, 4, 4))?,
                o: x.narrow(0, 16, 32)?.reshape((1, 2, 4, 4))?,
                s: x.narrow(0, 48, 32)?.reshape((1, 2, 4, 4))?,
            };
            Ok(total_loss(&out, std::slice::from_ref(&t), &[gt], &LossWeights::default())?.0)
        };
        let r = check_gradient(&x, 1e-6, 80, 1e-6, f).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
