//! Boxes, overlap measures, crop mappings and the box-level regression loss.

use serde::{Deserialize, Serialize};

use crate::error::{bail, GladError, Result};
use crate::imaging::{mean_color, sample_bilinear, Image};

/// Minimum side used when a predicted box collapses to zero area.
pub const GIOU_EPS: f64 = 1e-6;

/// Default regression weights of the localization loss.
pub const LAMBDA_L1: f64 = 5.0;
pub const LAMBDA_GIOU: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoxFormat {
    /// `(x, y, w, h)` with `(x, y)` the top-left corner.
    XywhTopLeft,
    /// `(cx, cy, w, h)`.
    Cxcywh,
    /// `(x1, y1, x2, y2)`.
    Xyxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    Pixel,
    Normalized,
}

/// Axis-aligned box.
///
/// Storage is always top-left `(x, y, w, h)`; `format` only selects how
/// [`BoundingBox::coords`] presents the values, so converting between formats
/// never touches the stored numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    pub format: BoxFormat,
    pub unit: Unit,
}

impl BoundingBox {
    pub fn try_new(coords: [f64; 4], format: BoxFormat, unit: Unit) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            bail!(Input, "non-finite box coordinates {coords:?}");
        }
        let (x, y, w, h) = match format {
            BoxFormat::XywhTopLeft => (coords[0], coords[1], coords[2], coords[3]),
            BoxFormat::Cxcywh => (
                coords[0] - coords[2] / 2.0,
                coords[1] - coords[3] / 2.0,
                coords[2],
                coords[3],
            ),
            BoxFormat::Xyxy => (
                coords[0],
                coords[1],
                coords[2] - coords[0],
                coords[3] - coords[1],
            ),
        };
        if w < 0.0 || h < 0.0 {
            bail!(Input, "negative box extent {coords:?} ({format:?})");
        }
        Ok(Self {
            x,
            y,
            w,
            h,
            format,
            unit,
        })
    }

    /// Panics on negative extents; use [`BoundingBox::try_new`] for untrusted input.
    pub fn xywh(x: f64, y: f64, w: f64, h: f64, unit: Unit) -> Self {
        Self::try_new([x, y, w, h], BoxFormat::XywhTopLeft, unit).expect("valid xywh box")
    }

    pub fn cxcywh(cx: f64, cy: f64, w: f64, h: f64, unit: Unit) -> Self {
        Self::try_new([cx, cy, w, h], BoxFormat::Cxcywh, unit).expect("valid cxcywh box")
    }

    pub fn xyxy(x1: f64, y1: f64, x2: f64, y2: f64, unit: Unit) -> Self {
        Self::try_new([x1, y1, x2, y2], BoxFormat::Xyxy, unit).expect("valid xyxy box")
    }

    pub fn to_format(self, format: BoxFormat) -> Self {
        Self { format, ..self }
    }

    /// Coordinates in this box's own format.
    pub fn coords(&self) -> [f64; 4] {
        match self.format {
            BoxFormat::XywhTopLeft => self.as_xywh(),
            BoxFormat::Cxcywh => self.as_cxcywh(),
            BoxFormat::Xyxy => self.as_xyxy(),
        }
    }

    pub fn as_xywh(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn as_cxcywh(&self) -> [f64; 4] {
        [self.x + self.w / 2.0, self.y + self.h / 2.0, self.w, self.h]
    }

    pub fn as_xyxy(&self) -> [f64; 4] {
        [self.x, self.y, self.x + self.w, self.y + self.h]
    }

    pub fn width(&self) -> f64 {
        self.w
    }

    pub fn height(&self) -> f64 {
        self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Divides by the frame size; the result is NORMALIZED and clipped to `[0, 1]`.
    pub fn normalize(&self, frame_w: f64, frame_h: f64) -> Result<Self> {
        if self.unit != Unit::Pixel {
            bail!(Unit, "normalize expects a PIXEL box");
        }
        let b = Self {
            x: self.x / frame_w,
            y: self.y / frame_h,
            w: self.w / frame_w,
            h: self.h / frame_h,
            format: self.format,
            unit: Unit::Normalized,
        };
        Ok(b.clip(1.0, 1.0))
    }

    pub fn denormalize(&self, frame_w: f64, frame_h: f64) -> Result<Self> {
        if self.unit != Unit::Normalized {
            bail!(Unit, "denormalize expects a NORMALIZED box");
        }
        Ok(Self {
            x: self.x * frame_w,
            y: self.y * frame_h,
            w: self.w * frame_w,
            h: self.h * frame_h,
            format: self.format,
            unit: Unit::Pixel,
        })
    }

    /// Intersects the box with `[0, max_x] x [0, max_y]`.
    pub fn clip(&self, max_x: f64, max_y: f64) -> Self {
        let [x1, y1, x2, y2] = self.as_xyxy();
        let x1 = x1.clamp(0.0, max_x);
        let y1 = y1.clamp(0.0, max_y);
        let x2 = x2.clamp(0.0, max_x);
        let y2 = y2.clamp(0.0, max_y);
        Self {
            x: x1,
            y: y1,
            w: (x2 - x1).max(0.0),
            h: (y2 - y1).max(0.0),
            format: self.format,
            unit: self.unit,
        }
    }

    pub fn is_inside(&self, max_x: f64, max_y: f64) -> bool {
        let [x1, y1, x2, y2] = self.as_xyxy();
        x1 >= 0.0 && y1 >= 0.0 && x2 <= max_x && y2 <= max_y
    }

    fn with_min_extent(&self, eps: f64) -> Self {
        let [cx, cy, w, h] = self.as_cxcywh();
        let (w, h) = (w.max(eps), h.max(eps));
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
            format: self.format,
            unit: self.unit,
        }
    }
}

fn same_unit(a: &BoundingBox, b: &BoundingBox) -> Result<()> {
    if a.unit != b.unit {
        bail!(Unit, "{:?} vs {:?}", a.unit, b.unit);
    }
    Ok(())
}

/// Overlap of two 1-D intervals; containment returns the inner length exactly.
fn overlap_1d(a0: f64, al: f64, b0: f64, bl: f64) -> f64 {
    let (a1, b1) = (a0 + al, b0 + bl);
    if a0 >= b0 && a1 <= b1 {
        al
    } else if b0 >= a0 && b1 <= a1 {
        bl
    } else {
        (a1.min(b1) - a0.max(b0)).max(0.0)
    }
}

fn intersection(a: &BoundingBox, b: &BoundingBox) -> f64 {
    overlap_1d(a.x, a.w, b.x, b.w) * overlap_1d(a.y, a.h, b.y, b.h)
}

fn span_1d(a0: f64, al: f64, b0: f64, bl: f64) -> f64 {
    let (a1, b1) = (a0 + al, b0 + bl);
    if a0 >= b0 && a1 <= b1 {
        bl
    } else if b0 >= a0 && b1 <= a1 {
        al
    } else {
        a1.max(b1) - a0.min(b0)
    }
}

fn hull_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    span_1d(a.x, a.w, b.x, b.w) * span_1d(a.y, a.h, b.y, b.h)
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    same_unit(a, b)?;
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    same_unit(a, b)?;
    if a.area() <= 0.0 && b.area() <= 0.0 {
        bail!(Degenerate, "giou of two zero-area boxes");
    }
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let hull = hull_area(a, b);
    if hull <= 0.0 {
        bail!(Degenerate, "zero-area enclosing box");
    }
    let iou = inter / union;
    Ok(iou - (hull - union) / hull)
}

/// `l1_weight * mean|pred - gt|` over CXCYWH coordinates plus
/// `giou_weight * (1 - giou)`. Both boxes must be NORMALIZED.
pub fn localization_loss(
    pred: &BoundingBox,
    gt: &BoundingBox,
    l1_weight: f64,
    giou_weight: f64,
) -> Result<f64> {
    if pred.unit != Unit::Normalized || gt.unit != Unit::Normalized {
        bail!(Unit, "localization loss needs NORMALIZED boxes");
    }
    let p = pred.as_cxcywh();
    let g = gt.as_cxcywh();
    let l1 = p
        .iter()
        .zip(g.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 4.0;
    let g_val = giou(&pred.with_min_extent(GIOU_EPS), gt)?;
    Ok(l1_weight * l1 + giou_weight * (1.0 - g_val))
}

/// Affine relation between a square crop and the frame it was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropMapping {
    /// Frame-pixel position of the crop center.
    pub source_center: (f64, f64),
    /// Frame pixels per crop pixel.
    pub scale: f64,
    pub crop_size: u32,
    pub frame_size: (u32, u32),
}

impl CropMapping {
    pub fn identity(frame_w: u32, frame_h: u32) -> Self {
        assert_eq!(frame_w, frame_h, "identity mapping needs a square frame");
        Self {
            source_center: (frame_w as f64 / 2.0, frame_h as f64 / 2.0),
            scale: 1.0,
            crop_size: frame_w,
            frame_size: (frame_w, frame_h),
        }
    }

    pub fn crop_to_frame_point(&self, x: f64, y: f64) -> (f64, f64) {
        let half = self.crop_size as f64 / 2.0;
        (
            self.source_center.0 + (x - half) * self.scale,
            self.source_center.1 + (y - half) * self.scale,
        )
    }

    pub fn frame_to_crop_point(&self, x: f64, y: f64) -> (f64, f64) {
        let half = self.crop_size as f64 / 2.0;
        (
            (x - self.source_center.0) / self.scale + half,
            (y - self.source_center.1) / self.scale + half,
        )
    }
}

/// Square crop centered on `anchor` with side `area_factor * sqrt(w * h)`,
/// resampled to `out_size`. Pixels outside the frame take the frame mean color.
pub fn crop_region(
    frame: &Image,
    anchor: &BoundingBox,
    area_factor: f64,
    out_size: u32,
) -> Result<(Image, CropMapping)> {
    if anchor.unit != Unit::Pixel {
        bail!(Unit, "crop anchor must be in PIXEL units");
    }
    if !(area_factor > 0.0) {
        bail!(Config, "area factor must be positive, got {area_factor}");
    }
    if anchor.area() <= 0.0 {
        bail!(Degenerate, "cannot crop around a zero-area anchor");
    }
    if out_size == 0 {
        bail!(Config, "crop output size must be positive");
    }
    let side = area_factor * anchor.area().sqrt();
    let mapping = CropMapping {
        source_center: anchor.center(),
        scale: side / out_size as f64,
        crop_size: out_size,
        frame_size: (frame.width(), frame.height()),
    };
    let fill = mean_color(frame);
    let mut out = Image::new(out_size, out_size);
    for (cx, cy, px) in out.enumerate_pixels_mut() {
        let (fx, fy) = mapping.crop_to_frame_point(cx as f64 + 0.5, cy as f64 + 0.5);
        px.0 = sample_bilinear(frame, fx, fy, fill);
    }
    Ok((out, mapping))
}

/// Crop-pixel box back to frame pixels, clipped to the frame.
pub fn map_box_to_frame(b: &BoundingBox, m: &CropMapping) -> BoundingBox {
    let mapped = map_box_to_frame_unclipped(b, m);
    mapped.clip(m.frame_size.0 as f64, m.frame_size.1 as f64)
}

pub fn map_box_to_frame_unclipped(b: &BoundingBox, m: &CropMapping) -> BoundingBox {
    let [x, y, w, h] = b.as_xywh();
    let (fx, fy) = m.crop_to_frame_point(x, y);
    BoundingBox {
        x: fx,
        y: fy,
        w: w * m.scale,
        h: h * m.scale,
        format: b.format,
        unit: Unit::Pixel,
    }
}

pub fn map_box_to_crop(b: &BoundingBox, m: &CropMapping) -> BoundingBox {
    let [x, y, w, h] = b.as_xywh();
    let (cx, cy) = m.frame_to_crop_point(x, y);
    BoundingBox {
        x: cx,
        y: cy,
        w: w / m.scale,
        h: h / m.scale,
        format: b.format,
        unit: Unit::Pixel,
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

impl TryFrom<&str> for BoxFormat {
    type Error = GladError;
    fn try_from(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xywh" | "xywh_topleft" => Ok(BoxFormat::XywhTopLeft),
            "cxcywh" => Ok(BoxFormat::Cxcywh),
            "xyxy" => Ok(BoxFormat::Xyxy),
            other => Err(GladError::Config(format!("unknown box format `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::blank;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn px(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::xywh(x, y, w, h, Unit::Pixel)
    }

    #[test]
    fn iou_examples() {
        let a = px(0.0, 0.0, 4.0, 4.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(
            iou(&px(0.0, 0.0, 1.0, 1.0), &px(2.0, 0.0, 1.0, 1.0)).unwrap(),
            0.0
        );
        assert_eq!(iou(&a, &px(1.0, 1.0, 2.0, 2.0)).unwrap(), 0.25);
    }

    #[test]
    fn giou_examples() {
        let a = px(0.0, 0.0, 4.0, 4.0);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        let g = giou(&px(0.0, 0.0, 1.0, 1.0), &px(2.0, 0.0, 1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(g, -1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(giou(&a, &px(1.0, 1.0, 2.0, 2.0)).unwrap(), 0.25);
    }

    #[test]
    fn unit_mismatch_is_rejected() {
        let a = px(0.0, 0.0, 1.0, 1.0);
        let b = BoundingBox::xywh(0.0, 0.0, 0.5, 0.5, Unit::Normalized);
        assert!(matches!(iou(&a, &b), Err(GladError::Unit(_))));
        assert!(matches!(giou(&a, &b), Err(GladError::Unit(_))));
    }

    #[test]
    fn giou_of_two_points_is_degenerate() {
        let a = px(1.0, 1.0, 0.0, 0.0);
        let b = px(3.0, 1.0, 0.0, 0.0);
        assert!(matches!(giou(&a, &b), Err(GladError::Degenerate(_))));
    }

    #[test]
    fn localization_loss_examples() {
        let gt = BoundingBox::cxcywh(0.5, 0.5, 0.4, 0.4, Unit::Normalized);
        assert_eq!(
            localization_loss(&gt, &gt, LAMBDA_L1, LAMBDA_GIOU).unwrap(),
            0.0
        );
        let pred = BoundingBox::cxcywh(0.5, 0.5, 0.2, 0.2, Unit::Normalized);
        let l = localization_loss(&pred, &gt, LAMBDA_L1, LAMBDA_GIOU).unwrap();
        assert_abs_diff_eq!(l, 2.0, epsilon = 1e-12);
        let pixel = px(0.0, 0.0, 1.0, 1.0);
        assert!(matches!(
            localization_loss(&pixel, &pixel, 5.0, 2.0),
            Err(GladError::Unit(_))
        ));
    }

    #[test]
    fn zero_area_prediction_gets_finite_loss() {
        let gt = BoundingBox::cxcywh(0.5, 0.5, 0.4, 0.4, Unit::Normalized);
        let pred = BoundingBox::cxcywh(0.5, 0.5, 0.0, 0.0, Unit::Normalized);
        let l = localization_loss(&pred, &gt, 5.0, 2.0).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn giou_decreases_with_separation() {
        let a = px(0.0, 0.0, 2.0, 2.0);
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let d = k as f64 * 0.7;
            let g = giou(&a, &px(d, 0.0, 2.0, 2.0)).unwrap();
            assert!(g < prev || (g == prev && k == 0));
            prev = g;
        }
        let far = giou(&a, &px(1e9, 0.0, 2.0, 2.0)).unwrap();
        assert!(far < -0.999_999);
    }

    #[test]
    fn uniform_frame_gives_uniform_crop() {
        let frame = blank(100, 80, [0.2, 0.3, 0.4]);
        let anchor = px(40.0, 30.0, 20.0, 20.0);
        let (crop, m) = crop_region(&frame, &anchor, 2.0, 32).unwrap();
        assert_eq!(m.source_center, (50.0, 40.0));
        assert!(crop.pixels().all(|p| (p.0[0] - 0.2).abs() < 1e-6
            && (p.0[1] - 0.3).abs() < 1e-6
            && (p.0[2] - 0.4).abs() < 1e-6));
    }

    #[test]
    fn crop_rejects_degenerate_anchor() {
        let frame = blank(10, 10, [0.0; 3]);
        assert!(matches!(
            crop_region(&frame, &px(1.0, 1.0, 0.0, 3.0), 2.0, 8),
            Err(GladError::Degenerate(_))
        ));
    }

    #[test]
    fn identity_and_scaling_mappings() {
        let m = CropMapping::identity(64, 64);
        let b = px(3.0, 4.0, 10.0, 12.0);
        assert_eq!(map_box_to_frame(&b, &m).as_xywh(), b.as_xywh());
        let m2 = CropMapping {
            scale: 2.0,
            ..CropMapping::identity(64, 64)
        };
        let mapped = map_box_to_frame_unclipped(&px(32.0, 32.0, 5.0, 6.0), &m2);
        assert_eq!(mapped.width(), 10.0);
        assert_eq!(mapped.height(), 12.0);
    }

    #[test]
    fn format_tags_present_same_box() {
        let b = BoundingBox::xyxy(1.0, 2.0, 5.0, 10.0, Unit::Pixel);
        assert_eq!(b.as_xywh(), [1.0, 2.0, 4.0, 8.0]);
        assert_eq!(
            b.to_format(BoxFormat::Cxcywh).coords(),
            [3.0, 6.0, 4.0, 8.0]
        );
        assert_eq!(b.coords(), [1.0, 2.0, 5.0, 10.0]);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.01..50.0f64, 0.01..50.0f64)
            .prop_map(|(x, y, w, h)| px(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn giou_bounded_by_iou(a in arb_box(), b in arb_box()) {
            let g = giou(&a, &b).unwrap();
            prop_assert!(g <= iou(&a, &b).unwrap() + 1e-12);
            prop_assert!(g > -1.0 && g <= 1.0);
        }

        #[test]
        fn format_round_trip_is_exact(a in arb_box(), f in 0..3usize, g in 0..3usize) {
            let fmts = [BoxFormat::XywhTopLeft, BoxFormat::Cxcywh, BoxFormat::Xyxy];
            let back = a.to_format(fmts[f]).to_format(fmts[g]).to_format(BoxFormat::XywhTopLeft);
            prop_assert_eq!(back, a);
        }

        #[test]
        fn unit_round_trip(a in arb_box()) {
            let n = a.normalize(200.0, 200.0).unwrap();
            let back = n.denormalize(200.0, 200.0).unwrap();
            for (u, v) in back.as_xywh().iter().zip(a.as_xywh().iter()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }
}
