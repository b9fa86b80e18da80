//! Frame-by-frame inference. Fusion runs once at initialization; every later
//! frame only encodes a search crop and runs the decoders and the head.

use std::sync::Arc;
use std::time::Instant;

use crate::datasets::SequenceRecord;
use crate::encoders::TokenGrid;
use crate::error::{bail, Result};
use crate::fusion::Fused;
use crate::geometry::{
    crop_region, map_box_to_frame_unclipped, BoundingBox, BoxFormat, CropMapping, Unit,
};
use crate::head::{apply_hanning, ScoreMaps};
use crate::imaging::Image;
use crate::model::GladModel;

/// Predicted sizes below this many pixels are treated as a collapse.
pub const MIN_BOX_SIDE: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct TrackerState {
    pub fused: Fused,
    pub template_tokens: TokenGrid,
    pub last_box: BoundingBox,
    pub frame_index: usize,
    pub frame_size: (u32, u32),
}

#[derive(Debug, Clone)]
pub struct Tracker {
    model: Arc<GladModel>,
    hann_weight: f64,
}

impl Tracker {
    pub fn new(model: Arc<GladModel>) -> Self {
        let hann_weight = model.config().head.hann_weight;
        Self { model, hann_weight }
    }

    pub fn with_hann_weight(mut self, weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            bail!(Config, "hann weight {weight} outside [0, 1]");
        }
        self.hann_weight = weight;
        Ok(self)
    }

    pub fn model(&self) -> &Arc<GladModel> {
        &self.model
    }

    pub fn init(&self, frame: &Image, box0: &BoundingBox, text: &str) -> Result<TrackerState> {
        if box0.unit != Unit::Pixel {
            bail!(Unit, "initial box must be in pixels");
        }
        let (fw, fh) = (frame.width(), frame.height());
        if box0.area() <= 0.0 || !box0.is_inside(fw as f64, fh as f64) {
            bail!(
                Input,
                "initial box {:?} is not a positive-area box inside the {fw}x{fh} frame",
                box0.as_xywh()
            );
        }
        let cfg = self.model.config();
        let (template, _) = crop_region(
            frame,
            box0,
            cfg.crop.template_factor,
            cfg.encoder.template_size,
        )?;
        let template_tokens = self.model.encode_images(&[&template])?.detach();
        let fused = self.model.condition(&[&template], &[text])?.detach();
        Ok(TrackerState {
            fused,
            template_tokens,
            last_box: box0.to_format(BoxFormat::XywhTopLeft),
            frame_index: 0,
            frame_size: (fw, fh),
        })
    }

    /// Raw score maps for the search crop around the current box.
    pub fn score(&self, state: &TrackerState, frame: &Image) -> Result<(ScoreMaps, CropMapping)> {
        let cfg = self.model.config();
        let (search, mapping) = crop_region(
            frame,
            &state.last_box,
            cfg.crop.search_factor,
            cfg.encoder.search_size,
        )?;
        let search_tokens = self.model.encode_images(&[&search])?;
        let out =
            self.model
                .predict(&state.template_tokens, &search_tokens, &state.fused, false)?;
        Ok((out.maps(0)?, mapping))
    }

    pub fn track(&self, state: &mut TrackerState, frame: &Image) -> Result<BoundingBox> {
        let (fw, fh) = (frame.width() as f64, frame.height() as f64);
        let (maps, mapping) = self.score(state, frame)?;
        let penalized = apply_hanning(&maps.c, maps.h, maps.w, self.hann_weight)?;
        let [cx, cy, w, h] = maps.decode_with(&penalized).as_cxcywh();
        let side = mapping.crop_size as f64;
        let in_crop = BoundingBox::cxcywh(cx * side, cy * side, w * side, h * side, Unit::Pixel);
        let mut pred = map_box_to_frame_unclipped(&in_crop, &mapping);
        if pred.width() < MIN_BOX_SIDE || pred.height() < MIN_BOX_SIDE {
            let (pcx, pcy) = pred.center();
            pred = BoundingBox::cxcywh(
                pcx,
                pcy,
                state.last_box.width(),
                state.last_box.height(),
                Unit::Pixel,
            );
        }
        let next = keep_in_frame(&pred, fw, fh);
        state.last_box = next;
        state.frame_index += 1;
        Ok(next)
    }
}

/// Clips to the frame; a box that would collapse is slid back inside instead.
fn keep_in_frame(b: &BoundingBox, fw: f64, fh: f64) -> BoundingBox {
    let clipped = b.clip(fw, fh);
    if clipped.width() >= 1.0 && clipped.height() >= 1.0 {
        return clipped.to_format(BoxFormat::XywhTopLeft);
    }
    let w = b.width().clamp(1.0, fw);
    let h = b.height().clamp(1.0, fh);
    let [x, y, _, _] = b.as_xywh();
    BoundingBox::xywh(
        x.clamp(0.0, fw - w),
        y.clamp(0.0, fh - h),
        w,
        h,
        Unit::Pixel,
    )
}

/// Boxes for every frame and the tracking speed.
#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub boxes: Vec<BoundingBox>,
    /// Frames per second over `track` calls only; 0 for a single-frame sequence.
    pub fps: f64,
}

pub fn run_sequence(tracker: &Tracker, seq: &SequenceRecord) -> Result<SequenceRun> {
    if seq.is_empty() {
        bail!(Input, "sequence {} has no frames", seq.name);
    }
    let box0 = seq.first_box()?;
    let frame0 = seq.frame(0)?;
    let mut state = tracker.init(&frame0, &box0, &seq.text)?;
    let mut boxes = Vec::with_capacity(seq.len());
    boxes.push(box0.to_format(BoxFormat::XywhTopLeft));
    let mut elapsed = 0.0;
    for i in 1..seq.len() {
        let frame = seq.frame(i)?;
        let start = Instant::now();
        boxes.push(tracker.track(&mut state, &frame)?);
        elapsed += start.elapsed().as_secs_f64();
    }
    let fps = if seq.len() > 1 && elapsed > 0.0 {
        (seq.len() - 1) as f64 / elapsed
    } else {
        0.0
    };
    Ok(SequenceRun { boxes, fps })
}
