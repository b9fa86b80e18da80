//! Procedural moving-shape sequences with captions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::SequenceRecord;
use crate::geometry::{BoundingBox, Unit};
use crate::imaging::Image;
use crate::vocab::{COLORS, SHAPES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneConfig {
    pub canvas: u32,
    pub frames: usize,
    /// Upper bound on distractors; each scene draws 1..=max (0 gives a lone target).
    pub max_distractors: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Maximum initial speed in pixels per frame.
    pub speed: f64,
    /// Standard deviation of the per-frame velocity perturbation.
    pub motion_noise: f64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            canvas: 128,
            frames: 40,
            max_distractors: 3,
            min_size: 12.0,
            max_size: 24.0,
            speed: 2.5,
            motion_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 4] = [
        Shape::Square,
        Shape::Circle,
        Shape::Triangle,
        Shape::Diamond,
    ];

    fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        SHAPES[self.index()].0
    }

    pub fn plural(self) -> &'static str {
        SHAPES[self.index()].1
    }

    /// Whether `(u, v)`, relative to the bounding box in `[-1, 1]^2`, lies inside.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            // apex at the top, base along the bottom edge
            Shape::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: usize,
    pub shape: Shape,
    pub size: f64,
    /// Center per frame.
    pub path: Vec<(f64, f64)>,
}

impl SceneObject {
    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    pub fn bbox(&self, frame: usize) -> BoundingBox {
        let (cx, cy) = self.path[frame];
        BoundingBox::cxcywh(cx, cy, self.size, self.size, Unit::Pixel)
    }
}

/// A fully determined scene; frames are rendered on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub cfg: SyntheticSceneConfig,
    pub background: ([f32; 3], [f32; 3]),
    pub target: SceneObject,
    pub distractors: Vec<SceneObject>,
    pub caption: String,
}

fn random_path<R: Rng>(rng: &mut R, cfg: &SyntheticSceneConfig, size: f64) -> Vec<(f64, f64)> {
    let c = cfg.canvas as f64;
    let lo = size / 2.0 + 1.0;
    let hi = c - size / 2.0 - 1.0;
    let mut p = (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = rng.random_range(0.3 * cfg.speed..=cfg.speed);
    let mut v = (speed * angle.cos(), speed * angle.sin());
    let noise = Normal::new(0.0, cfg.motion_noise.max(1e-12)).expect("valid std");
    let mut path = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        path.push(p);
        v.0 += noise.sample(rng);
        v.1 += noise.sample(rng);
        let s = (v.0 * v.0 + v.1 * v.1).sqrt();
        if s > 1.5 * cfg.speed {
            v = (v.0 * 1.5 * cfg.speed / s, v.1 * 1.5 * cfg.speed / s);
        }
        p = (p.0 + v.0, p.1 + v.1);
        // reflect off the walls
        if p.0 < lo || p.0 > hi {
            v.0 = -v.0;
            p.0 = p.0.clamp(lo, hi);
        }
        if p.1 < lo || p.1 > hi {
            v.1 = -v.1;
            p.1 = p.1.clamp(lo, hi);
        }
    }
    path
}

impl SyntheticScene {
    pub fn new(seed: u64, cfg: &SyntheticSceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dark = |rng: &mut ChaCha8Rng| -> [f32; 3] {
            [
                rng.random_range(0.02..0.3),
                rng.random_range(0.02..0.3),
                rng.random_range(0.02..0.3),
            ]
        };
        let background = (dark(&mut rng), dark(&mut rng));
        let size_of = |rng: &mut ChaCha8Rng| rng.random_range(cfg.min_size..=cfg.max_size).round();
        let t_color = rng.random_range(0..COLORS.len());
        let t_shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let t_size = size_of(&mut rng);
        let target = SceneObject {
            color: t_color,
            shape: t_shape,
            size: t_size,
            path: random_path(&mut rng, cfg, t_size),
        };
        let n = if cfg.max_distractors == 0 {
            0
        } else {
            rng.random_range(1..=cfg.max_distractors)
        };
        let d_color = (t_color + rng.random_range(1..COLORS.len())) % COLORS.len();
        let d_shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let distractors: Vec<SceneObject> = (0..n)
            .map(|_| {
                let size = size_of(&mut rng);
                SceneObject {
                    color: d_color,
                    shape: d_shape,
                    size,
                    path: random_path(&mut rng, cfg, size),
                }
            })
            .collect();
        let caption = if n == 0 {
            format!("the {} {} moving alone", COLORS[t_color].0, t_shape.name())
        } else {
            format!(
                "the {} {} moving among {} {}",
                COLORS[t_color].0,
                t_shape.name(),
                COLORS[d_color].0,
                d_shape.plural()
            )
        };
        Self {
            cfg: cfg.clone(),
            background,
            target,
            distractors,
            caption,
        }
    }

    pub fn len(&self) -> usize {
        self.cfg.frames
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.frames == 0
    }

    pub fn gt_box(&self, frame: usize) -> BoundingBox {
        self.target.bbox(frame)
    }

    /// Vertical background gradient, distractors, then the target on top;
    /// edges anti-aliased with 4x4 supersampling.
    pub fn render(&self, frame: usize) -> Image {
        let c = self.cfg.canvas;
        let (top, bottom) = self.background;
        let mut img = Image::from_fn(c, c, |_, y| {
            let t = y as f32 / (c - 1).max(1) as f32;
            image::Rgb([
                top[0] + (bottom[0] - top[0]) * t,
                top[1] + (bottom[1] - top[1]) * t,
                top[2] + (bottom[2] - top[2]) * t,
            ])
        });
        for obj in self.distractors.iter().chain(std::iter::once(&self.target)) {
            draw(&mut img, obj, frame);
        }
        img
    }

    pub fn to_record(&self, name: &str) -> SequenceRecord {
        SequenceRecord {
            name: name.to_string(),
            frame_paths: Vec::new(),
            frames: Some((0..self.len()).map(|i| self.render(i)).collect()),
            gt_boxes: (0..self.len()).map(|i| self.gt_box(i)).collect(),
            text: self.caption.clone(),
            attributes: Vec::new(),
        }
    }
}

fn draw(img: &mut Image, obj: &SceneObject, frame: usize) {
    const SS: usize = 4;
    let (cx, cy) = obj.path[frame];
    let half = obj.size / 2.0;
    let rgb = COLORS[obj.color].1;
    let x0 = (cx - half).floor().max(0.0) as u32;
    let y0 = (cy - half).floor().max(0.0) as u32;
    let x1 = ((cx + half).ceil() as u32).min(img.width());
    let y1 = ((cy + half).ceil() as u32).min(img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    if obj.shape.contains((px - cx) / half, (py - cy) / half) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let a = hits as f32 / (SS * SS) as f32;
                let p = img.get_pixel_mut(x, y);
                for (v, c) in p.0.iter_mut().zip(rgb) {
                    *v = *v * (1.0 - a) + c * a;
                }
            }
        }
    }
}

/// Renders a complete in-memory sequence.
pub fn make_synthetic_sequence(seed: u64, cfg: &SyntheticSceneConfig) -> SequenceRecord {
    SyntheticScene::new(seed, cfg).to_record(&format!("synth-{seed:06}"))
}
