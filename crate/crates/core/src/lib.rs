//! Generative language-assisted single-object tracking.
//!
//! A text-conditioned latent-diffusion U-Net fuses the first-frame template with
//! its caption; intermediate U-Net features are pooled and cross-attended by the
//! concatenated template/search tokens, and a center head predicts the box.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod semantics;
pub mod synthetic;
pub mod tracker;
pub mod training;
pub mod vocab;

pub use config::{FusionMode, ModelConfig};
pub use encoders::{TextFeatures, TokenGrid};
pub use error::{GladError, Result};
pub use geometry::{BoundingBox, BoxFormat, CropMapping, Unit};
pub use imaging::Image;
