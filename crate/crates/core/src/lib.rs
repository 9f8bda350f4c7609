//! Dual-gap unsupervised domain adaptation for object detection.
//!
//! The domain gap between clear-weather training images and adverse-weather
//! deployment images is treated as two separate gaps. A *style* gap is closed
//! by adversarially aligning attention-gated channel statistics of the
//! backbone's last feature map; a *weather* gap is closed by a contrastive
//! loss between clean and weather-corrupted views of the same object.
//!
//! Everything runs on a self-generated synthetic benchmark (see [`scenegen`])
//! with a small anchor-free detector (see [`detector`]) trained by a
//! hand-written reverse-mode tape (see [`autograd`]).

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod boxes;
pub mod checkpoint;
pub mod corruption;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod nn;
pub mod pixels;
pub mod scenegen;
pub mod seed;
pub mod style_align;
pub mod tensor;
pub mod trainer;
pub mod weather_contrast;

pub use boxes::{iou, BoundingBox};
pub use error::{Error, Result};
pub use pixels::PixelGrid;
pub use tensor::Tensor;
