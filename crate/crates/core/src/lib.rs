//! Core of the Breakable Machine classroom game.
//!
//! - [`nn`], [`model`], [`format`]: CNN inference over BMNet model files.
//! - [`cam`]: class activation maps and heatmap rendering.
//! - [`session`]: the authoritative game state and its purge lifecycle.
//! - [`protocol`]: the JSON wire protocol spoken over the realtime channel.

pub mod cam;
pub mod error;
pub mod format;
pub mod model;
pub mod nn;
pub mod protocol;
pub mod resample;
pub mod session;
pub mod tensor;
pub mod testkit;

pub use cam::{compute_cam, normalize_cam, per_position_scores, upsample_bilinear, CamGrid, Heatmap, PositionScores};
pub use error::NnError;
pub use format::{decode_model, encode_model};
pub use model::{Conv2d, Layer, Model};
pub use nn::{forward, preprocess, softmax, ClassificationResult};
pub use tensor::Tensor;
