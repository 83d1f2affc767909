//! Self-supervised stereo matching with pseudo-stereo inputs.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: a small reverse-mode differentiation engine.
//! - [`data`]: images, disparity fields, PFM/PNG I/O and a synthetic scene
//!   generator with exact ground truth.
//! - [`render`]: forward (scatter) rendering of pseudo-images with a
//!   z-buffer, hole filling and occlusion masks.
//! - [`loss`]: backward warping, SSIM + L1 photometric error, edge-aware
//!   smoothness and the ramped total loss.
//! - [`matcher`]: disparity estimators (a per-sample direct field and a
//!   tiny cost-volume network).
//! - [`trainer`]: the baseline, pseudo-stereo and fully pseudo-stereo
//!   training strategies with Adam and cosine annealing.
//! - [`eval`]: EPE / D1 / bad-n metrics and the ablation runner.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod loss;
pub mod matcher;
pub mod render;
pub mod trainer;

pub use data::{DisparityField, Image, OcclusionMask, SceneConfig, SceneSample};
pub use error::{Error, Result};
pub use eval::MetricReport;
pub use loss::{LossBreakdown, LossConfig};
pub use matcher::{EstimatorKind, EstimatorParams};
pub use render::RenderResult;
pub use trainer::{Strategy, TrainConfig, TrainState};
