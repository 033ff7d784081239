//! Saliency-guided zoom augmentation and decoupled supervised contrastive
//! learning for small-lesion image classification.
//!
//! The crate is organized bottom-up:
//!
//! - [`ndtensor`]: dense tensors and a reverse-mode tape (f32 and f64).
//! - [`resampler`]: bilinear backward-mapping resampling over sampling grids.
//! - [`saliency`]: feature maps to saliency maps to non-uniform sampling grids.
//! - [`losses`]: cross-entropy, supervised contrastive and decoupled losses.
//! - [`nets`]: backbones, projector, classifier and their parameters.
//! - [`data`]: synthetic lesion images, PNG folders, stratified folds.
//! - [`trainer`]: two-stage optimization, checkpoints and run logs.
//! - [`metrics`]: confusion matrices, kappa, similarity statistics, timing.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod ndtensor;
pub mod nets;
pub mod resampler;
pub mod saliency;
pub mod trainer;

pub use error::{Error, Result};
pub use ndtensor::{Graph, Real, Tensor, Var};
