//! Two-stage stenosis detection toolkit for X-ray angiography sequences.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`geometry`]: boxes, IoU, pyramid anchors, anchor matching and the
//!   center/log-size regression parameterization.
//! - [`losses`]: focal loss, smooth-L1 and the combined detection loss with
//!   analytic gradients.
//! - [`inference`]: thresholding, decoding and greedy non-maximum suppression.
//! - [`metrics`]: the detection evaluation protocol and classification metrics.
//! - [`tracker`]: a discriminative correlation-filter tracker used to propagate
//!   reference-frame boxes through a sequence.
//! - [`toynet`]: small from-scratch CNNs (view classifier and pyramid detector),
//!   their training schedules and Grad-CAM.
//! - [`data`]: sequence manifests, synthetic angiography generation,
//!   augmentation, downscaling and stratified k-fold splitting.

pub mod data;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod toynet;
pub mod tracker;

pub use error::{Error, Result};
pub use geometry::{AnchorConfig, AnchorGrid, BBox, RegressionTarget};
pub use inference::{Detection, NmsParams};
