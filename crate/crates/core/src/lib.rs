//! Multi-view consistent instance segmentation lifted into a Gaussian splat
//! field.
//!
//! The pipeline has two halves:
//!
//! * [`association`] turns per-frame instance masks with arbitrary IDs into
//!   globally consistent masks by matching masks between frames through
//!   pointmap (per-pixel 3D point) correspondences, and accumulates a labeled
//!   point cloud.
//! * [`render`] optimizes a [`field::GaussianField`] initialized from that
//!   cloud, with cross-entropy supervision on rendered identity features and
//!   on the splats themselves, plus a local-plane regularizer from
//!   [`plane`] that keeps splats on the surfaces of their own class.
//!
//! [`synth`] generates analytic scenes with exact ground truth, [`eval`]
//! holds the metrics, and [`io`] the on-disk formats.

pub mod assignment;
pub mod association;
pub mod config;
mod error;
pub mod eval;
pub mod field;
pub mod io;
pub mod pipeline;
pub mod plane;
pub mod render;
pub mod spatial;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{Image, InstanceId, LabeledMaskSet, Pointmap, SegmentedPointCloud, Vec3};
