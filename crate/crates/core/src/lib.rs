//! Analytic articulation of a skinned body model from sparse 3D keypoints.
//!
//! The pipeline estimates per-keypoint rotations from observed positions,
//! converts them to local joint rotations, strips the unobservable twist of
//! single-child joints, and fits a global scale and translation. An optional
//! Adam refinement then minimizes reprojection, 3D and prior losses.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod articulate;
pub mod error;
pub mod geom3d;
pub mod harness;
pub mod io;
pub mod model;
pub mod refine;

pub use error::{Error, ErrorClass, Result};
