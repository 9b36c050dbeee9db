//! Rotations, rigid and similarity alignment, and pinhole projection.

mod align;
mod camera;
mod rotation;

pub use align::{
    fit_scale_translation, procrustes_align, weighted_kabsch, weighted_rotation_fit, Similarity,
};
pub use camera::{perspective_project, CameraIntrinsics, MIN_DEPTH};
pub use rotation::{
    axis_angle_between, compose, inverse, perpendicular_axis, rodrigues_rotate,
    swing_twist_decompose, Rotation, Vec3, DEGENERATE_NORM,
};
