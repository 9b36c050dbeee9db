//! Parametric skinned body model: kinematic tree, forward kinematics, linear
//! blend skinning with shape blend directions, and the keypoint regressor.

mod file;
mod skinned;
mod synthetic;
mod tree;

pub use file::{load_model, model_from_json, model_to_json, save_model};
pub use skinned::{
    forward_kinematics, regress_keypoints, skin, JointTransform, Pose, Shape, SkinnedModel,
    ROW_SUM_TOL, SHAPE_DIM,
};
pub use synthetic::{make_synthetic_model, EndSite, JointSpec, JointSpecEntry, KeypointSite, KeypointSpecEntry};
pub use tree::{JointDef, KeypointDef, KinematicTree};
