use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::tree::KinematicTree;
use crate::error::{Error, Result};
use crate::geom3d::{Rotation, Vec3};

/// Number of shape blend coefficients.
pub const SHAPE_DIM: usize = 10;

/// Tolerance for the row-sum invariants of skin weights and the regressor.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Per-joint local rotations, indexed by model joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose(Vec<Rotation>);

impl Pose {
    pub fn identity(joints: usize) -> Self {
        Self(vec![Rotation::identity(); joints])
    }

    pub fn from_rotations(rotations: Vec<Rotation>) -> Self {
        Self(rotations)
    }

    pub fn from_axis_angles(v: &[Vec3]) -> Self {
        Self(v.iter().map(Rotation::from_axis_angle).collect())
    }

    pub fn axis_angles(&self) -> Vec<Vec3> {
        self.0.iter().map(Rotation::to_axis_angle).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn rotations(&self) -> &[Rotation] {
        &self.0
    }

    pub fn rotations_mut(&mut self) -> &mut [Rotation] {
        &mut self.0
    }

    pub fn get(&self, j: usize) -> Rotation {
        self.0[j]
    }

    pub fn set(&mut self, j: usize, r: Rotation) {
        self.0[j] = r;
    }
}

/// Shape blend coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape(pub [f64; SHAPE_DIM]);

impl Shape {
    pub fn zero() -> Self {
        Self([0.0; SHAPE_DIM])
    }

    pub fn unit(i: usize) -> Self {
        let mut b = [0.0; SHAPE_DIM];
        b[i] = 1.0;
        Self(b)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Global transform of a joint: rest point `p` maps to
/// `rotation · (p − rest_joint) + position`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTransform {
    pub rotation: Rotation,
    pub position: Vec3,
}

/// Global joint transforms for `pose`, parents before children.
pub fn forward_kinematics(tree: &KinematicTree, pose: &Pose) -> Result<Vec<JointTransform>> {
    let n = tree.joint_count();
    if pose.len() != n {
        return Err(Error::size("pose", n, pose.len()));
    }
    let mut out: Vec<JointTransform> = Vec::with_capacity(n);
    for j in 0..n {
        let local = pose.get(j);
        let t = match tree.joint_parent(j) {
            None => JointTransform {
                rotation: local,
                position: tree.rest_joint(j),
            },
            Some(p) => {
                let parent = out[p];
                // accumulate the offset from rest so the rest pose is exact
                let bone = tree.rest_joint(j) - tree.rest_joint(p);
                let offset = (parent.position - tree.rest_joint(p)) + (parent.rotation.rotate(&bone) - bone);
                JointTransform {
                    rotation: parent.rotation * local,
                    position: tree.rest_joint(j) + offset,
                }
            }
        };
        out.push(t);
    }
    Ok(out)
}

/// Skinned body model: rest mesh, linear blend skin weights, linear shape
/// blend directions and a sparse vertex→keypoint regressor.
#[derive(Debug, Clone)]
pub struct SkinnedModel {
    pub(crate) tree: KinematicTree,
    pub(crate) vertices: Vec<Vec3>,
    pub(crate) faces: Vec<[usize; 3]>,
    /// Per vertex: `(joint, weight)` with weights summing to one.
    pub(crate) skin: Vec<Vec<(usize, f64)>>,
    /// Per vertex: displacement per unit of each shape coefficient.
    pub(crate) shape_dirs: Vec<[Vec3; SHAPE_DIM]>,
    /// Per keypoint: `(vertex, weight)` with weights summing to one.
    pub(crate) regressor: Vec<Vec<(usize, f64)>>,
    pub(crate) eval_keypoints: Vec<usize>,
    rest_keypoints: Vec<Vec3>,
    regressor_support: Vec<usize>,
}

impl SkinnedModel {
    /// Assembles a model and checks every structural invariant.
    pub fn new(
        tree: KinematicTree,
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        skin: Vec<Vec<(usize, f64)>>,
        shape_dirs: Vec<[Vec3; SHAPE_DIM]>,
        regressor: Vec<Vec<(usize, f64)>>,
        eval_keypoints: Vec<usize>,
    ) -> Result<Self> {
        let v = vertices.len();
        if v == 0 {
            return Err(Error::InvalidSpec("model has no vertices".into()));
        }
        if vertices.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidSpec("non-finite vertex".into()));
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|i| *i >= v)) {
            return Err(Error::InvalidSpec(format!("face {f:?} references a missing vertex")));
        }
        if skin.len() != v {
            return Err(Error::size("skin weight rows", v, skin.len()));
        }
        if shape_dirs.len() != v {
            return Err(Error::size("shape direction rows", v, shape_dirs.len()));
        }
        let j = tree.joint_count();
        for (i, row) in skin.iter().enumerate() {
            check_row(row, j, &format!("skin weights of vertex {i}"))?;
        }
        let k = tree.keypoint_count();
        if regressor.len() != k {
            return Err(Error::size("regressor rows", k, regressor.len()));
        }
        for (i, row) in regressor.iter().enumerate() {
            check_row(row, v, &format!("regressor row {i}"))?;
        }
        if let Some(e) = eval_keypoints.iter().find(|e| **e >= k) {
            return Err(Error::InvalidSpec(format!("evaluation keypoint {e} out of range")));
        }
        let rest_keypoints = regress_rows(&regressor, &vertices);
        let mut regressor_support: Vec<usize> =
            regressor.iter().flat_map(|r| r.iter().map(|(v, _)| *v)).collect();
        regressor_support.sort_unstable();
        regressor_support.dedup();
        Ok(Self {
            tree,
            vertices,
            faces,
            skin,
            shape_dirs,
            regressor,
            eval_keypoints,
            rest_keypoints,
            regressor_support,
        })
    }

    pub fn tree(&self) -> &KinematicTree {
        &self.tree
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn rest_vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn skin_weights(&self, v: usize) -> &[(usize, f64)] {
        &self.skin[v]
    }

    pub fn shape_dirs(&self, v: usize) -> &[Vec3; SHAPE_DIM] {
        &self.shape_dirs[v]
    }

    pub fn regressor_row(&self, k: usize) -> &[(usize, f64)] {
        &self.regressor[k]
    }

    /// Keypoint positions of the rest mesh (`W · M̄`).
    pub fn rest_keypoints(&self) -> &[Vec3] {
        &self.rest_keypoints
    }

    /// Keypoints used by the evaluation metrics.
    pub fn eval_keypoints(&self) -> &[usize] {
        &self.eval_keypoints
    }

    /// Vertices that feed at least one keypoint, sorted.
    pub fn regressor_support(&self) -> &[usize] {
        &self.regressor_support
    }

    pub(crate) fn shaped_vertex(&self, v: usize, shape: &Shape) -> Vec3 {
        let dirs = &self.shape_dirs[v];
        let mut p = self.vertices[v];
        for (b, d) in shape.0.iter().zip(dirs) {
            if *b != 0.0 {
                p += d * *b;
            }
        }
        p
    }

    /// Skins a single vertex given precomputed joint transforms and their
    /// rotation matrices.
    pub(crate) fn skin_vertex(
        &self,
        v: usize,
        shape: &Shape,
        transforms: &[JointTransform],
        mats: &[Matrix3<f64>],
    ) -> Vec3 {
        let p = self.shaped_vertex(v, shape);
        let mut out = Vec3::zeros();
        for (j, w) in &self.skin[v] {
            out += (mats[*j] * (p - self.tree.rest_joint(*j)) + transforms[*j].position) * *w;
        }
        out
    }

    fn check_inputs(&self, pose: &Pose, shape: &Shape) -> Result<()> {
        if pose.len() != self.tree.joint_count() {
            return Err(Error::size("pose", self.tree.joint_count(), pose.len()));
        }
        if !shape.is_finite() {
            return Err(Error::NonFinite("shape coefficients".into()));
        }
        Ok(())
    }

    /// Posed and shaped mesh vertices.
    pub fn skin(&self, pose: &Pose, shape: &Shape) -> Result<Vec<Vec3>> {
        self.check_inputs(pose, shape)?;
        let transforms = forward_kinematics(&self.tree, pose)?;
        let mats: Vec<Matrix3<f64>> = transforms.iter().map(|t| t.rotation.to_matrix()).collect();
        Ok((0..self.vertices.len())
            .map(|v| self.skin_vertex(v, shape, &transforms, &mats))
            .collect())
    }

    /// Keypoints of the posed mesh, skinning only the regressor's support.
    pub fn posed_keypoints(&self, pose: &Pose, shape: &Shape) -> Result<Vec<Vec3>> {
        self.check_inputs(pose, shape)?;
        let transforms = forward_kinematics(&self.tree, pose)?;
        let mats: Vec<Matrix3<f64>> = transforms.iter().map(|t| t.rotation.to_matrix()).collect();
        let mut posed = vec![Vec3::zeros(); self.vertices.len()];
        for &v in &self.regressor_support {
            posed[v] = self.skin_vertex(v, shape, &transforms, &mats);
        }
        Ok(regress_rows(&self.regressor, &posed))
    }
}

fn check_row(row: &[(usize, f64)], cols: usize, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for (c, w) in row {
        if *c >= cols {
            return Err(Error::InvalidSpec(format!("{what}: column {c} out of range")));
        }
        if !(*w >= 0.0) || !w.is_finite() {
            return Err(Error::InvalidSpec(format!("{what}: invalid weight {w}")));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::InvalidSpec(format!("{what}: weights sum to {sum}, expected 1")));
    }
    Ok(())
}

fn regress_rows(rows: &[Vec<(usize, f64)>], vertices: &[Vec3]) -> Vec<Vec3> {
    rows.iter()
        .map(|row| row.iter().fold(Vec3::zeros(), |acc, (v, w)| acc + vertices[*v] * *w))
        .collect()
}

/// Keypoints as convex combinations of mesh vertices (`X = W · M`).
pub fn regress_keypoints(model: &SkinnedModel, vertices: &[Vec3]) -> Result<Vec<Vec3>> {
    if vertices.len() != model.vertex_count() {
        return Err(Error::size("vertices", model.vertex_count(), vertices.len()));
    }
    Ok(regress_rows(&model.regressor, vertices))
}

pub fn skin(model: &SkinnedModel, pose: &Pose, shape: &Shape) -> Result<Vec<Vec3>> {
    model.skin(pose, shape)
}
