//! Analytic articulation from 3D keypoints.
//!
//! Per keypoint a global rotation is estimated from its child bones: a single
//! child gives the minimal rotation between rest and observed bone, several
//! children give a confidence-weighted rigid fit, and childless keypoints get
//! no rotation. Globals are turned into locals along the keypoint skeleton,
//! the unobservable twist about single-child bones is stripped, the rotations
//! are reordered onto model joints, and a global scale and translation are
//! fitted to the observed keypoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{
    axis_angle_between, fit_scale_translation, swing_twist_decompose, weighted_rotation_fit,
    Rotation, Vec3,
};
use crate::model::{KinematicTree, Pose, Shape, SkinnedModel};

/// Observed keypoints in camera space with per-keypoint confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    positions: Vec<Vec3>,
    confidence: Vec<f64>,
    projected_2d: Option<Vec<[f64; 2]>>,
}

impl KeypointSet {
    pub fn new(positions: Vec<Vec3>, confidence: Vec<f64>) -> Result<Self> {
        if positions.len() != confidence.len() {
            return Err(Error::size("keypoint confidences", positions.len(), confidence.len()));
        }
        if let Some(c) = confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidSpec(format!("confidence {c} outside [0, 1]")));
        }
        if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("keypoint position".into()));
        }
        Ok(Self {
            positions,
            confidence,
            projected_2d: None,
        })
    }

    /// All confidences set to one.
    pub fn fully_confident(positions: Vec<Vec3>) -> Result<Self> {
        let n = positions.len();
        Self::new(positions, vec![1.0; n])
    }

    pub fn with_projections(mut self, uv: Vec<[f64; 2]>) -> Result<Self> {
        if uv.len() != self.positions.len() {
            return Err(Error::size("2D projections", self.positions.len(), uv.len()));
        }
        if uv.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::NonFinite("2D keypoint".into()));
        }
        self.projected_2d = Some(uv);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    pub fn projected_2d(&self) -> Option<&[[f64; 2]]> {
        self.projected_2d.as_deref()
    }

    pub fn check_against(&self, tree: &KinematicTree) -> Result<()> {
        if self.len() != tree.keypoint_count() {
            return Err(Error::size("keypoints", tree.keypoint_count(), self.len()));
        }
        Ok(())
    }
}

/// How a joint's rotation was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointSource {
    OneChild,
    MultiChild,
    Zeroed,
}

/// Articulation result: local joint rotations, shape, and the global
/// similarity placing the mesh in camera space (`M = s·M̂ + t`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    pub pose: Pose,
    pub shape: Shape,
    pub scale: f64,
    pub translation: Vec3,
    pub per_joint_source: Vec<JointSource>,
}

impl FitState {
    /// Rest pose, zero shape, unit scale, no translation.
    pub fn rest(joints: usize) -> Self {
        Self {
            pose: Pose::identity(joints),
            shape: Shape::zero(),
            scale: 1.0,
            translation: Vec3::zeros(),
            per_joint_source: vec![JointSource::Zeroed; joints],
        }
    }

    /// Mesh vertices in camera space.
    pub fn mesh(&self, model: &SkinnedModel) -> Result<Vec<Vec3>> {
        Ok(model
            .skin(&self.pose, &self.shape)?
            .into_iter()
            .map(|v| v * self.scale + self.translation)
            .collect())
    }

    /// Regressed keypoints in camera space.
    pub fn keypoints(&self, model: &SkinnedModel) -> Result<Vec<Vec3>> {
        Ok(model
            .posed_keypoints(&self.pose, &self.shape)?
            .into_iter()
            .map(|v| v * self.scale + self.translation)
            .collect())
    }
}

/// Which keypoints enter the rigid fit of a multi-child keypoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    /// The keypoint and its children.
    Children,
    /// The keypoint, its children and its parent.
    ChildrenAndParent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArticulateConfig {
    pub neighborhood: Neighborhood,
    /// Fit only the two most confident children when a keypoint has more
    /// than two.
    pub pair_selection: bool,
    /// Uniform weight used when every confidence in a neighborhood is zero.
    pub confidence_floor: f64,
    pub remove_twist: bool,
}

impl Default for ArticulateConfig {
    fn default() -> Self {
        Self {
            neighborhood: Neighborhood::Children,
            pair_selection: false,
            confidence_floor: 1e-4,
            remove_twist: true,
        }
    }
}

/// Per-keypoint rotations and how each was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointRotations {
    pub rotations: Vec<Rotation>,
    pub sources: Vec<JointSource>,
}

/// The rotation rule each keypoint falls under by its child count.
pub fn keypoint_sources(tree: &KinematicTree) -> Vec<JointSource> {
    (0..tree.keypoint_count()).map(|k| rule_source(tree, k)).collect()
}

fn rule_source(tree: &KinematicTree, k: usize) -> JointSource {
    match tree.keypoint_children(k).len() {
        0 => JointSource::Zeroed,
        1 => JointSource::OneChild,
        _ => JointSource::MultiChild,
    }
}

fn one_child_rotation(canonical: &[Vec3], observed: &[Vec3], k: usize, c: usize) -> Result<Rotation> {
    axis_angle_between(&(canonical[c] - canonical[k]), &(observed[c] - observed[k]))
}

/// Vectors from `k` to its neighbours must span more than a line for the
/// rigid fit to be unique.
fn spans_plane(vectors: &[Vec3]) -> bool {
    let scale: f64 = vectors.iter().map(|v| v.norm_squared()).sum();
    if scale <= 0.0 {
        return false;
    }
    vectors
        .iter()
        .enumerate()
        .any(|(i, a)| vectors[i + 1..].iter().any(|b| a.cross(b).norm() > 1e-9 * scale))
}

fn multi_child_rotation(
    tree: &KinematicTree,
    canonical: &[Vec3],
    x: &KeypointSet,
    k: usize,
    config: &ArticulateConfig,
) -> Result<Rotation> {
    let conf = x.confidence();
    let observed = x.positions();
    let mut members: Vec<usize> = tree.keypoint_children(k).to_vec();
    if config.pair_selection && members.len() > 2 {
        members.sort_by(|a, b| conf[*b].total_cmp(&conf[*a]).then(a.cmp(b)));
        members.truncate(2);
    }
    if config.neighborhood == Neighborhood::ChildrenAndParent {
        if let Some(p) = tree.keypoint_parent(k) {
            members.push(p);
        }
    }
    let src: Vec<Vec3> = members.iter().map(|n| canonical[*n] - canonical[k]).collect();
    let dst: Vec<Vec3> = members.iter().map(|n| observed[*n] - observed[k]).collect();
    let mut weights: Vec<f64> = members.iter().map(|n| conf[*n]).collect();
    if weights.iter().sum::<f64>() < config.confidence_floor {
        weights.iter_mut().for_each(|w| *w = config.confidence_floor);
    }
    if !spans_plane(&src) {
        return Err(Error::DegenerateInput(format!(
            "rest neighborhood of keypoint {} is colinear",
            tree.keypoint_name(k)
        )));
    }
    let active: Vec<Vec3> = src.iter().zip(&weights).filter(|(_, w)| **w > 0.0).map(|(v, _)| *v).collect();
    if !spans_plane(&active) {
        return Err(Error::DegenerateInput(format!(
            "weighted neighborhood of keypoint {} is colinear",
            tree.keypoint_name(k)
        )));
    }
    weighted_rotation_fit(&src, &dst, &weights)
}

/// Global rotation of every keypoint from observed vs rest positions.
pub fn estimate_global_rotations(
    x: &KeypointSet,
    canonical: &[Vec3],
    tree: &KinematicTree,
    config: &ArticulateConfig,
) -> Result<KeypointRotations> {
    x.check_against(tree)?;
    if canonical.len() != tree.keypoint_count() {
        return Err(Error::size("canonical keypoints", tree.keypoint_count(), canonical.len()));
    }
    let n = tree.keypoint_count();
    let mut rotations = vec![Rotation::identity(); n];
    let mut sources = vec![JointSource::Zeroed; n];
    for k in 0..n {
        let children = tree.keypoint_children(k);
        sources[k] = rule_source(tree, k);
        rotations[k] = match sources[k] {
            JointSource::Zeroed => Rotation::identity(),
            JointSource::OneChild => one_child_rotation(canonical, x.positions(), k, children[0])?,
            JointSource::MultiChild => match multi_child_rotation(tree, canonical, x, k, config) {
                Ok(r) => r,
                Err(Error::DegenerateInput(_)) => {
                    let conf = x.confidence();
                    let best = *children
                        .iter()
                        .max_by(|a, b| conf[**a].total_cmp(&conf[**b]).then(b.cmp(a)))
                        .expect("multi-child keypoint has children");
                    sources[k] = JointSource::OneChild;
                    one_child_rotation(canonical, x.positions(), k, best)?
                }
                Err(e) => return Err(e),
            },
        };
    }
    Ok(KeypointRotations { rotations, sources })
}

/// Nearest ancestor of `k` that carries an estimated rotation.
fn rotated_ancestor(tree: &KinematicTree, sources: &[JointSource], k: usize) -> Option<usize> {
    let mut p = tree.keypoint_parent(k);
    while let Some(a) = p {
        if sources[a] != JointSource::Zeroed {
            return Some(a);
        }
        p = tree.keypoint_parent(a);
    }
    None
}

/// Local rotations `θ_k = (θ_p^g)⁻¹ · θ_k^g`; the root keeps its global.
/// Childless keypoints carry no rotation and get the identity.
pub fn globals_to_locals(globals: &KeypointRotations, tree: &KinematicTree) -> Vec<Rotation> {
    (0..tree.keypoint_count())
        .map(|k| {
            if globals.sources[k] == JointSource::Zeroed {
                return Rotation::identity();
            }
            match rotated_ancestor(tree, &globals.sources, k) {
                None => globals.rotations[k],
                Some(p) => globals.rotations[p].inverse() * globals.rotations[k],
            }
        })
        .collect()
}

/// Replaces the local rotation of every single-child keypoint by its swing
/// about the rest bone direction.
///
/// The discarded twist is handed down to the rotated children, so the global
/// rotation of every descendant (and every keypoint position) is unchanged.
pub fn remove_twist(
    locals: &[Rotation],
    sources: &[JointSource],
    tree: &KinematicTree,
    canonical: &[Vec3],
) -> Result<Vec<Rotation>> {
    let mut out = locals.to_vec();
    for &k in tree.keypoint_order() {
        if sources[k] != JointSource::OneChild {
            continue;
        }
        let children = tree.keypoint_children(k);
        // a multi-child keypoint demoted to the one-child rule has no single bone
        if children.len() != 1 {
            continue;
        }
        let bone = canonical[children[0]] - canonical[k];
        let n = bone.norm();
        if n < crate::geom3d::DEGENERATE_NORM {
            return Err(Error::DegenerateInput(format!(
                "zero-length rest bone at keypoint {}",
                tree.keypoint_name(k)
            )));
        }
        let (swing, twist) = swing_twist_decompose(&out[k], &(bone / n))?;
        out[k] = swing;
        for &c in children {
            if sources[c] != JointSource::Zeroed {
                out[c] = twist * out[c];
            }
        }
    }
    Ok(out)
}

/// Positions of the keypoint skeleton posed by keypoint-local rotations,
/// with the root left at its rest position.
pub fn keypoint_forward_kinematics(locals: &[Rotation], tree: &KinematicTree, canonical: &[Vec3]) -> Vec<Vec3> {
    let n = tree.keypoint_count();
    let mut globals = vec![Rotation::identity(); n];
    let mut positions = canonical.to_vec();
    for &k in tree.keypoint_order() {
        match tree.keypoint_parent(k) {
            None => globals[k] = locals[k],
            Some(p) => {
                globals[k] = globals[p] * locals[k];
                positions[k] = positions[p] + globals[p].rotate(&(canonical[k] - canonical[p]));
            }
        }
    }
    positions
}

/// Reorders keypoint rotations onto model joints; joints without a rotated
/// keypoint get the identity.
pub fn map_to_model_pose(
    locals: &[Rotation],
    sources: &[JointSource],
    tree: &KinematicTree,
) -> (Pose, Vec<JointSource>) {
    let mut pose = Pose::identity(tree.joint_count());
    let mut tags = vec![JointSource::Zeroed; tree.joint_count()];
    for (k, joint) in tree.keypoint_map() {
        if let Some(j) = joint {
            if sources[k] != JointSource::Zeroed {
                pose.set(j, locals[k]);
                tags[j] = sources[k];
            }
        }
    }
    (pose, tags)
}

/// Scale and translation aligning the keypoints of `pose` (zero shape) with
/// the observations.
pub fn fit_global_scale_translation(model: &SkinnedModel, pose: &Pose, x: &KeypointSet) -> Result<(f64, Vec3)> {
    x.check_against(model.tree())?;
    let posed = model.posed_keypoints(pose, &Shape::zero())?;
    fit_scale_translation(&posed, x.positions())
}

/// The full analytic pass; never iterates.
pub fn kama(model: &SkinnedModel, x: &KeypointSet, config: &ArticulateConfig) -> Result<FitState> {
    let tree = model.tree();
    let canonical = model.rest_keypoints();
    let globals = estimate_global_rotations(x, canonical, tree, config)?;
    let mut locals = globals_to_locals(&globals, tree);
    if config.remove_twist {
        locals = remove_twist(&locals, &globals.sources, tree, canonical)?;
    }
    let (pose, per_joint_source) = map_to_model_pose(&locals, &globals.sources, tree);
    let (scale, translation) = fit_global_scale_translation(model, &pose, x)?;
    Ok(FitState {
        pose,
        shape: Shape::zero(),
        scale,
        translation,
        per_joint_source,
    })
}

/// Rest pose placed by scale and translation only.
pub fn similarity_init(model: &SkinnedModel, x: &KeypointSet) -> Result<FitState> {
    let mut state = FitState::rest(model.tree().joint_count());
    (state.scale, state.translation) = fit_global_scale_translation(model, &state.pose, x)?;
    Ok(state)
}

/// Rest pose with the root oriented by the root keypoint's estimated
/// rotation, then placed by scale and translation.
pub fn mean_pose_init(model: &SkinnedModel, x: &KeypointSet, config: &ArticulateConfig) -> Result<FitState> {
    let tree = model.tree();
    let globals = estimate_global_rotations(x, model.rest_keypoints(), tree, config)?;
    let mut state = FitState::rest(tree.joint_count());
    let root = tree.keypoint_root();
    if let Some(j) = tree.keypoint_joint(root) {
        if globals.sources[root] != JointSource::Zeroed {
            state.pose.set(j, globals.rotations[root]);
            state.per_joint_source[j] = globals.sources[root];
        }
    }
    (state.scale, state.translation) = fit_global_scale_translation(model, &state.pose, x)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_kinematics, make_synthetic_model, JointSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn model() -> &'static SkinnedModel {
        static M: OnceLock<SkinnedModel> = OnceLock::new();
        M.get_or_init(|| make_synthetic_model(&JointSpec::humanoid()).unwrap())
    }

    fn rand_vec(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
        Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
    }

    /// Random pose that KAMA can represent: twist-free single-child joints,
    /// identity on joints without a rotated keypoint.
    fn twist_free_pose(rng: &mut ChaCha8Rng) -> (Pose, Vec<JointSource>) {
        let m = model();
        let tree = m.tree();
        let canonical = m.rest_keypoints();
        let mut pose = Pose::identity(tree.joint_count());
        let mut tags = vec![JointSource::Zeroed; tree.joint_count()];
        for (k, j) in tree.keypoint_map() {
            let Some(j) = j else { continue };
            let children = tree.keypoint_children(k);
            match children.len() {
                0 => {}
                1 => {
                    let d = (canonical[children[0]] - canonical[k]).normalize();
                    let r = Rotation::from_axis_angle(&rand_vec(rng, 0.8));
                    let (swing, _) = swing_twist_decompose(&r, &d).unwrap();
                    pose.set(j, swing);
                    tags[j] = JointSource::OneChild;
                }
                _ => {
                    pose.set(j, Rotation::from_axis_angle(&rand_vec(rng, 0.6)));
                    tags[j] = JointSource::MultiChild;
                }
            }
        }
        (pose, tags)
    }

    fn observe(pose: &Pose, s: f64, t: Vec3) -> KeypointSet {
        let kps = model().posed_keypoints(pose, &Shape::zero()).unwrap();
        KeypointSet::fully_confident(kps.into_iter().map(|p| p * s + t).collect()).unwrap()
    }

    #[test]
    fn keypoint_set_validation() {
        assert!(KeypointSet::new(vec![Vec3::zeros()], vec![1.5]).is_err());
        assert!(KeypointSet::new(vec![Vec3::zeros()], vec![]).is_err());
        assert!(KeypointSet::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)], vec![1.0]).is_err());
    }

    #[test]
    fn canonical_input_gives_identity() {
        let m = model();
        let x = KeypointSet::fully_confident(m.rest_keypoints().to_vec()).unwrap();
        let g = estimate_global_rotations(&x, m.rest_keypoints(), m.tree(), &ArticulateConfig::default()).unwrap();
        for r in &g.rotations {
            assert!(r.angle() < 1e-7);
        }
        let fit = kama(m, &x, &ArticulateConfig::default()).unwrap();
        assert!((fit.scale - 1.0).abs() < 1e-9 && fit.translation.norm() < 1e-9);
    }

    #[test]
    fn canonical_scaled_and_shifted() {
        let m = model();
        let t = Vec3::new(0.2, -0.4, 3.5);
        let x = KeypointSet::fully_confident(m.rest_keypoints().iter().map(|p| p * 0.9 + t).collect()).unwrap();
        let fit = kama(m, &x, &ArticulateConfig::default()).unwrap();
        assert!(fit.pose.rotations().iter().all(|r| r.angle() < 1e-7));
        assert!((fit.scale - 0.9).abs() < 1e-9);
        assert!((fit.translation - t).norm() < 1e-9);
    }

    #[test]
    fn childless_keypoints_get_identity() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pose, _) = twist_free_pose(&mut rng);
        let mut x = observe(&pose, 1.0, Vec3::zeros()).positions().to_vec();
        let toe = m.tree().keypoint_index("l_big_toe").unwrap();
        x[toe] += Vec3::new(0.3, -0.2, 0.1);
        let x = KeypointSet::fully_confident(x).unwrap();
        let g = estimate_global_rotations(&x, m.rest_keypoints(), m.tree(), &ArticulateConfig::default()).unwrap();
        assert_eq!(g.rotations[toe], Rotation::identity());
        assert_eq!(g.sources[toe], JointSource::Zeroed);
    }

    #[test]
    fn globals_recovered_from_posed_model() {
        let m = model();
        let tree = m.tree();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (pose, _) = twist_free_pose(&mut rng);
            let fk = forward_kinematics(tree, &pose).unwrap();
            let x = observe(&pose, 1.0, Vec3::zeros());
            let g = estimate_global_rotations(&x, m.rest_keypoints(), tree, &ArticulateConfig::default()).unwrap();
            for (k, j) in tree.keypoint_map() {
                let Some(j) = j else { continue };
                let truth = fk[j].rotation;
                match g.sources[k] {
                    JointSource::MultiChild => assert!(g.rotations[k].angle_to(&truth) < 1e-4),
                    JointSource::OneChild => {
                        // equal up to a twist about the rest bone
                        let c = tree.keypoint_children(k)[0];
                        let d = (m.rest_keypoints()[c] - m.rest_keypoints()[k]).normalize();
                        assert!((g.rotations[k].rotate(&d) - truth.rotate(&d)).norm() < 1e-9);
                    }
                    JointSource::Zeroed => {}
                }
            }
        }
    }

    #[test]
    fn locals_from_fk_globals() {
        let m = model();
        let tree = m.tree();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (pose, _) = twist_free_pose(&mut rng);
        let fk = forward_kinematics(tree, &pose).unwrap();
        let mut rotations = vec![Rotation::identity(); tree.keypoint_count()];
        let mut sources = vec![JointSource::Zeroed; tree.keypoint_count()];
        for (k, j) in tree.keypoint_map() {
            if let (Some(j), false) = (j, tree.keypoint_children(k).is_empty()) {
                rotations[k] = fk[j].rotation;
                sources[k] = rule_source(tree, k);
            }
        }
        let locals = globals_to_locals(&KeypointRotations { rotations, sources: sources.clone() }, tree);
        for (k, j) in tree.keypoint_map() {
            if let (Some(j), true) = (j, sources[k] != JointSource::Zeroed) {
                assert!(locals[k].angle_to(&pose.get(j)) < 1e-9, "{}", tree.keypoint_name(k));
            }
        }
    }

    #[test]
    fn inherited_rotation_cancels() {
        let m = model();
        let tree = m.tree();
        let r0 = Rotation::from_axis_angle(&Vec3::new(0.2, 0.9, -0.3));
        let n = tree.keypoint_count();
        let sources: Vec<JointSource> = (0..n).map(|k| rule_source(tree, k)).collect();
        let rotations = vec![r0; n];
        let locals = globals_to_locals(&KeypointRotations { rotations, sources: sources.clone() }, tree);
        let root = tree.keypoint_root();
        assert!(locals[root].angle_to(&r0) < 1e-12);
        for k in 0..n {
            if k != root && sources[k] != JointSource::Zeroed {
                assert!(locals[k].angle() < 1e-7);
            }
        }
    }

    #[test]
    fn twist_removal_examples() {
        let m = model();
        let tree = m.tree();
        let canonical = m.rest_keypoints();
        let n = tree.keypoint_count();
        let sources: Vec<JointSource> = (0..n).map(|k| rule_source(tree, k)).collect();
        let knee = tree.keypoint_index("l_knee").unwrap();
        let ankle = tree.keypoint_index("l_ankle").unwrap();
        let d = (canonical[ankle] - canonical[knee]).normalize();

        let mut locals = vec![Rotation::identity(); n];
        locals[knee] = Rotation::from_axis_and_angle(&d, 0.9);
        let out = remove_twist(&locals, &sources, tree, canonical).unwrap();
        assert!(out[knee].angle() < 1e-12);
        // the twist moved into the ankle so its global is unchanged
        assert!(out[ankle].angle_to(&locals[knee]) < 1e-12);

        let swing = Rotation::from_axis_and_angle(&crate::geom3d::perpendicular_axis(&d), 0.6);
        locals[knee] = swing;
        let out = remove_twist(&locals, &sources, tree, canonical).unwrap();
        assert!(out[knee].angle_to(&swing) < 1e-12);
    }

    #[test]
    fn twist_removal_keeps_skeleton_positions() {
        let m = model();
        let tree = m.tree();
        let canonical = m.rest_keypoints();
        let sources = keypoint_sources(tree);
        let rest = keypoint_forward_kinematics(&vec![Rotation::identity(); tree.keypoint_count()], tree, canonical);
        assert!(rest.iter().zip(canonical).all(|(a, b)| (a - b).norm() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let locals: Vec<Rotation> = sources
                .iter()
                .map(|s| match s {
                    JointSource::Zeroed => Rotation::identity(),
                    _ => Rotation::from_axis_angle(&rand_vec(&mut rng, 1.2)),
                })
                .collect();
            let before = keypoint_forward_kinematics(&locals, tree, canonical);
            let after = remove_twist(&locals, &sources, tree, canonical).unwrap();
            let after = keypoint_forward_kinematics(&after, tree, canonical);
            for (a, b) in before.iter().zip(&after) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn map_leaves_unmapped_joints_at_identity() {
        let m = model();
        let tree = m.tree();
        let n = tree.keypoint_count();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let locals: Vec<Rotation> = (0..n).map(|_| Rotation::from_axis_angle(&rand_vec(&mut rng, 1.0))).collect();
        let sources: Vec<JointSource> = (0..n).map(|k| rule_source(tree, k)).collect();
        let (pose, tags) = map_to_model_pose(&locals, &sources, tree);
        for j in 0..tree.joint_count() {
            let rotated = tree.joint_keypoint(j).is_some_and(|k| sources[k] != JointSource::Zeroed);
            if !rotated {
                assert_eq!(pose.get(j), Rotation::identity(), "{}", tree.joint_name(j));
                assert_eq!(tags[j], JointSource::Zeroed);
            } else {
                assert_eq!(pose.get(j), locals[tree.joint_keypoint(j).unwrap()]);
            }
        }
        let (identity_pose, _) = map_to_model_pose(&vec![Rotation::identity(); n], &sources, tree);
        assert_eq!(identity_pose, Pose::identity(tree.joint_count()));
    }

    #[test]
    fn map_is_by_index_pairs() {
        // same tree with keypoints listed in a different order
        let m = model();
        let tree = m.tree();
        let perm: Vec<usize> = (0..tree.keypoint_count()).rev().collect();
        let defs = tree.keypoint_defs();
        let mut inverse = vec![0; perm.len()];
        for (new, old) in perm.iter().enumerate() {
            inverse[*old] = new;
        }
        let permuted: Vec<_> = perm
            .iter()
            .map(|old| {
                let d = &defs[*old];
                crate::model::KeypointDef { name: d.name.clone(), parent: d.parent.map(|p| inverse[p]), joint: d.joint }
            })
            .collect();
        let tree2 = KinematicTree::new(tree.joint_defs(), permuted).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let locals: Vec<Rotation> = (0..perm.len()).map(|_| Rotation::from_axis_angle(&rand_vec(&mut rng, 1.0))).collect();
        let sources: Vec<JointSource> = (0..perm.len()).map(|k| rule_source(tree, k)).collect();
        let locals2: Vec<Rotation> = perm.iter().map(|old| locals[*old]).collect();
        let sources2: Vec<JointSource> = perm.iter().map(|old| sources[*old]).collect();
        let (a, _) = map_to_model_pose(&locals, &sources, tree);
        let (b, _) = map_to_model_pose(&locals2, &sources2, &tree2);
        assert_eq!(a, b);
    }

    #[test]
    fn scale_translation_examples() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (pose, _) = twist_free_pose(&mut rng);
        let x = observe(&pose, 1.0, Vec3::zeros());
        let (s, t) = fit_global_scale_translation(m, &pose, &x).unwrap();
        assert!((s - 1.0).abs() < 1e-9 && t.norm() < 1e-9);
        let shift = Vec3::new(0.5, 0.0, 3.0);
        let x = observe(&pose, 1.2, shift);
        let (s, t) = fit_global_scale_translation(m, &pose, &x).unwrap();
        assert!((s - 1.2).abs() < 1e-6 && (t - shift).norm() < 1e-6);
    }

    #[test]
    fn scale_under_noise() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = rand_distr::Normal::new(0.0, 0.005).unwrap();
        for _ in 0..100 {
            let (pose, _) = twist_free_pose(&mut rng);
            let x = observe(&pose, 1.0, Vec3::new(0.0, 0.0, 4.0));
            let noisy: Vec<Vec3> = x
                .positions()
                .iter()
                .map(|p| p + Vec3::new(rng.sample(normal), rng.sample(normal), rng.sample(normal)))
                .collect();
            let (s, _) = fit_global_scale_translation(m, &pose, &KeypointSet::fully_confident(noisy).unwrap()).unwrap();
            assert!((s - 1.0).abs() < 0.05, "{s}");
        }
    }

    #[test]
    fn round_trip_twist_free() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..30 {
            let (pose, tags) = twist_free_pose(&mut rng);
            let s0 = rng.random_range(0.8..1.2);
            let t0 = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(3.0..6.0));
            let x = observe(&pose, s0, t0);
            let fit = kama(m, &x, &ArticulateConfig::default()).unwrap();
            assert_eq!(fit.per_joint_source, tags);
            for j in 0..pose.len() {
                assert!(fit.pose.get(j).angle_to(&pose.get(j)) < 1e-6, "joint {}", m.tree().joint_name(j));
            }
            assert!((fit.scale - s0).abs() < 1e-9);
            assert!((fit.translation - t0).norm() < 1e-9);
        }
    }

    #[test]
    fn twisted_input_keeps_positions() {
        // twist is dropped from single-child joints but keypoints are still
        // reproduced exactly
        let m = model();
        let tree = m.tree();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (pose, _) = twist_free_pose(&mut rng);
        let mut twisted = pose.clone();
        let canonical = m.rest_keypoints();
        for (k, j) in tree.keypoint_map() {
            let Some(j) = j else { continue };
            if tree.keypoint_children(k).len() == 1 {
                let c = tree.keypoint_children(k)[0];
                let d = (canonical[c] - canonical[k]).normalize();
                twisted.set(j, pose.get(j) * Rotation::from_axis_and_angle(&d, rng.random_range(-1.5..1.5)));
            }
        }
        let b = kama(m, &observe(&twisted, 1.0, Vec3::zeros()), &ArticulateConfig::default())
            .unwrap()
            .keypoints(m)
            .unwrap();
        let x_twist = observe(&twisted, 1.0, Vec3::zeros());
        for (p, q) in b.iter().zip(x_twist.positions()) {
            assert!((p - q).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_confidence_decouples_position() {
        let m = model();
        let tree = m.tree();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (pose, _) = twist_free_pose(&mut rng);
        let x = observe(&pose, 1.0, Vec3::zeros());
        let toe = tree.keypoint_index("l_small_toe").unwrap();
        let mut conf = vec![1.0; tree.keypoint_count()];
        conf[toe] = 0.0;
        let a = kama(m, &KeypointSet::new(x.positions().to_vec(), conf.clone()).unwrap(), &ArticulateConfig::default()).unwrap();
        let mut moved = x.positions().to_vec();
        moved[toe] += Vec3::new(0.1, 0.2, -0.05);
        let b = kama(m, &KeypointSet::new(moved, conf).unwrap(), &ArticulateConfig::default()).unwrap();
        assert_eq!(a.pose, b.pose);
    }

    #[test]
    fn initializers() {
        let m = model();
        let r0 = Rotation::from_axis_angle(&Vec3::new(0.1, 1.3, -0.2));
        let mut pose = Pose::identity(24);
        pose.set(0, r0);
        let x = observe(&pose, 1.1, Vec3::new(0.0, 0.2, 4.0));
        let mean = mean_pose_init(m, &x, &ArticulateConfig::default()).unwrap();
        assert!(mean.pose.get(0).angle_to(&r0) < 1e-9);
        assert!((mean.scale - 1.1).abs() < 1e-9);
        let plain = similarity_init(m, &x).unwrap();
        assert_eq!(plain.pose, Pose::identity(24));
        assert!(plain.scale > 0.0);
    }

    #[test]
    fn kabsch_failure_falls_back_to_one_child() {
        let m = model();
        let tree = m.tree();
        let x = KeypointSet::fully_confident(m.rest_keypoints().to_vec()).unwrap();
        // collapse the ankle neighborhood onto a line through the ankle
        let ankle = tree.keypoint_index("l_ankle").unwrap();
        let mut conf = vec![1.0; tree.keypoint_count()];
        for name in ["l_small_toe", "l_heel"] {
            conf[tree.keypoint_index(name).unwrap()] = 0.0;
        }
        let x = KeypointSet::new(x.positions().to_vec(), conf).unwrap();
        let g = estimate_global_rotations(&x, m.rest_keypoints(), tree, &ArticulateConfig::default()).unwrap();
        assert_eq!(g.sources[ankle], JointSource::OneChild);
        assert!(g.rotations[ankle].angle() < 1e-9);
    }

    #[test]
    fn pair_selection_and_parent_neighborhood_are_exact_when_noiseless() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (pose, _) = twist_free_pose(&mut rng);
        let x = observe(&pose, 1.0, Vec3::zeros());
        let cfg = ArticulateConfig { pair_selection: true, ..Default::default() };
        let fit = kama(m, &x, &cfg).unwrap();
        for j in 0..pose.len() {
            assert!(fit.pose.get(j).angle_to(&pose.get(j)) < 1e-6);
        }
        // with the parent in the neighborhood the fit is no longer exact once
        // the parent has rotated relative to the joint
        let cfg = ArticulateConfig { neighborhood: Neighborhood::ChildrenAndParent, ..Default::default() };
        let fit = kama(m, &x, &cfg).unwrap();
        assert!(fit.pose.rotations().iter().all(|r| r.is_finite()));
    }
}
