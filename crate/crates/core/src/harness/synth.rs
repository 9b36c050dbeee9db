use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::articulate::{FitState, JointSource, KeypointSet};
use crate::error::{Error, Result};
use crate::geom3d::{perspective_project, swing_twist_decompose, CameraIntrinsics, Rotation, Vec3};
use crate::io::{Frame, FrameFit};
use crate::model::SkinnedModel;

/// Parameters of a synthetic keypoint dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_frames: usize,
    /// Per-component bound of the root axis-angle, radians.
    pub root_range: f64,
    /// Per-component bound of the other sampled joints, radians.
    pub pose_range: f64,
    /// Bound of the twist injected about single-child bones, radians.
    pub twist_range: f64,
    /// Bound of each shape coefficient.
    pub shape_range: f64,
    /// Isotropic keypoint noise, metres.
    pub sigma_3d: f64,
    /// Pixel noise on the projections, when a camera is set.
    pub sigma_2d: f64,
    pub scale_range: [f64; 2],
    pub translation_min: [f64; 3],
    pub translation_max: [f64; 3],
    pub camera: Option<CameraIntrinsics>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_frames: 10,
            root_range: 0.6,
            pose_range: 0.6,
            twist_range: 0.0,
            shape_range: 0.0,
            sigma_3d: 0.0,
            sigma_2d: 0.0,
            scale_range: [0.9, 1.1],
            translation_min: [-0.3, -0.3, 3.0],
            translation_max: [0.3, 0.3, 5.0],
            camera: Some(CameraIntrinsics { fx: 1000.0, fy: 1000.0, cx: 500.0, cy: 500.0 }),
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Parses a spec document; omitted fields take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::parse("synth spec", e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        for (name, v, max) in [
            ("root_range", self.root_range, PI),
            ("pose_range", self.pose_range, PI / 2.0),
            ("twist_range", self.twist_range, PI / 2.0),
            ("shape_range", self.shape_range, 3.0),
        ] {
            if !(0.0..=max).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, {max:.4}]"));
            }
        }
        for (name, v) in [("sigma_3d", self.sigma_3d), ("sigma_2d", self.sigma_2d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        let [s0, s1] = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return bad(format!("scale_range {:?} must satisfy 0 < min <= max", self.scale_range));
        }
        for i in 0..3 {
            let (a, b) = (self.translation_min[i], self.translation_max[i]);
            if !(a <= b && a.is_finite() && b.is_finite()) {
                return bad(format!("translation range on axis {i} is empty or non-finite"));
            }
        }
        if let Some(c) = &self.camera {
            c.validate().map_err(|e| Error::InvalidSpec(e.to_string()))?;
            if self.translation_min[2] < 1.0 {
                return bad("with a camera, translation_min z must be at least 1 m".into());
            }
        }
        Ok(())
    }
}

/// Frames plus the states that generated them, matched by frame id.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub frames: Vec<Frame>,
    pub truth: Vec<FrameFit>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn cube(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    Vec3::new(uniform(rng, -r, r), uniform(rng, -r, r), uniform(rng, -r, r))
}

/// Samples a state the articulation can represent up to the injected twist:
/// multi-child keypoint joints get free rotations, single-child ones a swing
/// with an optional twist about the rest bone, everything else stays at rest.
pub fn sample_state(model: &SkinnedModel, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<FitState> {
    let tree = model.tree();
    let canonical = model.rest_keypoints();
    let mut state = FitState::rest(tree.joint_count());
    let root = tree.keypoint_root();
    for (k, j) in tree.keypoint_map() {
        let Some(j) = j else { continue };
        let children = tree.keypoint_children(k);
        match children.len() {
            0 => {}
            1 => {
                let d = (canonical[children[0]] - canonical[k]).normalize();
                let r = Rotation::from_axis_angle(&cube(rng, spec.pose_range));
                let (swing, _) = swing_twist_decompose(&r, &d)?;
                let twist = Rotation::from_axis_and_angle(&d, uniform(rng, -spec.twist_range, spec.twist_range));
                state.pose.set(j, swing * twist);
                state.per_joint_source[j] = JointSource::OneChild;
            }
            _ => {
                let range = if k == root { spec.root_range } else { spec.pose_range };
                state.pose.set(j, Rotation::from_axis_angle(&cube(rng, range)));
                state.per_joint_source[j] = JointSource::MultiChild;
            }
        }
    }
    for b in state.shape.0.iter_mut() {
        *b = uniform(rng, -spec.shape_range, spec.shape_range);
    }
    state.scale = uniform(rng, spec.scale_range[0], spec.scale_range[1]);
    state.translation = Vec3::from_fn(|i, _| uniform(rng, spec.translation_min[i], spec.translation_max[i]));
    Ok(state)
}

/// Renders noisy keypoints from `truth`. Confidence decays as
/// `exp(-|noise| / sigma_3d)`.
fn observe(
    model: &SkinnedModel,
    truth: &FitState,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(KeypointSet, Option<Vec<[f64; 2]>>)> {
    let clean = truth.keypoints(model)?;
    let n3 = Normal::new(0.0, spec.sigma_3d).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let n2 = Normal::new(0.0, spec.sigma_2d).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut positions = Vec::with_capacity(clean.len());
    let mut confidence = Vec::with_capacity(clean.len());
    for p in &clean {
        let noise = Vec3::new(n3.sample(rng), n3.sample(rng), n3.sample(rng));
        positions.push(p + noise);
        confidence.push(if spec.sigma_3d > 0.0 { (-noise.norm() / spec.sigma_3d).exp() } else { 1.0 });
    }
    let uv = match &spec.camera {
        Some(cam) => Some(
            clean
                .iter()
                .map(|p| {
                    let [u, v] = perspective_project(cam, p)?;
                    Ok([u + n2.sample(rng), v + n2.sample(rng)])
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok((KeypointSet::new(positions, confidence)?, uv))
}

/// Seeded synthetic dataset. Frame ids are `0..num_frames`.
pub fn synth_generate(model: &SkinnedModel, spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut truth = Vec::with_capacity(spec.num_frames);
    for i in 0..spec.num_frames {
        let state = sample_state(model, spec, &mut rng)?;
        let (mut keypoints, uv) = observe(model, &state, spec, &mut rng)?;
        if let Some(uv) = uv {
            keypoints = keypoints.with_projections(uv)?;
        }
        let frame_id = i as u64;
        frames.push(Frame { frame_id, keypoints, camera: spec.camera });
        truth.push(FrameFit { frame_id, state });
    }
    Ok(SynthData { frames, truth })
}
