//! Procedural stand-in for a learned body model: one closed capsule per bone,
//! distance-based skin blending at the joints, per-segment girth/size shape
//! directions, and a regressor that averages joint-centred vertex rings or
//! picks single surface vertices.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::skinned::{SkinnedModel, SHAPE_DIM};
use super::tree::{topological_order, JointDef, KeypointDef, KinematicTree};
use crate::error::{Error, Result};
use crate::geom3d::{perpendicular_axis, Vec3};

/// Fraction of a bone's length over which skin weights blend into the
/// neighbouring bone.
const BLEND_ZONE: f64 = 0.25;
/// Hemisphere rings per capsule cap, excluding the pole.
const CAP_RINGS: usize = 3;
/// Displacement per unit shape coefficient, relative to bone radius.
const SHAPE_GAIN: f64 = 0.15;
/// Shape groups beyond the global girth component.
const SHAPE_GROUPS: usize = SHAPE_DIM - 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndSite {
    pub position: [f64; 3],
    pub radius: f64,
    pub shape_group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpecEntry {
    pub name: String,
    pub parent: Option<String>,
    pub position: [f64; 3],
    /// Radius of the capsule from the parent joint to this joint.
    pub bone_radius: f64,
    /// Shape group of that capsule.
    pub shape_group: usize,
    /// Extra capsule from this joint to a free end point (head top, toe tip).
    pub end_site: Option<EndSite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KeypointSite {
    /// Centre of a joint, regressed as the mean of the vertex ring there.
    JointCenter { joint: String },
    /// The vertex nearest `target` among those rigidly attached to `frame`.
    Surface { frame: String, target: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSpecEntry {
    pub name: String,
    pub parent: Option<String>,
    pub joint: Option<String>,
    pub site: KeypointSite,
}

/// Declarative description of a synthetic body model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub joints: Vec<JointSpecEntry>,
    pub keypoints: Vec<KeypointSpecEntry>,
    pub eval_keypoints: Vec<String>,
    pub target_vertices: usize,
    pub ring_segments: usize,
    /// Shape groups whose direction scales the capsule about its start point
    /// instead of only thickening it.
    pub uniform_shape_groups: Vec<usize>,
}

fn mirror(p: [f64; 3]) -> [f64; 3] {
    [-p[0], p[1], p[2]]
}

impl JointSpec {
    /// A 24-joint humanoid in a relaxed A-pose with 26 keypoints: body joints,
    /// nose, eyes, ears, big and small toes, and heels.
    pub fn humanoid() -> Self {
        let mut joints = Vec::new();
        let mut push = |name: &str, parent: Option<&str>, position: [f64; 3], r: f64, g: usize, end: Option<EndSite>| {
            joints.push(JointSpecEntry {
                name: name.into(),
                parent: parent.map(Into::into),
                position,
                bone_radius: r,
                shape_group: g,
                end_site: end,
            });
        };
        let foot_end = |p: [f64; 3]| EndSite { position: p, radius: 0.03, shape_group: 7 };
        let hand_end = |p: [f64; 3]| EndSite { position: p, radius: 0.022, shape_group: 5 };

        push("pelvis", None, [0.0, 0.95, 0.0], 0.1, 0, None);
        push("l_hip", Some("pelvis"), [0.09, 0.88, 0.0], 0.085, 1, None);
        push("r_hip", Some("pelvis"), mirror([0.09, 0.88, 0.0]), 0.085, 1, None);
        push("spine1", Some("pelvis"), [0.0, 1.06, -0.02], 0.12, 0, None);
        push("l_knee", Some("l_hip"), [0.11, 0.50, 0.025], 0.07, 2, None);
        push("r_knee", Some("r_hip"), mirror([0.11, 0.50, 0.025]), 0.07, 2, None);
        push("spine2", Some("spine1"), [0.0, 1.19, -0.025], 0.125, 0, None);
        push("l_ankle", Some("l_knee"), [0.12, 0.09, -0.01], 0.05, 3, None);
        push("r_ankle", Some("r_knee"), mirror([0.12, 0.09, -0.01]), 0.05, 3, None);
        push("spine3", Some("spine2"), [0.0, 1.31, -0.02], 0.13, 0, None);
        push("l_foot", Some("l_ankle"), [0.13, 0.03, 0.11], 0.04, 7, Some(foot_end([0.135, 0.025, 0.185])));
        push("r_foot", Some("r_ankle"), mirror([0.13, 0.03, 0.11]), 0.04, 7, Some(foot_end(mirror([0.135, 0.025, 0.185]))));
        push("neck", Some("spine3"), [0.0, 1.50, -0.03], 0.08, 8, None);
        push("l_collar", Some("spine3"), [0.06, 1.43, -0.03], 0.055, 8, None);
        push("r_collar", Some("spine3"), mirror([0.06, 1.43, -0.03]), 0.055, 8, None);
        push(
            "head",
            Some("neck"),
            [0.0, 1.58, 0.0],
            0.055,
            8,
            Some(EndSite { position: [0.0, 1.74, 0.01], radius: 0.095, shape_group: 6 }),
        );
        push("l_shoulder", Some("l_collar"), [0.18, 1.44, -0.04], 0.06, 8, None);
        push("r_shoulder", Some("r_collar"), mirror([0.18, 1.44, -0.04]), 0.06, 8, None);
        push("l_elbow", Some("l_shoulder"), [0.37, 1.25, -0.05], 0.045, 4, None);
        push("r_elbow", Some("r_shoulder"), mirror([0.37, 1.25, -0.05]), 0.045, 4, None);
        push("l_wrist", Some("l_elbow"), [0.54, 1.07, -0.02], 0.037, 5, None);
        push("r_wrist", Some("r_elbow"), mirror([0.54, 1.07, -0.02]), 0.037, 5, None);
        push("l_hand", Some("l_wrist"), [0.60, 1.01, -0.01], 0.03, 5, Some(hand_end([0.66, 0.95, 0.0])));
        push("r_hand", Some("r_wrist"), mirror([0.60, 1.01, -0.01]), 0.03, 5, Some(hand_end(mirror([0.66, 0.95, 0.0]))));

        let mut keypoints = Vec::new();
        let mut kp = |name: &str, parent: Option<&str>, joint: Option<&str>, site: KeypointSite| {
            keypoints.push(KeypointSpecEntry {
                name: name.into(),
                parent: parent.map(Into::into),
                joint: joint.map(Into::into),
                site,
            });
        };
        let center = |j: &str| KeypointSite::JointCenter { joint: j.into() };
        let surface = |f: &str, t: [f64; 3]| KeypointSite::Surface { frame: f.into(), target: t };

        kp("pelvis", None, Some("pelvis"), center("pelvis"));
        kp("l_hip", Some("pelvis"), Some("l_hip"), center("l_hip"));
        kp("r_hip", Some("pelvis"), Some("r_hip"), center("r_hip"));
        kp("thorax", Some("pelvis"), Some("spine2"), center("spine2"));
        kp("l_knee", Some("l_hip"), Some("l_knee"), center("l_knee"));
        kp("r_knee", Some("r_hip"), Some("r_knee"), center("r_knee"));
        kp("neck", Some("thorax"), Some("neck"), center("neck"));
        kp("l_shoulder", Some("thorax"), Some("l_shoulder"), center("l_shoulder"));
        kp("r_shoulder", Some("thorax"), Some("r_shoulder"), center("r_shoulder"));
        kp("l_ankle", Some("l_knee"), Some("l_ankle"), center("l_ankle"));
        kp("r_ankle", Some("r_knee"), Some("r_ankle"), center("r_ankle"));
        kp("nose", Some("neck"), Some("head"), surface("head", [0.0, 1.665, 0.10]));
        kp("l_eye", Some("neck"), None, surface("head", [0.035, 1.695, 0.085]));
        kp("r_eye", Some("neck"), None, surface("head", mirror([0.035, 1.695, 0.085])));
        kp("l_ear", Some("neck"), None, surface("head", [0.095, 1.665, 0.0]));
        kp("r_ear", Some("neck"), None, surface("head", mirror([0.095, 1.665, 0.0])));
        kp("l_elbow", Some("l_shoulder"), Some("l_elbow"), center("l_elbow"));
        kp("r_elbow", Some("r_shoulder"), Some("r_elbow"), center("r_elbow"));
        kp("l_big_toe", Some("l_ankle"), Some("l_foot"), surface("l_foot", [0.115, 0.01, 0.20]));
        kp("l_small_toe", Some("l_ankle"), None, surface("l_foot", [0.16, 0.01, 0.19]));
        kp("l_heel", Some("l_ankle"), None, surface("l_ankle", [0.12, 0.04, -0.04]));
        kp("r_big_toe", Some("r_ankle"), Some("r_foot"), surface("r_foot", mirror([0.115, 0.01, 0.20])));
        kp("r_small_toe", Some("r_ankle"), None, surface("r_foot", mirror([0.16, 0.01, 0.19])));
        kp("r_heel", Some("r_ankle"), None, surface("r_ankle", mirror([0.12, 0.04, -0.04])));
        kp("l_wrist", Some("l_elbow"), Some("l_wrist"), center("l_wrist"));
        kp("r_wrist", Some("r_elbow"), Some("r_wrist"), center("r_wrist"));

        let eval_keypoints = [
            "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "r_wrist", "r_elbow",
            "r_shoulder", "l_shoulder", "l_elbow", "l_wrist", "neck", "nose",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();

        Self {
            joints,
            keypoints,
            eval_keypoints,
            target_vertices: 4000,
            ring_segments: 12,
            uniform_shape_groups: vec![6, 7],
        }
    }
}

struct Segment {
    owner: usize,
    end_joint: Option<usize>,
    start: Vec3,
    end: Vec3,
    radius: f64,
    group: usize,
    start_ring: Vec<usize>,
    end_ring: Vec<usize>,
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Builds a model from `spec`.
pub fn make_synthetic_model(spec: &JointSpec) -> Result<SkinnedModel> {
    if spec.ring_segments < 3 {
        return Err(Error::InvalidSpec("ring_segments must be at least 3".into()));
    }
    let name_index = |names: &[&str], n: &str, what: &str| {
        names
            .iter()
            .position(|x| *x == n)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown {what} `{n}`")))
    };

    // joints: resolve parents by name, then reorder parents-first
    let joint_names: Vec<&str> = spec.joints.iter().map(|j| j.name.as_str()).collect();
    let raw_parents = spec
        .joints
        .iter()
        .map(|j| j.parent.as_deref().map(|p| name_index(&joint_names, p, "joint")).transpose())
        .collect::<Result<Vec<_>>>()?;
    let order = topological_order(&raw_parents, "joint")?;
    let mut new_index = vec![0; order.len()];
    for (new, old) in order.iter().enumerate() {
        new_index[*old] = new;
    }
    let entries: Vec<&JointSpecEntry> = order.iter().map(|o| &spec.joints[*o]).collect();
    let joint_defs: Vec<JointDef> = order
        .iter()
        .map(|o| JointDef {
            name: spec.joints[*o].name.clone(),
            parent: raw_parents[*o].map(|p| new_index[p]),
            position: Vec3::from(spec.joints[*o].position),
        })
        .collect();
    let sorted_names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();

    let kp_names: Vec<&str> = spec.keypoints.iter().map(|k| k.name.as_str()).collect();
    let keypoint_defs = spec
        .keypoints
        .iter()
        .map(|k| {
            Ok(KeypointDef {
                name: k.name.clone(),
                parent: k.parent.as_deref().map(|p| name_index(&kp_names, p, "keypoint")).transpose()?,
                joint: k.joint.as_deref().map(|j| name_index(&sorted_names, j, "joint")).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let tree = KinematicTree::new(joint_defs, keypoint_defs)?;

    // one capsule per bone plus end-site capsules
    let mut segments = Vec::new();
    for (j, e) in entries.iter().enumerate() {
        if e.shape_group >= SHAPE_GROUPS || e.end_site.as_ref().is_some_and(|s| s.shape_group >= SHAPE_GROUPS) {
            return Err(Error::InvalidSpec(format!("shape group of `{}` out of range", e.name)));
        }
        if let Some(p) = tree.joint_parent(j) {
            segments.push(Segment {
                owner: p,
                end_joint: Some(j),
                start: tree.rest_joint(p),
                end: tree.rest_joint(j),
                radius: e.bone_radius,
                group: e.shape_group,
                start_ring: Vec::new(),
                end_ring: Vec::new(),
            });
        }
        if let Some(site) = &e.end_site {
            segments.push(Segment {
                owner: j,
                end_joint: None,
                start: tree.rest_joint(j),
                end: Vec3::from(site.position),
                radius: site.radius,
                group: site.shape_group,
                start_ring: Vec::new(),
                end_ring: Vec::new(),
            });
        }
    }
    for s in &segments {
        if !(s.radius > 0.0) || (s.end - s.start).norm() < 1e-6 {
            return Err(Error::InvalidSpec(format!(
                "degenerate bone capsule owned by `{}`",
                tree.joint_name(s.owner)
            )));
        }
    }

    let n = spec.ring_segments;
    let fixed_per_segment = 2 + n * 2 * CAP_RINGS;
    let budget = spec.target_vertices.saturating_sub(fixed_per_segment * segments.len()) as f64 / n as f64;
    let total_len: f64 = segments.iter().map(|s| (s.end - s.start).norm()).sum();

    let mut vertices = Vec::new();
    let mut skin = Vec::new();
    let mut shape_dirs = Vec::new();
    let mut faces = Vec::new();

    for seg in segments.iter_mut() {
        let axis = seg.end - seg.start;
        let length = axis.norm();
        let d = axis / length;
        let e1 = perpendicular_axis(&d);
        let e2 = d.cross(&e1);
        let cyl_rings = ((budget * length / total_len).round() as usize).max(2);
        let uniform = spec.uniform_shape_groups.contains(&seg.group);
        let parent_of_owner = tree.joint_parent(seg.owner);

        // (axial offset from start, radial scale, outward normal scale along d)
        let mut rings: Vec<(f64, f64, f64)> = Vec::new();
        for k in (1..=CAP_RINGS).rev() {
            let phi = k as f64 * (PI / 2.0) / (CAP_RINGS + 1) as f64;
            rings.push((-seg.radius * phi.sin(), phi.cos(), -phi.sin()));
        }
        for i in 0..cyl_rings {
            rings.push((length * i as f64 / (cyl_rings - 1) as f64, 1.0, 0.0));
        }
        for k in 1..=CAP_RINGS {
            let phi = k as f64 * (PI / 2.0) / (CAP_RINGS + 1) as f64;
            rings.push((length + seg.radius * phi.sin(), phi.cos(), phi.sin()));
        }

        let mut add_vertex = |axial: f64, normal: Vec3, vertices: &mut Vec<Vec3>| -> usize {
            let centre = seg.start + d * axial.clamp(0.0, length);
            let p = centre + normal * seg.radius;
            let u = axial / length;
            let w_parent = if parent_of_owner.is_some() { 0.5 * (1.0 - smoothstep(u / BLEND_ZONE)) } else { 0.0 };
            let w_child = if seg.end_joint.is_some() { 0.5 * smoothstep((u - 1.0 + BLEND_ZONE) / BLEND_ZONE) } else { 0.0 };
            let mut row = vec![(seg.owner, 1.0 - w_parent - w_child)];
            if w_parent > 0.0 {
                row.push((parent_of_owner.unwrap(), w_parent));
            }
            if w_child > 0.0 {
                row.push((seg.end_joint.unwrap(), w_child));
            }
            skin.push(row);

            let mut dirs = [Vec3::zeros(); SHAPE_DIM];
            dirs[0] = normal * (SHAPE_GAIN * seg.radius);
            dirs[1 + seg.group] = if uniform { (p - seg.start) * SHAPE_GAIN } else { normal * (SHAPE_GAIN * seg.radius) };
            shape_dirs.push(dirs);

            vertices.push(p);
            vertices.len() - 1
        };

        let south = add_vertex(-seg.radius, -d, &mut vertices);
        let mut ring_ids: Vec<Vec<usize>> = Vec::new();
        for (ri, (axial, radial, along)) in rings.iter().enumerate() {
            let mut ids = Vec::with_capacity(n);
            for a in 0..n {
                let t = 2.0 * PI * a as f64 / n as f64;
                let normal = (e1 * t.cos() + e2 * t.sin()) * *radial + d * *along;
                ids.push(add_vertex(*axial, normal, &mut vertices));
            }
            if ri == CAP_RINGS {
                seg.start_ring = ids.clone();
            }
            if ri == CAP_RINGS + cyl_rings - 1 {
                seg.end_ring = ids.clone();
            }
            ring_ids.push(ids);
        }
        let north = add_vertex(length + seg.radius, d, &mut vertices);

        // outward-facing triangles
        let first = &ring_ids[0];
        for a in 0..n {
            faces.push([south, first[(a + 1) % n], first[a]]);
        }
        for pair in ring_ids.windows(2) {
            let (lo, hi) = (&pair[0], &pair[1]);
            for a in 0..n {
                let b = (a + 1) % n;
                faces.push([lo[a], lo[b], hi[b]]);
                faces.push([lo[a], hi[b], hi[a]]);
            }
        }
        let last = ring_ids.last().unwrap();
        for a in 0..n {
            faces.push([north, last[a], last[(a + 1) % n]]);
        }
    }

    let mut regressor = Vec::with_capacity(spec.keypoints.len());
    for k in &spec.keypoints {
        let row = match &k.site {
            KeypointSite::JointCenter { joint } => {
                let j = name_index(&sorted_names, joint, "joint")?;
                let ring = match tree.joint_parent(j) {
                    Some(_) => segments.iter().find(|s| s.end_joint == Some(j)).map(|s| &s.end_ring),
                    None => segments.iter().find(|s| s.owner == j).map(|s| &s.start_ring),
                }
                .ok_or_else(|| Error::InvalidSpec(format!("joint `{joint}` has no bone to place keypoint `{}`", k.name)))?;
                let w = 1.0 / ring.len() as f64;
                ring.iter().map(|v| (*v, w)).collect()
            }
            KeypointSite::Surface { frame, target } => {
                let f = name_index(&sorted_names, frame, "joint")?;
                let target = Vec3::from(*target);
                let best = (0..vertices.len())
                    .filter(|v| skin[*v].len() == 1 && skin[*v][0].0 == f)
                    .min_by(|a, b| (vertices[*a] - target).norm().total_cmp(&(vertices[*b] - target).norm()))
                    .ok_or_else(|| Error::InvalidSpec(format!("no vertex is rigid to `{frame}` for keypoint `{}`", k.name)))?;
                vec![(best, 1.0)]
            }
        };
        regressor.push(row);
    }

    let eval = spec
        .eval_keypoints
        .iter()
        .map(|n| name_index(&kp_names, n, "keypoint"))
        .collect::<Result<Vec<_>>>()?;

    SkinnedModel::new(tree, vertices, faces, skin, shape_dirs, regressor, eval)
}
