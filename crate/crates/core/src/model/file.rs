//! JSON model files.
//!
//! ```text
//! {
//!   "joints":       [{"name", "parent": index|null, "position": [x, y, z]}],
//!   "keypoints":    [{"name", "parent": index|null}],
//!   "keypoint_map": [{"keypoint": index, "joint": index|null}],
//!   "vertices":     [[x, y, z]],
//!   "faces":        [[a, b, c]],
//!   "skin_weights": [[vertex, joint, weight]],
//!   "shape_dirs":   [[3 * vertex + axis, component, value]],
//!   "W":            [[keypoint, vertex, weight]],
//!   "eval_keypoints": [name]
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::skinned::{SkinnedModel, SHAPE_DIM};
use super::tree::{JointDef, KeypointDef, KinematicTree};
use crate::error::{Error, Result};
use crate::geom3d::Vec3;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointRecord {
    name: String,
    parent: Option<usize>,
    position: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointRecord {
    name: String,
    parent: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapRecord {
    keypoint: usize,
    joint: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    joints: Vec<JointRecord>,
    keypoints: Vec<KeypointRecord>,
    keypoint_map: Vec<MapRecord>,
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    skin_weights: Vec<(usize, usize, f64)>,
    shape_dirs: Vec<(usize, usize, f64)>,
    #[serde(rename = "W")]
    regressor: Vec<(usize, usize, f64)>,
    #[serde(default)]
    eval_keypoints: Vec<String>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidSpec(msg.into())
}

impl ModelFile {
    fn from_model(model: &SkinnedModel) -> Self {
        let tree = model.tree();
        let mut skin_weights = Vec::new();
        let mut shape_dirs = Vec::new();
        for v in 0..model.vertex_count() {
            for (j, w) in model.skin_weights(v) {
                skin_weights.push((v, *j, *w));
            }
            for (b, d) in model.shape_dirs(v).iter().enumerate() {
                for axis in 0..3 {
                    if d[axis] != 0.0 {
                        shape_dirs.push((3 * v + axis, b, d[axis]));
                    }
                }
            }
        }
        let regressor = (0..tree.keypoint_count())
            .flat_map(|k| model.regressor_row(k).iter().map(move |(v, w)| (k, *v, *w)))
            .collect();
        Self {
            joints: tree
                .joint_defs()
                .into_iter()
                .map(|j| JointRecord {
                    name: j.name,
                    parent: j.parent,
                    position: j.position.into(),
                })
                .collect(),
            keypoints: tree
                .keypoint_defs()
                .into_iter()
                .map(|k| KeypointRecord {
                    name: k.name,
                    parent: k.parent,
                })
                .collect(),
            keypoint_map: tree
                .keypoint_map()
                .into_iter()
                .map(|(keypoint, joint)| MapRecord { keypoint, joint })
                .collect(),
            vertices: model.rest_vertices().iter().map(|v| (*v).into()).collect(),
            faces: model.faces().to_vec(),
            skin_weights,
            shape_dirs,
            regressor,
            eval_keypoints: model
                .eval_keypoints()
                .iter()
                .map(|k| tree.keypoint_name(*k).to_string())
                .collect(),
        }
    }

    fn into_model(self) -> Result<SkinnedModel> {
        let k = self.keypoints.len();
        let v = self.vertices.len();
        let j = self.joints.len();

        let mut joint_of = vec![None; k];
        let mut seen = vec![false; k];
        for m in &self.keypoint_map {
            if m.keypoint >= k {
                return Err(invalid(format!("keypoint_map references keypoint {}", m.keypoint)));
            }
            if seen[m.keypoint] {
                return Err(invalid(format!("keypoint {} appears twice in keypoint_map", m.keypoint)));
            }
            seen[m.keypoint] = true;
            joint_of[m.keypoint] = m.joint;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("keypoint {missing} is missing from keypoint_map")));
        }

        let tree = KinematicTree::new(
            self.joints
                .into_iter()
                .map(|r| JointDef {
                    name: r.name,
                    parent: r.parent,
                    position: Vec3::from(r.position),
                })
                .collect(),
            self.keypoints
                .into_iter()
                .zip(joint_of)
                .map(|(r, joint)| KeypointDef {
                    name: r.name,
                    parent: r.parent,
                    joint,
                })
                .collect(),
        )?;

        let mut skin = vec![Vec::new(); v];
        for (vi, ji, w) in self.skin_weights {
            if vi >= v || ji >= j {
                return Err(invalid(format!("skin weight ({vi}, {ji}) out of range")));
            }
            skin[vi].push((ji, w));
        }
        let mut shape_dirs = vec![[Vec3::zeros(); SHAPE_DIM]; v];
        for (row, col, val) in self.shape_dirs {
            if row >= 3 * v || col >= SHAPE_DIM {
                return Err(invalid(format!("shape direction ({row}, {col}) out of range")));
            }
            if !val.is_finite() {
                return Err(invalid("non-finite shape direction"));
            }
            shape_dirs[row / 3][col][row % 3] += val;
        }
        let mut regressor = vec![Vec::new(); k];
        for (ki, vi, w) in self.regressor {
            if ki >= k || vi >= v {
                return Err(invalid(format!("regressor entry ({ki}, {vi}) out of range")));
            }
            regressor[ki].push((vi, w));
        }
        let eval = self
            .eval_keypoints
            .iter()
            .map(|n| {
                tree.keypoint_index(n).ok_or_else(|| Error::UnknownKeypointName {
                    name: n.clone(),
                    context: "eval_keypoints".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        SkinnedModel::new(
            tree,
            self.vertices.into_iter().map(Vec3::from).collect(),
            self.faces,
            skin,
            shape_dirs,
            regressor,
            eval,
        )
    }
}

/// Serializes a model to its JSON document.
pub fn model_to_json(model: &SkinnedModel) -> String {
    serde_json::to_string(&ModelFile::from_model(model)).expect("model serializes")
}

/// Parses and validates a model document.
pub fn model_from_json(text: &str) -> Result<SkinnedModel> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::parse("model", e))?;
    // invariant violations in a file are input errors, not configuration
    file.into_model().map_err(|e| match e {
        Error::InvalidSpec(m) => Error::parse("model", m),
        other => other,
    })
}

pub fn save_model(model: &SkinnedModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_json(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<SkinnedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_synthetic_model, JointSpec};

    #[test]
    fn roundtrip_is_exact() {
        let m = make_synthetic_model(&JointSpec::humanoid()).unwrap();
        let back = model_from_json(&model_to_json(&m)).unwrap();
        assert_eq!(back.rest_vertices(), m.rest_vertices());
        assert_eq!(back.faces(), m.faces());
        assert_eq!(back.rest_keypoints(), m.rest_keypoints());
        assert_eq!(back.eval_keypoints(), m.eval_keypoints());
        for v in [0, 17, m.vertex_count() - 1] {
            assert_eq!(back.skin_weights(v), m.skin_weights(v));
            assert_eq!(back.shape_dirs(v), m.shape_dirs(v));
        }
    }

    fn tweak(f: impl FnOnce(&mut serde_json::Value)) -> Result<SkinnedModel> {
        let m = make_synthetic_model(&JointSpec::humanoid()).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&model_to_json(&m)).unwrap();
        f(&mut doc);
        model_from_json(&doc.to_string())
    }

    #[test]
    fn rejects_bad_row_sums() {
        let r = tweak(|d| d["W"][0][2] = serde_json::json!(0.5));
        assert!(matches!(r, Err(Error::Parse { .. })), "{r:?}");
        let r = tweak(|d| d["skin_weights"][0][2] = serde_json::json!(0.9));
        assert!(matches!(r, Err(Error::Parse { .. })), "{r:?}");
    }

    #[test]
    fn rejects_bad_faces_and_map() {
        let r = tweak(|d| d["faces"][0][1] = serde_json::json!(1_000_000));
        assert!(matches!(r, Err(Error::Parse { .. })));
        let r = tweak(|d| {
            d["keypoint_map"].as_array_mut().unwrap().pop();
        });
        assert!(matches!(r, Err(Error::Parse { .. })));
        let r = tweak(|d| d["eval_keypoints"][0] = serde_json::json!("tail"));
        assert!(matches!(r, Err(Error::UnknownKeypointName { .. })));
    }

    #[test]
    fn rejects_malformed_json() {
        assert!(matches!(model_from_json("{\"joints\": ["), Err(Error::Parse { .. })));
        assert!(matches!(model_from_json("{}"), Err(Error::Parse { .. })));
    }
}
