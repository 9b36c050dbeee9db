use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::articulate::KeypointSet;
use crate::error::{Error, Result};
use crate::geom3d::{CameraIntrinsics, Vec3};
use crate::model::KinematicTree;

/// One keypoint as stored in a frames file: camera-space metres, optional
/// pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointRecord {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub keypoints: Vec<KeypointRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraIntrinsics>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FramesFile {
    frames: Vec<FrameRecord>,
}

/// A validated frame with keypoints in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    pub keypoints: KeypointSet,
    pub camera: Option<CameraIntrinsics>,
}

impl Frame {
    pub fn from_record(rec: &FrameRecord, tree: &KinematicTree) -> Result<Self> {
        let ctx = format!("frame {}", rec.frame_id);
        let k = tree.keypoint_count();
        if rec.keypoints.len() != k {
            return Err(Error::parse(&ctx, format!("expected {k} keypoints, found {}", rec.keypoints.len())));
        }
        let mut positions = vec![Vec3::zeros(); k];
        let mut confidence = vec![0.0; k];
        let mut uv = vec![[0.0; 2]; k];
        let mut seen = vec![false; k];
        let mut with_uv = 0;
        for entry in &rec.keypoints {
            let i = tree.keypoint_index(&entry.name).ok_or_else(|| Error::UnknownKeypointName {
                name: entry.name.clone(),
                context: ctx.clone(),
            })?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::parse(&ctx, format!("keypoint `{}` listed twice", entry.name)));
            }
            let p = Vec3::new(entry.x, entry.y, entry.z);
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::parse(&ctx, format!("keypoint `{}` has a non-finite position", entry.name)));
            }
            if !(0.0..=1.0).contains(&entry.confidence) {
                return Err(Error::parse(
                    &ctx,
                    format!("keypoint `{}` confidence {} outside [0, 1]", entry.name, entry.confidence),
                ));
            }
            positions[i] = p;
            confidence[i] = entry.confidence;
            match (entry.u, entry.v) {
                (Some(u), Some(v)) if u.is_finite() && v.is_finite() => {
                    uv[i] = [u, v];
                    with_uv += 1;
                }
                (None, None) => {}
                _ => return Err(Error::parse(&ctx, format!("keypoint `{}` needs both finite u and v", entry.name))),
            }
        }
        if with_uv != 0 && with_uv != k {
            return Err(Error::parse(&ctx, "pixel coordinates must be given for all keypoints or none"));
        }
        if let Some(cam) = &rec.camera {
            cam.validate().map_err(|e| Error::parse(&ctx, e))?;
        }
        let mut keypoints = KeypointSet::new(positions, confidence).map_err(|e| Error::parse(&ctx, e))?;
        if with_uv == k {
            keypoints = keypoints.with_projections(uv).map_err(|e| Error::parse(&ctx, e))?;
        }
        Ok(Self {
            frame_id: rec.frame_id,
            keypoints,
            camera: rec.camera,
        })
    }

    pub fn to_record(&self, tree: &KinematicTree) -> FrameRecord {
        let uv = self.keypoints.projected_2d();
        FrameRecord {
            frame_id: self.frame_id,
            keypoints: (0..self.keypoints.len())
                .map(|k| {
                    let p = self.keypoints.positions()[k];
                    KeypointRecord {
                        name: tree.keypoint_name(k).to_string(),
                        x: p.x,
                        y: p.y,
                        z: p.z,
                        confidence: self.keypoints.confidence()[k],
                        u: uv.map(|uv| uv[k][0]),
                        v: uv.map(|uv| uv[k][1]),
                    }
                })
                .collect(),
            camera: self.camera,
        }
    }
}

/// Parses a frames document against the model's keypoint list.
pub fn parse_frames(text: &str, tree: &KinematicTree) -> Result<Vec<Frame>> {
    let file: FramesFile = serde_json::from_str(text).map_err(|e| Error::parse("frames", e))?;
    let mut ids = HashSet::new();
    file.frames
        .iter()
        .map(|rec| {
            if !ids.insert(rec.frame_id) {
                return Err(Error::parse(format!("frame {}", rec.frame_id), "duplicate frame_id"));
            }
            Frame::from_record(rec, tree)
        })
        .collect()
}

pub fn load_frames(path: &Path, tree: &KinematicTree) -> Result<Vec<Frame>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_frames(&text, tree).map_err(|e| match e {
        Error::Parse { context, message } => Error::parse(format!("{}: {context}", path.display()), message),
        other => other,
    })
}

pub fn frames_to_json(frames: &[Frame], tree: &KinematicTree) -> String {
    let file = FramesFile {
        frames: frames.iter().map(|f| f.to_record(tree)).collect(),
    };
    serde_json::to_string_pretty(&file).expect("frames serialize")
}

pub fn save_frames(frames: &[Frame], tree: &KinematicTree, path: &Path) -> Result<()> {
    std::fs::write(path, frames_to_json(frames, tree)).map_err(|e| Error::io(path, e))
}
