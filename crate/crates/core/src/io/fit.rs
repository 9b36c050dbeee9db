use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::articulate::{FitState, JointSource};
use crate::error::{Error, Result};
use crate::geom3d::Vec3;
use crate::model::{KinematicTree, Pose, Shape, SHAPE_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitRecord {
    frame_id: u64,
    theta: Vec<[f64; 3]>,
    beta: [f64; SHAPE_DIM],
    s: f64,
    t: [f64; 3],
    per_joint_source: Vec<JointSource>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitFile {
    fits: Vec<FitRecord>,
}

/// Fitted parameters for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFit {
    pub frame_id: u64,
    pub state: FitState,
}

impl FitRecord {
    fn from_fit(f: &FrameFit) -> Self {
        Self {
            frame_id: f.frame_id,
            theta: f.state.pose.axis_angles().iter().map(|v| (*v).into()).collect(),
            beta: f.state.shape.0,
            s: f.state.scale,
            t: f.state.translation.into(),
            per_joint_source: f.state.per_joint_source.clone(),
        }
    }

    fn into_fit(self) -> Result<FrameFit> {
        let ctx = format!("fit of frame {}", self.frame_id);
        if self.per_joint_source.len() != self.theta.len() {
            return Err(Error::parse(
                &ctx,
                format!("{} joints in theta but {} in per_joint_source", self.theta.len(), self.per_joint_source.len()),
            ));
        }
        let finite = self.theta.iter().flatten().chain(&self.beta).chain(&self.t).all(|v| v.is_finite());
        if !finite || !self.s.is_finite() {
            return Err(Error::parse(&ctx, "non-finite parameter"));
        }
        if self.s <= 0.0 {
            return Err(Error::parse(&ctx, format!("scale must be positive, got {}", self.s)));
        }
        let theta: Vec<Vec3> = self.theta.into_iter().map(Vec3::from).collect();
        Ok(FrameFit {
            frame_id: self.frame_id,
            state: FitState {
                pose: Pose::from_axis_angles(&theta),
                shape: Shape(self.beta),
                scale: self.s,
                translation: Vec3::from(self.t),
                per_joint_source: self.per_joint_source,
            },
        })
    }
}

/// Checks that every fit has one rotation per model joint.
pub fn check_fits(fits: &[FrameFit], tree: &KinematicTree) -> Result<()> {
    for f in fits {
        if f.state.pose.len() != tree.joint_count() {
            return Err(Error::parse(
                format!("fit of frame {}", f.frame_id),
                format!("expected {} joints, found {}", tree.joint_count(), f.state.pose.len()),
            ));
        }
    }
    Ok(())
}

pub fn fits_to_json(fits: &[FrameFit]) -> String {
    let file = FitFile {
        fits: fits.iter().map(FitRecord::from_fit).collect(),
    };
    serde_json::to_string_pretty(&file).expect("fits serialize")
}

pub fn parse_fits(text: &str) -> Result<Vec<FrameFit>> {
    let file: FitFile = serde_json::from_str(text).map_err(|e| Error::parse("fits", e))?;
    file.fits.into_iter().map(FitRecord::into_fit).collect()
}

pub fn write_fit(fits: &[FrameFit], path: &Path) -> Result<()> {
    std::fs::write(path, fits_to_json(fits)).map_err(|e| Error::io(path, e))
}

pub fn load_fit(path: &Path) -> Result<Vec<FrameFit>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fits(&text).map_err(|e| match e {
        Error::Parse { context, message } => Error::parse(format!("{}: {context}", path.display()), message),
        other => other,
    })
}
