use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{procrustes_align, Vec3};
use crate::io::FrameFit;
use crate::model::{Pose, SkinnedModel};

fn mean_distance_mm(pred: &[Vec3], gt: &[Vec3], what: &'static str) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::size(what, gt.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::DegenerateInput(format!("{what}: no points")));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum();
    Ok(1000.0 * sum / pred.len() as f64)
}

/// Mean per-vertex error in millimetres.
pub fn metric_mpve(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mean_distance_mm(pred, gt, "vertices")
}

/// Mean per-keypoint error in millimetres.
pub fn metric_mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mean_distance_mm(pred, gt, "keypoints")
}

/// MPJPE after a similarity alignment of the prediction onto the ground truth.
pub fn metric_pa_mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::size("keypoints", gt.len(), pred.len()));
    }
    let sim = procrustes_align(pred, gt)?;
    let aligned: Vec<Vec3> = pred.iter().map(|p| sim.apply(p)).collect();
    metric_mpjpe(&aligned, gt)
}

/// Geodesic angle per joint between two poses, in radians.
pub fn rotation_errors(pred: &Pose, gt: &Pose) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::size("pose joints", gt.len(), pred.len()));
    }
    Ok(pred.rotations().iter().zip(gt.rotations()).map(|(a, b)| a.angle_to(b)).collect())
}

/// The evaluation subset of a keypoint list.
pub fn eval_subset(model: &SkinnedModel, keypoints: &[Vec3]) -> Vec<Vec3> {
    model.eval_keypoints().iter().map(|&k| keypoints[k]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame_id: u64,
    pub mpve_mm: f64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub rotation_error_rad: Vec<f64>,
    pub eval_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameEval>,
    pub mean_mpve_mm: f64,
    pub mean_mpjpe_mm: f64,
    pub mean_pa_mpjpe_mm: f64,
    /// Per joint, averaged over frames.
    pub mean_rotation_error_rad: Vec<f64>,
    pub total_ms: f64,
}

fn evaluate_frame(model: &SkinnedModel, fit: &FrameFit, gt: &FrameFit) -> Result<FrameEval> {
    let start = Instant::now();
    let pred_mesh = fit.state.mesh(model)?;
    let gt_mesh = gt.state.mesh(model)?;
    let pred_kp = eval_subset(model, &fit.state.keypoints(model)?);
    let gt_kp = eval_subset(model, &gt.state.keypoints(model)?);
    Ok(FrameEval {
        frame_id: fit.frame_id,
        mpve_mm: metric_mpve(&pred_mesh, &gt_mesh)?,
        mpjpe_mm: metric_mpjpe(&pred_kp, &gt_kp)?,
        pa_mpjpe_mm: metric_pa_mpjpe(&pred_kp, &gt_kp)?,
        rotation_error_rad: rotation_errors(&fit.state.pose, &gt.state.pose)?,
        eval_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

/// Compares fits with ground truth, matched by frame id. Frames are
/// evaluated in parallel and aggregated in frame-id order.
pub fn evaluate(model: &SkinnedModel, fits: &[FrameFit], gt: &[FrameFit]) -> Result<EvalReport> {
    let start = Instant::now();
    let mut pairs = Vec::with_capacity(fits.len());
    for f in fits {
        let g = gt
            .iter()
            .find(|g| g.frame_id == f.frame_id)
            .ok_or_else(|| Error::parse(format!("frame {}", f.frame_id), "no ground truth for this frame"))?;
        pairs.push((f, g));
    }
    pairs.sort_by_key(|(f, _)| f.frame_id);
    let frames: Vec<FrameEval> =
        pairs.par_iter().map(|(f, g)| evaluate_frame(model, f, g)).collect::<Result<_>>()?;
    let n = frames.len();
    let joints = model.tree().joint_count();
    let mean_rotation_error_rad =
        (0..joints).map(|j| mean(frames.iter().map(|f| f.rotation_error_rad[j]), n)).collect();
    Ok(EvalReport {
        mean_mpve_mm: mean(frames.iter().map(|f| f.mpve_mm), n),
        mean_mpjpe_mm: mean(frames.iter().map(|f| f.mpjpe_mm), n),
        mean_pa_mpjpe_mm: mean(frames.iter().map(|f| f.pa_mpjpe_mm), n),
        mean_rotation_error_rad,
        frames,
        total_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
