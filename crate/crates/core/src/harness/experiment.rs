use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{eval_subset, metric_pa_mpjpe};
use super::synth::{synth_generate, SynthSpec};
use crate::articulate::{kama, mean_pose_init, similarity_init, ArticulateConfig, FitState};
use crate::error::Result;
use crate::refine::{refine, PosePrior, RefineConfig, RefineOutput};
use crate::model::SkinnedModel;

/// Starting point of a refinement arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitArm {
    Kama,
    MeanPose,
    NoInit,
}

impl InitArm {
    pub const ALL: [InitArm; 3] = [InitArm::Kama, InitArm::MeanPose, InitArm::NoInit];

    pub fn initialize(self, model: &SkinnedModel, x: &crate::articulate::KeypointSet) -> Result<FitState> {
        let cfg = ArticulateConfig::default();
        match self {
            InitArm::Kama => kama(model, x, &cfg),
            InitArm::MeanPose => mean_pose_init(model, x, &cfg),
            InitArm::NoInit => similarity_init(model, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmFrame {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_pa_mpjpe_mm: f64,
    pub final_pa_mpjpe_mm: f64,
    /// First step whose loss is within the frame's threshold; `None` if never.
    pub iterations_to_threshold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: InitArm,
    pub mean_initial_loss: f64,
    pub mean_final_loss: f64,
    pub mean_initial_pa_mpjpe_mm: f64,
    pub mean_final_pa_mpjpe_mm: f64,
    /// Mean over frames that reached the threshold.
    pub mean_iterations_to_threshold: Option<f64>,
    pub frames_reaching_threshold: usize,
    pub frames: Vec<ArmFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitComparison {
    pub iterations: usize,
    /// Per frame, the threshold is this factor times the lowest best loss
    /// reached by any arm.
    pub threshold_factor: f64,
    pub arms: Vec<ArmSummary>,
}

pub const THRESHOLD_FACTOR: f64 = 1.1;

struct ArmRun {
    out: RefineOutput,
    initial_pa: f64,
    final_pa: f64,
}

fn first_within(out: &RefineOutput, threshold: f64) -> Option<usize> {
    if out.initial_loss <= threshold {
        return Some(0);
    }
    out.trace.iter().position(|l| *l <= threshold).map(|i| i + 1)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Refines every synthetic frame from each initialization and compares the
/// outcomes against ground truth.
pub fn experiment_init_comparison(
    model: &SkinnedModel,
    spec: &SynthSpec,
    config: &RefineConfig,
) -> Result<InitComparison> {
    config.validate()?;
    let data = synth_generate(model, spec)?;
    let prior = PosePrior::default();
    let per_frame: Vec<Vec<ArmRun>> = data
        .frames
        .par_iter()
        .zip(&data.truth)
        .map(|(frame, truth)| {
            let gt = eval_subset(model, &truth.state.keypoints(model)?);
            InitArm::ALL
                .iter()
                .map(|arm| {
                    let init = arm.initialize(model, &frame.keypoints)?;
                    let out = refine(&init, model, &frame.keypoints, frame.camera.as_ref(), config, &prior)?;
                    let initial_pa = metric_pa_mpjpe(&eval_subset(model, &init.keypoints(model)?), &gt)?;
                    let final_pa = metric_pa_mpjpe(&eval_subset(model, &out.state.keypoints(model)?), &gt)?;
                    Ok(ArmRun { out, initial_pa, final_pa })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut arms: Vec<ArmSummary> = InitArm::ALL
        .iter()
        .map(|&arm| ArmSummary {
            arm,
            mean_initial_loss: 0.0,
            mean_final_loss: 0.0,
            mean_initial_pa_mpjpe_mm: 0.0,
            mean_final_pa_mpjpe_mm: 0.0,
            mean_iterations_to_threshold: None,
            frames_reaching_threshold: 0,
            frames: Vec::with_capacity(per_frame.len()),
        })
        .collect();
    for runs in &per_frame {
        let best = runs.iter().map(|r| r.out.best_loss).fold(f64::INFINITY, f64::min);
        let threshold = THRESHOLD_FACTOR * best;
        for (summary, r) in arms.iter_mut().zip(runs) {
            summary.frames.push(ArmFrame {
                initial_loss: r.out.initial_loss,
                final_loss: r.out.best_loss,
                initial_pa_mpjpe_mm: r.initial_pa,
                final_pa_mpjpe_mm: r.final_pa,
                iterations_to_threshold: first_within(&r.out, threshold),
            });
        }
    }
    for s in &mut arms {
        s.mean_initial_loss = mean(s.frames.iter().map(|f| f.initial_loss));
        s.mean_final_loss = mean(s.frames.iter().map(|f| f.final_loss));
        s.mean_initial_pa_mpjpe_mm = mean(s.frames.iter().map(|f| f.initial_pa_mpjpe_mm));
        s.mean_final_pa_mpjpe_mm = mean(s.frames.iter().map(|f| f.final_pa_mpjpe_mm));
        let reached: Vec<f64> = s.frames.iter().filter_map(|f| f.iterations_to_threshold.map(|i| i as f64)).collect();
        s.frames_reaching_threshold = reached.len();
        s.mean_iterations_to_threshold = (!reached.is_empty()).then(|| mean(reached.into_iter()));
    }
    Ok(InitComparison {
        iterations: config.iterations,
        threshold_factor: THRESHOLD_FACTOR,
        arms,
    })
}
