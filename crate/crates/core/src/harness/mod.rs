//! Synthetic datasets, error metrics, and the initialization comparison.

mod experiment;
mod metrics;
mod synth;

pub use experiment::{experiment_init_comparison, ArmFrame, ArmSummary, InitArm, InitComparison, THRESHOLD_FACTOR};
pub use metrics::{
    eval_subset, evaluate, metric_mpjpe, metric_mpve, metric_pa_mpjpe, rotation_errors, EvalReport, FrameEval,
};
pub use synth::{sample_state, synth_generate, SynthData, SynthSpec};
