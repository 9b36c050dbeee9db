//! Browser bindings. Each exported function takes plain numbers and returns
//! a JSON string the page draws from; the Rust-side functions are also
//! callable natively, which is how they are tested.

use std::sync::OnceLock;

use kama::articulate::{kama, ArticulateConfig, FitState, KeypointSet};
use kama::geom3d::Vec3;
use kama::harness::{eval_subset, metric_mpve, metric_pa_mpjpe, synth_generate, SynthData, SynthSpec};
use kama::model::{make_synthetic_model, JointSpec, SkinnedModel};
use kama::refine::{refine, PosePrior, RefineConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Every n-th vertex is sent to the page.
const MESH_STRIDE: usize = 6;

fn model() -> &'static SkinnedModel {
    static M: OnceLock<SkinnedModel> = OnceLock::new();
    M.get_or_init(|| make_synthetic_model(&JointSpec::humanoid()).expect("built-in model is valid"))
}

#[derive(Debug, Serialize)]
pub struct Skeleton {
    pub names: Vec<String>,
    /// Parent keypoint per keypoint, -1 for the root.
    pub parents: Vec<i64>,
}

#[derive(Debug, Serialize)]
pub struct FitView {
    pub truth: Vec<[f64; 3]>,
    pub observed: Vec<[f64; 3]>,
    pub fitted: Vec<[f64; 3]>,
    pub pa_mpjpe_mm: f64,
}

#[derive(Debug, Serialize)]
pub struct TwistView {
    pub truth_mesh: Vec<[f64; 3]>,
    pub with_twist: Vec<[f64; 3]>,
    pub without_twist: Vec<[f64; 3]>,
    pub mpve_with_twist_mm: f64,
    pub mpve_removed_mm: f64,
}

#[derive(Debug, Serialize)]
pub struct RefineView {
    pub trace: Vec<f64>,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub kama_pa_mpjpe_mm: f64,
    pub refined_pa_mpjpe_mm: f64,
    pub truth: Vec<[f64; 3]>,
    pub kama: Vec<[f64; 3]>,
    pub refined: Vec<[f64; 3]>,
}

fn arr(v: &[Vec3]) -> Vec<[f64; 3]> {
    v.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn sample(seed: u64, noise_mm: f64, twist: f64) -> Result<SynthData, String> {
    let spec = SynthSpec {
        num_frames: 1,
        sigma_3d: noise_mm.max(0.0) / 1e3,
        sigma_2d: if noise_mm > 0.0 { 2.0 } else { 0.0 },
        twist_range: twist.clamp(0.0, std::f64::consts::FRAC_PI_2),
        seed,
        ..Default::default()
    };
    synth_generate(model(), &spec).map_err(|e| e.to_string())
}

fn subset_error(fit: &FitState, truth: &FitState) -> Result<f64, String> {
    let m = model();
    let a = eval_subset(m, &fit.keypoints(m).map_err(|e| e.to_string())?);
    let b = eval_subset(m, &truth.keypoints(m).map_err(|e| e.to_string())?);
    metric_pa_mpjpe(&a, &b).map_err(|e| e.to_string())
}

pub fn skeleton_view() -> Skeleton {
    let tree = model().tree();
    Skeleton {
        names: tree.keypoint_names().to_vec(),
        parents: (0..tree.keypoint_count()).map(|k| tree.keypoint_parent(k).map_or(-1, |p| p as i64)).collect(),
    }
}

/// Articulates one random noisy pose.
pub fn fit_view(seed: u64, noise_mm: f64) -> Result<FitView, String> {
    let m = model();
    let data = sample(seed, noise_mm, 0.0)?;
    let x: &KeypointSet = &data.frames[0].keypoints;
    let truth = &data.truth[0].state;
    let fit = kama(m, x, &ArticulateConfig::default()).map_err(|e| e.to_string())?;
    Ok(FitView {
        truth: arr(&truth.keypoints(m).map_err(|e| e.to_string())?),
        observed: arr(x.positions()),
        fitted: arr(&fit.keypoints(m).map_err(|e| e.to_string())?),
        pa_mpjpe_mm: subset_error(&fit, truth)?,
    })
}

/// Compares articulation with and without twist removal on a pose whose
/// single-child bones carry twists up to `twist` radians.
pub fn twist_view(seed: u64, twist: f64) -> Result<TwistView, String> {
    let m = model();
    let data = sample(seed, 0.0, twist)?;
    let x = &data.frames[0].keypoints;
    let truth = data.truth[0].state.mesh(m).map_err(|e| e.to_string())?;
    let keep = ArticulateConfig { remove_twist: false, ..Default::default() };
    let with = kama(m, x, &keep).map_err(|e| e.to_string())?.mesh(m).map_err(|e| e.to_string())?;
    let without = kama(m, x, &ArticulateConfig::default()).map_err(|e| e.to_string())?.mesh(m).map_err(|e| e.to_string())?;
    let thin = |v: &[Vec3]| arr(&v.iter().step_by(MESH_STRIDE).copied().collect::<Vec<_>>());
    Ok(TwistView {
        mpve_with_twist_mm: metric_mpve(&with, &truth).map_err(|e| e.to_string())?,
        mpve_removed_mm: metric_mpve(&without, &truth).map_err(|e| e.to_string())?,
        truth_mesh: thin(&truth),
        with_twist: thin(&with),
        without_twist: thin(&without),
    })
}

/// Refines the articulation of a noisy, twisted pose.
pub fn refine_view(seed: u64, iterations: usize, noise_mm: f64) -> Result<RefineView, String> {
    let m = model();
    let data = sample(seed, noise_mm, std::f64::consts::FRAC_PI_2)?;
    let frame = &data.frames[0];
    let truth = &data.truth[0].state;
    let init = kama(m, &frame.keypoints, &ArticulateConfig::default()).map_err(|e| e.to_string())?;
    let config = RefineConfig { iterations: iterations.clamp(1, 2000), ..Default::default() };
    let out = refine(&init, m, &frame.keypoints, frame.camera.as_ref(), &config, &PosePrior::default())
        .map_err(|e| e.to_string())?;
    Ok(RefineView {
        kama_pa_mpjpe_mm: subset_error(&init, truth)?,
        refined_pa_mpjpe_mm: subset_error(&out.state, truth)?,
        truth: arr(&truth.keypoints(m).map_err(|e| e.to_string())?),
        kama: arr(&init.keypoints(m).map_err(|e| e.to_string())?),
        refined: arr(&out.state.keypoints(m).map_err(|e| e.to_string())?),
        trace: out.trace,
        initial_loss: out.initial_loss,
        best_loss: out.best_loss,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn skeleton() -> Result<String, JsError> {
    to_js(Ok(skeleton_view()))
}

#[wasm_bindgen]
pub fn fit_random(seed: u32, noise_mm: f64) -> Result<String, JsError> {
    to_js(fit_view(seed.into(), noise_mm))
}

#[wasm_bindgen]
pub fn twist_removal(seed: u32, twist: f64) -> Result<String, JsError> {
    to_js(twist_view(seed.into(), twist))
}

#[wasm_bindgen]
pub fn refine_trace(seed: u32, iterations: u32, noise_mm: f64) -> Result<String, JsError> {
    to_js(refine_view(seed.into(), iterations as usize, noise_mm))
}
