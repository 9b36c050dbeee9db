//! First-order refinement of an articulation.
//!
//! Minimizes `L = L_2D + ω₁·L_3D + ω₃·L_θ + ω₂·L_β` over local axis-angle
//! pose, shape coefficients, scale and translation with Adam. Gradients are
//! computed in closed form by reverse accumulation through the regressor,
//! skinning and forward kinematics.

mod prior;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::articulate::{FitState, KeypointSet};
use crate::error::{Error, Result};
use crate::geom3d::{perspective_project, CameraIntrinsics, Rotation, Vec3};
use crate::model::{forward_kinematics, Pose, Shape, SkinnedModel, SHAPE_DIM};

pub use prior::{GaussianMixture, PosePrior};

/// Lower bound kept on the scale during optimization.
pub const MIN_SCALE: f64 = 1e-4;

/// Parameter blocks excluded from optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Freeze {
    pub pose: bool,
    pub shape: bool,
    pub scale: bool,
    pub translation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Weight of the 3D keypoint term.
    pub omega1: f64,
    /// Weight of the shape prior.
    pub omega2: f64,
    /// Weight of the pose prior.
    pub omega3: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub freeze: Freeze,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            omega1: 500.0,
            omega2: 4.78,
            omega3: 5.0,
            iterations: 100,
            step_size: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            freeze: Freeze::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.omega1, self.omega2, self.omega3];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidSpec(format!("loss weights must be non-negative, got {weights:?}")));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidSpec("iterations must be at least 1".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidSpec(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidSpec("invalid Adam parameters".into()));
        }
        Ok(())
    }
}

/// Unweighted values of the four terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub l2d: f64,
    pub l3d: f64,
    pub pose: f64,
    pub shape: f64,
}

impl LossTerms {
    pub fn total(&self, config: &RefineConfig) -> f64 {
        self.l2d + config.omega1 * self.l3d + config.omega3 * self.pose + config.omega2 * self.shape
    }
}

/// Gradient with respect to the axis-angle vector of every joint, the shape
/// coefficients, the scale and the translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub pose: Vec<Vec3>,
    pub shape: [f64; SHAPE_DIM],
    pub scale: f64,
    pub translation: Vec3,
}

impl Gradient {
    pub fn zeros(joints: usize) -> Self {
        Self {
            pose: vec![Vec3::zeros(); joints],
            shape: [0.0; SHAPE_DIM],
            scale: 0.0,
            translation: Vec3::zeros(),
        }
    }

    fn add_scaled(&mut self, other: &Gradient, w: f64) {
        for (a, b) in self.pose.iter_mut().zip(&other.pose) {
            *a += b * w;
        }
        for (a, b) in self.shape.iter_mut().zip(&other.shape) {
            *a += b * w;
        }
        self.scale += other.scale * w;
        self.translation += other.translation * w;
    }

    /// Flattened as pose, shape, scale, translation.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.pose.iter().flat_map(|v| v.iter().copied()).collect();
        out.extend_from_slice(&self.shape);
        out.push(self.scale);
        out.extend(self.translation.iter());
        out
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    fn apply_freeze(&mut self, freeze: &Freeze) {
        if freeze.pose {
            self.pose.iter_mut().for_each(|v| *v = Vec3::zeros());
        }
        if freeze.shape {
            self.shape = [0.0; SHAPE_DIM];
        }
        if freeze.scale {
            self.scale = 0.0;
        }
        if freeze.translation {
            self.translation = Vec3::zeros();
        }
    }
}

/// Per-term gradients, unweighted.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGradients {
    pub values: LossTerms,
    pub l2d: Gradient,
    pub l3d: Gradient,
    pub pose: Gradient,
    pub shape: Gradient,
}

impl TermGradients {
    pub fn total(&self, config: &RefineConfig) -> Gradient {
        let mut g = self.l2d.clone();
        g.add_scaled(&self.l3d, config.omega1);
        g.add_scaled(&self.pose, config.omega3);
        g.add_scaled(&self.shape, config.omega2);
        g
    }
}

/// Optimization variables: axis-angle pose, shape, scale, translation.
#[derive(Debug, Clone, PartialEq)]
struct Params {
    theta: Vec<Vec3>,
    beta: [f64; SHAPE_DIM],
    scale: f64,
    translation: Vec3,
}

impl Params {
    fn from_state(state: &FitState) -> Self {
        Self {
            theta: state.pose.axis_angles(),
            beta: state.shape.0,
            scale: state.scale,
            translation: state.translation,
        }
    }

    fn to_state(&self, template: &FitState) -> FitState {
        FitState {
            pose: Pose::from_axis_angles(&self.theta),
            shape: Shape(self.beta),
            scale: self.scale,
            translation: self.translation,
            per_joint_source: template.per_joint_source.clone(),
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.theta.iter().flat_map(|v| v.iter().copied()).collect();
        out.extend_from_slice(&self.beta);
        out.push(self.scale);
        out.extend(self.translation.iter());
        out
    }

    fn set_from(&mut self, v: &[f64]) {
        let j = self.theta.len();
        for (i, t) in self.theta.iter_mut().enumerate() {
            *t = Vec3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
        }
        self.beta.copy_from_slice(&v[3 * j..3 * j + SHAPE_DIM]);
        self.scale = v[3 * j + SHAPE_DIM];
        let o = 3 * j + SHAPE_DIM + 1;
        self.translation = Vec3::new(v[o], v[o + 1], v[o + 2]);
    }

    /// Rewraps every axis-angle vector to an angle in `[0, π]` and keeps the
    /// scale positive.
    fn canonicalize(&mut self) {
        for t in &mut self.theta {
            *t = Rotation::from_axis_angle(t).to_axis_angle();
        }
        self.scale = self.scale.max(MIN_SCALE);
    }
}

/// Rotation matrix of an axis-angle vector and its three partial derivatives.
fn exp_with_derivatives(theta: &Vec3) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let n = theta.norm();
    let half = 0.5 * n;
    // q = (cos(n/2), f·θ) with f = sin(n/2)/n and g = f'(n)/n
    let (f, g) = if n < 1e-3 {
        let n2 = n * n;
        (0.5 - n2 / 48.0 + n2 * n2 / 3840.0, -1.0 / 24.0 + n2 / 960.0)
    } else {
        (half.sin() / n, (0.5 * n * half.cos() - half.sin()) / (n * n * n))
    };
    let w = half.cos();
    let (x, y, z) = (f * theta.x, f * theta.y, f * theta.z);
    let r = Rotation::from_axis_angle(theta).to_matrix();

    let d_w = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let d_x = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let d_y = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let d_z = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;

    let mut out = [Matrix3::zeros(); 3];
    for (i, o) in out.iter_mut().enumerate() {
        // dq/dθ_i
        let dw = -0.5 * f * theta[i];
        let mut dv = theta * (g * theta[i]);
        dv[i] += f;
        *o = d_w * dw + d_x * dv.x + d_y * dv.y + d_z * dv.z;
    }
    (r, out)
}

fn frobenius(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Forward pass through pose and shape to model-space keypoints, with the
/// intermediate state needed for the reverse pass.
struct Forward {
    locals: Vec<Matrix3<f64>>,
    local_derivs: Vec<[Matrix3<f64>; 3]>,
    globals: Vec<Matrix3<f64>>,
    /// Model-space keypoints before scale and translation.
    keypoints: Vec<Vec3>,
}

impl Forward {
    fn new(model: &SkinnedModel, p: &Params) -> Result<Self> {
        let tree = model.tree();
        let n = tree.joint_count();
        if p.theta.len() != n {
            return Err(Error::size("pose", n, p.theta.len()));
        }
        let (locals, local_derivs): (Vec<_>, Vec<_>) = p.theta.iter().map(exp_with_derivatives).unzip();
        let pose = Pose::from_axis_angles(&p.theta);
        let transforms = forward_kinematics(tree, &pose)?;
        let globals: Vec<Matrix3<f64>> = transforms.iter().map(|t| t.rotation.to_matrix()).collect();
        let shape = Shape(p.beta);
        let mut posed = vec![Vec3::zeros(); model.vertex_count()];
        for &v in model.regressor_support() {
            posed[v] = model.skin_vertex(v, &shape, &transforms, &globals);
        }
        let keypoints = (0..tree.keypoint_count())
            .map(|k| model.regressor_row(k).iter().fold(Vec3::zeros(), |acc, (v, w)| acc + posed[*v] * *w))
            .collect();
        Ok(Self {
            locals,
            local_derivs,
            globals,
            keypoints,
        })
    }

    /// Camera-space keypoints `s·x̂ + t`.
    fn placed(&self, p: &Params) -> Vec<Vec3> {
        self.keypoints.iter().map(|k| k * p.scale + p.translation).collect()
    }

    /// Pulls a gradient on camera-space keypoints back to the parameters.
    fn backward(&self, model: &SkinnedModel, p: &Params, g_kp: &[Vec3]) -> Gradient {
        let tree = model.tree();
        let n = tree.joint_count();
        let mut out = Gradient::zeros(n);
        for (g, x) in g_kp.iter().zip(&self.keypoints) {
            out.translation += g;
            out.scale += g.dot(x);
        }

        let mut g_vert = vec![Vec3::zeros(); model.vertex_count()];
        for (k, g) in g_kp.iter().enumerate() {
            let gm = g * p.scale;
            for (v, w) in model.regressor_row(k) {
                g_vert[*v] += gm * *w;
            }
        }

        let shape = Shape(p.beta);
        let mut d_glob = vec![Matrix3::zeros(); n];
        let mut d_pos = vec![Vec3::zeros(); n];
        for &v in model.regressor_support() {
            let gv = g_vert[v];
            if gv == Vec3::zeros() {
                continue;
            }
            let shaped = model.shaped_vertex(v, &shape);
            let mut d_shaped = Vec3::zeros();
            for (j, w) in model.skin_weights(v) {
                let gw = gv * *w;
                d_glob[*j] += gw * (shaped - tree.rest_joint(*j)).transpose();
                d_pos[*j] += gw;
                d_shaped += self.globals[*j].tr_mul(&gw);
            }
            for (b, dir) in model.shape_dirs(v).iter().enumerate() {
                out.shape[b] += d_shaped.dot(dir);
            }
        }

        // children have larger indices than their parents
        for j in (0..n).rev() {
            let d_local = match tree.joint_parent(j) {
                None => d_glob[j],
                Some(pj) => {
                    let bone = tree.rest_joint(j) - tree.rest_joint(pj);
                    let dp = d_pos[j];
                    d_pos[pj] += dp;
                    let dg = d_glob[j];
                    d_glob[pj] += dp * bone.transpose() + dg * self.locals[j].transpose();
                    self.globals[pj].tr_mul(&dg)
                }
            };
            for i in 0..3 {
                out.pose[j][i] = frobenius(&d_local, &self.local_derivs[j][i]);
            }
        }
        out
    }
}

/// Target pixels: the provided 2D keypoints, else the projected 3D ones.
fn targets_2d(x: &KeypointSet, camera: &CameraIntrinsics) -> Result<Vec<[f64; 2]>> {
    match x.projected_2d() {
        Some(uv) => Ok(uv.to_vec()),
        None => x.positions().iter().map(|p| perspective_project(camera, p)).collect(),
    }
}

fn check_problem(model: &SkinnedModel, state: &FitState, x: &KeypointSet) -> Result<()> {
    x.check_against(model.tree())?;
    if state.pose.len() != model.tree().joint_count() {
        return Err(Error::size("pose", model.tree().joint_count(), state.pose.len()));
    }
    Ok(())
}

/// Data terms and their gradient with respect to camera-space keypoints.
fn data_terms(
    placed: &[Vec3],
    x: &KeypointSet,
    camera: Option<&CameraIntrinsics>,
) -> Result<(f64, Vec<Vec3>, f64, Vec<Vec3>)> {
    let conf = x.confidence();
    let mut l3d = 0.0;
    let mut g3d = vec![Vec3::zeros(); placed.len()];
    for k in 0..placed.len() {
        let r = x.positions()[k] - placed[k];
        l3d += conf[k] * r.norm_squared();
        g3d[k] = r * (-2.0 * conf[k]);
    }
    let mut l2d = 0.0;
    let mut g2d = vec![Vec3::zeros(); placed.len()];
    if let Some(cam) = camera {
        let targets = targets_2d(x, cam)?;
        for k in 0..placed.len() {
            let jac = cam.project_jacobian(&placed[k])?;
            // residuals relative to the principal point: subtracting two
            // absolute pixel coordinates loses about 1e-13 px
            let p = &placed[k];
            let du = (targets[k][0] - cam.cx) - cam.fx * p.x / p.z;
            let dv = (targets[k][1] - cam.cy) - cam.fy * p.y / p.z;
            l2d += conf[k] * (du * du + dv * dv);
            let (gu, gv) = (-2.0 * conf[k] * du, -2.0 * conf[k] * dv);
            g2d[k] = Vec3::new(
                jac[0][0] * gu + jac[1][0] * gv,
                jac[0][1] * gu + jac[1][1] * gv,
                jac[0][2] * gu + jac[1][2] * gv,
            );
        }
    }
    Ok((l2d, g2d, l3d, g3d))
}

fn evaluate_terms(
    model: &SkinnedModel,
    p: &Params,
    x: &KeypointSet,
    camera: Option<&CameraIntrinsics>,
    prior: &PosePrior,
) -> Result<TermGradients> {
    let fwd = Forward::new(model, p)?;
    let placed = fwd.placed(p);
    let (l2d, g2d, l3d, g3d) = data_terms(&placed, x, camera)?;
    let (pose_value, pose_grad) = prior.value_and_gradient(&p.theta, model.tree());
    let n = p.theta.len();
    let mut pose = Gradient::zeros(n);
    pose.pose = pose_grad;
    let mut shape = Gradient::zeros(n);
    for (g, b) in shape.shape.iter_mut().zip(&p.beta) {
        *g = 2.0 * b;
    }
    let l2d_grad = if camera.is_some() {
        fwd.backward(model, p, &g2d)
    } else {
        Gradient::zeros(n)
    };
    Ok(TermGradients {
        values: LossTerms {
            l2d,
            l3d,
            pose: pose_value,
            shape: p.beta.iter().map(|b| b * b).sum(),
        },
        l2d: l2d_grad,
        l3d: fwd.backward(model, p, &g3d),
        pose,
        shape,
    })
}

fn evaluate_values(
    model: &SkinnedModel,
    p: &Params,
    x: &KeypointSet,
    camera: Option<&CameraIntrinsics>,
    prior: &PosePrior,
) -> Result<LossTerms> {
    let fwd = Forward::new(model, p)?;
    let (l2d, _, l3d, _) = data_terms(&fwd.placed(p), x, camera)?;
    Ok(LossTerms {
        l2d,
        l3d,
        pose: prior.value(&p.theta, model.tree()),
        shape: p.beta.iter().map(|b| b * b).sum(),
    })
}

/// Confidence-weighted squared reprojection error in pixels²; zero without a
/// camera.
pub fn loss_2d(state: &FitState, model: &SkinnedModel, x: &KeypointSet, camera: Option<&CameraIntrinsics>) -> Result<f64> {
    check_problem(model, state, x)?;
    let p = Params::from_state(state);
    let fwd = Forward::new(model, &p)?;
    Ok(data_terms(&fwd.placed(&p), x, camera)?.0)
}

/// Confidence-weighted squared 3D keypoint error in m².
pub fn loss_3d(state: &FitState, model: &SkinnedModel, x: &KeypointSet) -> Result<f64> {
    check_problem(model, state, x)?;
    let p = Params::from_state(state);
    let fwd = Forward::new(model, &p)?;
    Ok(data_terms(&fwd.placed(&p), x, None)?.2)
}

pub fn prior_pose(state: &FitState, prior: &PosePrior, model: &SkinnedModel) -> f64 {
    prior.value(&state.pose.axis_angles(), model.tree())
}

pub fn prior_shape(state: &FitState) -> f64 {
    state.shape.0.iter().map(|b| b * b).sum()
}

pub fn loss_terms(
    state: &FitState,
    model: &SkinnedModel,
    x: &KeypointSet,
    camera: Option<&CameraIntrinsics>,
    prior: &PosePrior,
) -> Result<LossTerms> {
    check_problem(model, state, x)?;
    evaluate_values(model, &Params::from_state(state), x, camera, prior)
}

pub fn total_loss(
    state: &FitState,
    model: &SkinnedModel,
    x: &KeypointSet,
    camera: Option<&CameraIntrinsics>,
    config: &RefineConfig,
    prior: &PosePrior,
) -> Result<f64> {
    Ok(loss_terms(state, model, x, camera, prior)?.total(config))
}

/// Gradient of every term at `state`, unweighted and unfrozen.
pub fn term_gradients(
    state: &FitState,
    model: &SkinnedModel,
    x: &KeypointSet,
    camera: Option<&CameraIntrinsics>,
    prior: &PosePrior,
) -> Result<TermGradients> {
    check_problem(model, state, x)?;
    evaluate_terms(model, &Params::from_state(state), x, camera, prior)
}

/// Gradient of the total loss with frozen blocks zeroed.
pub fn gradient(
    state: &FitState,
    model: &SkinnedModel,
    x: &KeypointSet,
    camera: Option<&CameraIntrinsics>,
    config: &RefineConfig,
    prior: &PosePrior,
) -> Result<Gradient> {
    let mut g = term_gradients(state, model, x, camera, prior)?.total(config);
    g.apply_freeze(&config.freeze);
    if !g.is_finite() {
        return Err(Error::NonFinite("loss gradient".into()));
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutput {
    /// Lowest-loss iterate, possibly the initial state.
    pub state: FitState,
    pub initial_loss: f64,
    pub best_loss: f64,
    /// 0 when no step improved on the initial state.
    pub best_iteration: usize,
    /// Total loss after each step.
    pub trace: Vec<f64>,
    /// Set when optimization stopped early.
    pub diagnostic: Option<String>,
}

/// Runs Adam from `initial` for `config.iterations` steps.
pub fn refine(
    initial: &FitState,
    model: &SkinnedModel,
    x: &KeypointSet,
    camera: Option<&CameraIntrinsics>,
    config: &RefineConfig,
    prior: &PosePrior,
) -> Result<RefineOutput> {
    config.validate()?;
    check_problem(model, initial, x)?;
    let mut params = Params::from_state(initial);
    let start = evaluate_terms(model, &params, x, camera, prior)?;
    let initial_loss = start.values.total(config);
    if !initial_loss.is_finite() {
        return Err(Error::NonFinite("initial loss".into()));
    }
    let mut grad = start.total(config);
    grad.apply_freeze(&config.freeze);

    let dim = params.to_vec().len();
    let mut m = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    let mut best = (initial_loss, 0, params.clone());
    let mut trace = Vec::with_capacity(config.iterations);
    let mut diagnostic = None;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);

    for it in 1..=config.iterations {
        let g = grad.to_vec();
        if g.iter().any(|x| !x.is_finite()) {
            diagnostic = Some(format!("non-finite gradient at iteration {it}"));
            break;
        }
        let mut flat = params.to_vec();
        let c1 = 1.0 - b1.powi(it as i32);
        let c2 = 1.0 - b2.powi(it as i32);
        for i in 0..dim {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            flat[i] -= config.step_size * (m[i] / c1) / ((v[i] / c2).sqrt() + config.adam_eps);
        }
        params.set_from(&flat);
        params.canonicalize();

        match evaluate_terms(model, &params, x, camera, prior) {
            Ok(terms) => {
                let loss = terms.values.total(config);
                if !loss.is_finite() {
                    diagnostic = Some(format!("non-finite loss at iteration {it}"));
                    break;
                }
                trace.push(loss);
                if loss < best.0 {
                    best = (loss, it, params.clone());
                }
                grad = terms.total(config);
                grad.apply_freeze(&config.freeze);
            }
            Err(e) => {
                diagnostic = Some(format!("stopped at iteration {it}: {e}"));
                break;
            }
        }
    }

    let (best_loss, best_iteration, best_params) = best;
    let state = if best_iteration == 0 {
        initial.clone()
    } else {
        best_params.to_state(initial)
    };
    Ok(RefineOutput {
        state,
        initial_loss,
        best_loss,
        best_iteration,
        trace,
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::articulate::{kama, ArticulateConfig};
    use crate::model::{make_synthetic_model, JointSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn model() -> &'static SkinnedModel {
        static M: OnceLock<SkinnedModel> = OnceLock::new();
        M.get_or_init(|| make_synthetic_model(&JointSpec::humanoid()).unwrap())
    }

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 500.0, 500.0).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, range: f64) -> FitState {
        let mut s = FitState::rest(24);
        s.pose = Pose::from_axis_angles(
            &(0..24)
                .map(|_| Vec3::new(rng.random_range(-range..range), rng.random_range(-range..range), rng.random_range(-range..range)))
                .collect::<Vec<_>>(),
        );
        for b in s.shape.0.iter_mut() {
            *b = rng.random_range(-1.0..1.0);
        }
        s.scale = rng.random_range(0.9..1.1);
        s.translation = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(3.0..5.0));
        s
    }

    fn observe(state: &FitState) -> KeypointSet {
        KeypointSet::fully_confident(state.keypoints(model()).unwrap()).unwrap()
    }

    #[test]
    fn exp_derivatives_match_differences() {
        for theta in [Vec3::new(0.3, -0.7, 1.1), Vec3::new(1e-5, 2e-5, -1e-5), Vec3::zeros(), Vec3::new(0.0, 3.0, 0.0)] {
            let (_, d) = exp_with_derivatives(&theta);
            for i in 0..3 {
                let h = 1e-6;
                let mut p = theta;
                p[i] += h;
                let mut m = theta;
                m[i] -= h;
                let fd = (Rotation::from_axis_angle(&p).to_matrix() - Rotation::from_axis_angle(&m).to_matrix()) / (2.0 * h);
                assert!((fd - d[i]).norm() < 1e-8, "{theta:?} {i}");
            }
        }
    }

    #[test]
    fn loss_examples() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let state = random_state(&mut rng, 0.4);
        let x = observe(&state);
        let cam = camera();
        assert!(loss_2d(&state, m, &x, Some(&cam)).unwrap() < 1e-18);
        assert!(loss_3d(&state, m, &x).unwrap() < 1e-24);

        let zero = KeypointSet::new(x.positions().to_vec(), vec![0.0; 26]).unwrap();
        let mut moved = state.clone();
        moved.translation.x += 0.1;
        assert_eq!(loss_2d(&moved, m, &zero, Some(&cam)).unwrap(), 0.0);

        // one keypoint shifted by 2 px
        let mut uv: Vec<[f64; 2]> = x.positions().iter().map(|p| perspective_project(&cam, p).unwrap()).collect();
        uv[3][0] += 2.0;
        let x2 = x.clone().with_projections(uv).unwrap();
        assert!((loss_2d(&state, m, &x2, Some(&cam)).unwrap() - 4.0).abs() < 1e-9);

        // one keypoint off by 10 mm
        let mut pos = x.positions().to_vec();
        pos[5].y += 0.01;
        let x3 = KeypointSet::fully_confident(pos.clone()).unwrap();
        assert!((loss_3d(&state, m, &x3).unwrap() - 1e-4).abs() < 1e-12);
        let half = KeypointSet::new(pos, vec![0.5; 26]).unwrap();
        assert!((loss_3d(&state, m, &half).unwrap() - 0.5e-4).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_reported() {
        let m = model();
        let mut state = FitState::rest(24);
        state.translation = Vec3::new(0.0, 0.0, 3.0);
        let x = observe(&state);
        state.translation.z = -3.0;
        assert!(matches!(loss_2d(&state, m, &x, Some(&camera())), Err(Error::BehindCamera { .. })));
        assert!(loss_2d(&state, m, &x, None).is_ok());
    }

    #[test]
    fn priors_and_total() {
        let m = model();
        let rest = FitState::rest(24);
        assert_eq!(prior_pose(&rest, &PosePrior::default(), m), 0.0);
        assert_eq!(prior_shape(&rest), 0.0);
        let mut s = rest.clone();
        s.shape = Shape::unit(0);
        assert_eq!(prior_shape(&s), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = random_state(&mut rng, 0.4);
        let x = observe(&truth);
        let cam = camera();
        let zero_priors = RefineConfig { omega2: 0.0, omega3: 0.0, ..Default::default() };
        let mut perfect = truth.clone();
        perfect.shape = truth.shape;
        let l = total_loss(&perfect, m, &x, Some(&cam), &zero_priors, &PosePrior::default()).unwrap();
        assert!(l < 1e-15);

        let misfit = random_state(&mut rng, 0.4);
        let only3d = RefineConfig { omega1: 1.0, omega2: 0.0, omega3: 0.0, ..Default::default() };
        let a = total_loss(&misfit, m, &x, None, &only3d, &PosePrior::default()).unwrap();
        assert!((a - loss_3d(&misfit, m, &x).unwrap()).abs() < 1e-15);

        let cfg = RefineConfig::default();
        let hand = loss_2d(&misfit, m, &x, Some(&cam)).unwrap()
            + 500.0 * loss_3d(&misfit, m, &x).unwrap()
            + 5.0 * prior_pose(&misfit, &PosePrior::default(), m)
            + 4.78 * prior_shape(&misfit);
        let total = total_loss(&misfit, m, &x, Some(&cam), &cfg, &PosePrior::default()).unwrap();
        assert!((hand - total).abs() <= 1e-12 * hand.abs().max(1.0));
    }

    fn fd_check(state: &FitState, x: &KeypointSet, cam: Option<&CameraIntrinsics>) {
        let m = model();
        let prior = PosePrior::default();
        let g = term_gradients(state, m, x, cam, &prior).unwrap();
        let base = Params::from_state(state);
        let eval = |p: &Params| evaluate_values(m, p, x, cam, &prior).unwrap();
        let terms: [(&str, fn(&LossTerms) -> f64, &Gradient); 4] = [
            ("2d", |t| t.l2d, &g.l2d),
            ("3d", |t| t.l3d, &g.l3d),
            ("pose", |t| t.pose, &g.pose),
            ("shape", |t| t.shape, &g.shape),
        ];
        let flat = base.to_vec();
        let j = base.theta.len();
        for (name, pick, grad) in terms {
            let analytic = grad.to_vec();
            for i in 0..flat.len() {
                let h = if i < 3 * j + SHAPE_DIM { 1e-5 } else { 1e-6 };
                let mut p = base.clone();
                let mut f = flat.clone();
                f[i] += h;
                p.set_from(&f);
                let up = pick(&eval(&p));
                f[i] -= 2.0 * h;
                p.set_from(&f);
                let down = pick(&eval(&p));
                let fd = (up - down) / (2.0 * h);
                let err = (fd - analytic[i]).abs();
                assert!(
                    err < 1e-8 || err < 1e-3 * fd.abs().max(analytic[i].abs()),
                    "{name} slot {i}: fd {fd} analytic {}",
                    analytic[i]
                );
            }
        }
    }

    /// State near its observations: random pose and shape, keypoints
    /// observed with 1 mm noise, parameters nudged off the truth.
    fn near_data(rng: &mut ChaCha8Rng) -> (FitState, KeypointSet) {
        let truth = random_state(rng, 0.5);
        let obs: Vec<Vec3> = truth
            .keypoints(model())
            .unwrap()
            .into_iter()
            .map(|p| p + Vec3::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3)))
            .collect();
        let x = KeypointSet::new(obs, (0..26).map(|_| rng.random_range(0.2..1.0)).collect()).unwrap();
        let mut state = truth.clone();
        let nudged: Vec<Vec3> = truth
            .pose
            .axis_angles()
            .iter()
            .map(|t| t + Vec3::new(rng.random_range(-3e-3..3e-3), rng.random_range(-3e-3..3e-3), rng.random_range(-3e-3..3e-3)))
            .collect();
        state.pose = Pose::from_axis_angles(&nudged);
        for b in state.shape.0.iter_mut() {
            *b += rng.random_range(-0.05..0.05);
        }
        state.scale += rng.random_range(-2e-3..2e-3);
        state.translation += Vec3::new(rng.random_range(-1e-3..1e-3), 0.0, rng.random_range(-1e-3..1e-3));
        (state, x)
    }

    #[test]
    fn gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let (state, x) = near_data(&mut rng);
            fd_check(&state, &x, Some(&camera()));
        }
    }

    #[test]
    fn gradient_vanishes_at_perfect_fit() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut truth = random_state(&mut rng, 0.5);
        truth.shape = Shape::zero();
        let x = observe(&truth);
        let cfg = RefineConfig { omega2: 0.0, omega3: 0.0, ..Default::default() };
        let g = gradient(&truth, m, &x, Some(&camera()), &cfg, &PosePrior::default()).unwrap();
        assert!(g.norm() < 1e-8, "{}", g.norm());
    }

    #[test]
    fn frozen_blocks_are_zero() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = random_state(&mut rng, 0.5);
        let x = observe(&random_state(&mut rng, 0.5));
        let cfg = RefineConfig { freeze: Freeze { shape: true, scale: true, ..Default::default() }, ..Default::default() };
        let g = gradient(&state, m, &x, Some(&camera()), &cfg, &PosePrior::default()).unwrap();
        assert_eq!(g.shape, [0.0; SHAPE_DIM]);
        assert_eq!(g.scale, 0.0);
        assert!(g.pose.iter().any(|v| v.norm() > 0.0));
    }

    #[test]
    fn confidence_scaling_scales_data_gradients() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let state = random_state(&mut rng, 0.5);
        let obs = observe(&random_state(&mut rng, 0.5));
        let conf: Vec<f64> = (0..26).map(|_| rng.random_range(0.1..0.5)).collect();
        let a = KeypointSet::new(obs.positions().to_vec(), conf.clone()).unwrap();
        let b = KeypointSet::new(obs.positions().to_vec(), conf.iter().map(|c| c * 2.0).collect()).unwrap();
        let ga = term_gradients(&state, m, &a, Some(&camera()), &PosePrior::default()).unwrap();
        let gb = term_gradients(&state, m, &b, Some(&camera()), &PosePrior::default()).unwrap();
        for (x, y) in ga.l3d.to_vec().iter().zip(gb.l3d.to_vec()) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-12));
        }
        for (x, y) in ga.l2d.to_vec().iter().zip(gb.l2d.to_vec()) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-12));
        }
    }

    #[test]
    fn refine_keeps_optimal_state() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut truth = random_state(&mut rng, 0.4);
        truth.shape = Shape::zero();
        let x = observe(&truth);
        let cfg = RefineConfig { omega2: 0.0, omega3: 0.0, ..Default::default() };
        let out = refine(&truth, m, &x, Some(&camera()), &cfg, &PosePrior::default()).unwrap();
        assert_eq!(out.trace.len(), 100);
        assert!(out.best_loss <= out.initial_loss);
        let a = Params::from_state(&truth).to_vec();
        let b = Params::from_state(&out.state).to_vec();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn refine_improves_from_kama() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut truth = random_state(&mut rng, 0.3);
        truth.shape = Shape::zero();
        let x = observe(&truth);
        let init = kama(m, &x, &ArticulateConfig::default()).unwrap();
        let out = refine(&init, m, &x, Some(&camera()), &RefineConfig::default(), &PosePrior::default()).unwrap();
        assert!(out.best_loss <= out.initial_loss);
        let running_min: Vec<f64> = out
            .trace
            .iter()
            .scan(out.initial_loss, |acc, l| {
                *acc = acc.min(*l);
                Some(*acc)
            })
            .collect();
        assert!(running_min.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*running_min.last().unwrap(), out.best_loss);
    }

    #[test]
    fn converges_from_perturbed_init() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut truth = random_state(&mut rng, 0.5);
        truth.shape = Shape::zero();
        let x = observe(&truth);
        let mut init = truth.clone();
        let d = 0.1 / 3f64.sqrt();
        let perturbed: Vec<Vec3> = truth
            .pose
            .axis_angles()
            .iter()
            .map(|t| t + Vec3::new(rng.random_range(-d..d), rng.random_range(-d..d), rng.random_range(-d..d)))
            .collect();
        init.pose = Pose::from_axis_angles(&perturbed);
        let cfg = RefineConfig { omega2: 0.0, omega3: 0.0, iterations: 500, ..Default::default() };
        let out = refine(&init, m, &x, None, &cfg, &PosePrior::default()).unwrap();
        assert!(out.best_loss < 1e-4 * out.initial_loss, "{} -> {}", out.initial_loss, out.best_loss);
    }

    #[test]
    fn config_validation() {
        assert!(RefineConfig::default().validate().is_ok());
        assert!(RefineConfig { omega1: -1.0, ..Default::default() }.validate().is_err());
        assert!(RefineConfig { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(RefineConfig { step_size: 0.0, ..Default::default() }.validate().is_err());
    }
}
