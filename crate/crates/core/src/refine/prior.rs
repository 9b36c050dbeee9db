use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geom3d::Vec3;
use crate::model::KinematicTree;

/// Pose prior over local axis-angle vectors.
#[derive(Debug, Clone, Default)]
pub enum PosePrior {
    /// `Σ_j ‖θ_j‖²` over every non-root joint.
    #[default]
    QuadraticToRest,
    GaussianMixture(GaussianMixture),
}

impl PosePrior {
    /// Value and gradient with respect to each joint's axis-angle vector.
    pub fn value_and_gradient(&self, theta: &[Vec3], tree: &KinematicTree) -> (f64, Vec<Vec3>) {
        let mut grad = vec![Vec3::zeros(); theta.len()];
        match self {
            PosePrior::QuadraticToRest => {
                let mut value = 0.0;
                for j in 0..theta.len() {
                    if tree.joint_parent(j).is_some() {
                        value += theta[j].norm_squared();
                        grad[j] = theta[j] * 2.0;
                    }
                }
                (value, grad)
            }
            PosePrior::GaussianMixture(g) => {
                let x = DVector::from_iterator(
                    3 * g.joints.len(),
                    g.joints.iter().flat_map(|j| theta[*j].iter().copied()),
                );
                let (value, gx) = g.neg_log_density(&x);
                for (i, j) in g.joints.iter().enumerate() {
                    grad[*j] = Vec3::new(gx[3 * i], gx[3 * i + 1], gx[3 * i + 2]);
                }
                (value, grad)
            }
        }
    }

    pub fn value(&self, theta: &[Vec3], tree: &KinematicTree) -> f64 {
        self.value_and_gradient(theta, tree).0
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureFile {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    precisions_cholesky: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    joints: Option<Vec<String>>,
}

/// Gaussian mixture over concatenated joint axis-angle vectors.
///
/// Each component stores a triangular factor `U` of its precision
/// (`Λ = U Uᵀ`), so `log N(x) = log|U| − ½‖Uᵀ(x − μ)‖² − (d/2)·log 2π`.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    joints: Vec<usize>,
    means: Vec<DVector<f64>>,
    factors: Vec<DMatrix<f64>>,
    /// `log w + log|U| − (d/2) log 2π` per component.
    log_consts: Vec<f64>,
}

fn load_err(msg: impl Into<String>) -> Error {
    Error::PriorLoad(msg.into())
}

fn is_triangular(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    let lower = (0..n).all(|r| (r + 1..n).all(|c| m[(r, c)] == 0.0));
    let upper = (0..n).all(|r| (0..r).all(|c| m[(r, c)] == 0.0));
    lower || upper
}

impl GaussianMixture {
    /// Parses a mixture document. Without a `joints` list the mixture covers
    /// every non-root joint in model order.
    pub fn from_json(text: &str, tree: &KinematicTree) -> Result<Self> {
        let file: MixtureFile = serde_json::from_str(text).map_err(|e| load_err(e.to_string()))?;
        let joints: Vec<usize> = match &file.joints {
            Some(names) => names
                .iter()
                .map(|n| tree.joint_index(n).ok_or_else(|| load_err(format!("unknown joint `{n}`"))))
                .collect::<Result<_>>()?,
            None => (0..tree.joint_count()).filter(|j| tree.joint_parent(*j).is_some()).collect(),
        };
        let mut seen = vec![false; tree.joint_count()];
        for j in &joints {
            if std::mem::replace(&mut seen[*j], true) {
                return Err(load_err(format!("joint `{}` listed twice", tree.joint_name(*j))));
            }
        }
        let d = 3 * joints.len();
        let g = file.weights.len();
        if g == 0 || d == 0 {
            return Err(load_err("mixture has no components or no joints"));
        }
        if file.means.len() != g || file.precisions_cholesky.len() != g {
            return Err(load_err(format!(
                "{g} weights but {} means and {} precision factors",
                file.means.len(),
                file.precisions_cholesky.len()
            )));
        }
        if file.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(load_err("weights must be positive"));
        }
        let total: f64 = file.weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(load_err(format!("weights sum to {total}")));
        }
        let mut means = Vec::with_capacity(g);
        let mut factors = Vec::with_capacity(g);
        let mut log_consts = Vec::with_capacity(g);
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        for c in 0..g {
            let mean = &file.means[c];
            if mean.len() != d || mean.iter().any(|v| !v.is_finite()) {
                return Err(load_err(format!("mean {c} must have {d} finite entries")));
            }
            let rows = &file.precisions_cholesky[c];
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(load_err(format!("precision factor {c} must be {d}x{d}")));
            }
            let u = DMatrix::from_fn(d, d, |r, col| rows[r][col]);
            if u.iter().any(|v| !v.is_finite()) || !is_triangular(&u) {
                return Err(load_err(format!("precision factor {c} must be finite and triangular")));
            }
            if (0..d).any(|i| !(u[(i, i)] > 0.0)) {
                return Err(load_err(format!("precision factor {c} needs a positive diagonal")));
            }
            let log_det: f64 = (0..d).map(|i| u[(i, i)].ln()).sum();
            log_consts.push(file.weights[c].ln() + log_det - d as f64 * half_log_2pi);
            means.push(DVector::from_column_slice(mean));
            factors.push(u);
        }
        Ok(Self {
            joints,
            means,
            factors,
            log_consts,
        })
    }

    pub fn load(path: &Path, tree: &KinematicTree) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, tree)
    }

    pub fn joints(&self) -> &[usize] {
        &self.joints
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    /// `−log Σ_g w_g N(x; μ_g, Λ_g⁻¹)` and its gradient.
    pub fn neg_log_density(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut ys = Vec::with_capacity(self.means.len());
        let mut exps = Vec::with_capacity(self.means.len());
        for ((mu, u), c) in self.means.iter().zip(&self.factors).zip(&self.log_consts) {
            let y = u.tr_mul(&(x - mu));
            exps.push(c - 0.5 * y.norm_squared());
            ys.push(y);
        }
        let top = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = exps.iter().map(|e| (e - top).exp()).sum();
        let value = -(top + sum.ln());
        let mut grad = DVector::zeros(x.len());
        for ((e, y), u) in exps.iter().zip(&ys).zip(&self.factors) {
            let r = (e - top).exp() / sum;
            grad += u * y * r;
        }
        (value, grad)
    }
}
