//! Closed-form point set alignment: weighted rotation (Kabsch), scale and
//! translation only, and full similarity (Procrustes).

use nalgebra::Matrix3;

use super::rotation::{Rotation, Vec3};
use crate::error::{Error, Result};

const MIN_WEIGHT_SUM: f64 = 1e-9;

fn check_pairs(src: &[Vec3], dst: &[Vec3]) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::DegenerateInput(format!(
            "point lists differ in length ({} vs {})",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "need at least 2 points, got {}",
            src.len()
        )));
    }
    Ok(())
}

fn weighted_centroid(points: &[Vec3], weights: &[f64], total: f64) -> Vec3 {
    points
        .iter()
        .zip(weights)
        .fold(Vec3::zeros(), |acc, (p, w)| acc + p * *w)
        / total
}

/// Rotation minimizing `Σ wᵢ‖R·srcᵢ − dstᵢ‖²` for vectors that already share
/// a common origin (no centering is applied).
///
/// The result always has `det = +1`: if the SVD solution is a reflection, the
/// singular vector paired with the smallest singular value is flipped.
pub fn weighted_rotation_fit(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Result<Rotation> {
    if src.len() != dst.len() || src.len() != weights.len() {
        return Err(Error::DegenerateInput(format!(
            "mismatched lengths: {} source, {} target, {} weights",
            src.len(),
            dst.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::DegenerateInput("negative or NaN weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > MIN_WEIGHT_SUM) {
        return Err(Error::DegenerateInput(format!("weight sum {total:e} is too small")));
    }

    let mut cov = Matrix3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        cov += (s * d.transpose()) * *w;
    }
    if !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("covariance in rotation fit".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateInput("SVD did not converge".into())),
    };
    let v = v_t.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(2);
        let mut flip = Matrix3::identity();
        flip[(smallest, smallest)] = -1.0;
        r = v * flip * u.transpose();
    }
    Ok(Rotation::from_matrix(&r))
}

/// Weighted Kabsch: the rotation best aligning `src` onto `dst` after both
/// are centered on their weighted centroids.
pub fn weighted_kabsch(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Result<Rotation> {
    check_pairs(src, dst)?;
    if weights.len() != src.len() {
        return Err(Error::DegenerateInput(format!(
            "{} weights for {} points",
            weights.len(),
            src.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > MIN_WEIGHT_SUM) {
        return Err(Error::DegenerateInput(format!("weight sum {total:e} is too small")));
    }
    let cs = weighted_centroid(src, weights, total);
    let cd = weighted_centroid(dst, weights, total);
    let src_c: Vec<Vec3> = src.iter().map(|p| p - cs).collect();
    let dst_c: Vec<Vec3> = dst.iter().map(|p| p - cd).collect();
    weighted_rotation_fit(&src_c, &dst_c, weights)
}

/// Least-squares `(s, t)` for `s·src + t ≈ dst`, with no rotation.
pub fn fit_scale_translation(src: &[Vec3], dst: &[Vec3]) -> Result<(f64, Vec3)> {
    check_pairs(src, dst)?;
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let s = s - cs;
        num += s.dot(&(d - cd));
        den += s.norm_squared();
    }
    if !(den > 1e-18) {
        return Err(Error::DegenerateInput("all source points coincide".into()));
    }
    let scale = num / den;
    if !(scale > 0.0) {
        return Err(Error::DegenerateInput(format!("non-positive scale {scale}")));
    }
    Ok((scale, cd - cs * scale))
}

/// A similarity transform `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub rotation: Rotation,
    pub scale: f64,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation.rotate(x) * self.scale + self.translation
    }
}

/// Full similarity alignment minimizing `‖s·R·src + t − dst‖²`.
pub fn procrustes_align(src: &[Vec3], dst: &[Vec3]) -> Result<Similarity> {
    check_pairs(src, dst)?;
    let weights = vec![1.0; src.len()];
    let rotation = weighted_kabsch(src, dst, &weights)?;
    let rotated: Vec<Vec3> = src.iter().map(|p| rotation.rotate(p)).collect();
    let (scale, translation) = fit_scale_translation(&rotated, dst)?;
    Ok(Similarity {
        rotation,
        scale,
        translation,
    })
}
