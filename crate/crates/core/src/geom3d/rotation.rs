use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Below this norm a direction or cross product is treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-9;

/// A 3D rotation stored as a unit quaternion `(w, x, y, z)`.
///
/// Every constructor and every composition renormalizes, so the stored
/// quaternion never drifts off the unit sphere along long kinematic chains.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 3]", from = "[f64; 3]")]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let aa = self.to_axis_angle();
        write!(f, "Rotation(aa=[{:.6}, {:.6}, {:.6}])", aa.x, aa.y, aa.z)
    }
}

impl Rotation {
    pub const fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Builds a rotation from raw quaternion components, normalizing them.
    /// A zero quaternion maps to the identity.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Self::identity();
        }
        Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    /// Builds a rotation from an axis-angle vector (unit axis scaled by the
    /// angle in radians).
    pub fn from_axis_angle(v: &Vec3) -> Self {
        let angle = v.norm();
        let half = 0.5 * angle;
        // sin(a/2)/a, with its series near zero
        let k = if angle < 1e-8 {
            0.5 - angle * angle / 48.0
        } else {
            half.sin() / angle
        };
        Self::from_quaternion(half.cos(), v.x * k, v.y * k, v.z * k)
    }

    pub fn from_axis_and_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n < DEGENERATE_NORM {
            return Self::identity();
        }
        Self::from_axis_angle(&(axis * (angle / n)))
    }

    /// Converts an orthonormal matrix with positive determinant to a rotation.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Self::from_quaternion(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Self::from_quaternion(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Self::from_quaternion(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Self::from_quaternion(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        }
    }

    /// Quaternion components `[w, x, y, z]`.
    pub fn quaternion(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Axis-angle vector with angle in `[0, π]`.
    pub fn to_axis_angle(&self) -> Vec3 {
        // q and -q are the same rotation; pick w >= 0 for the short way round
        let (w, v) = if self.w < 0.0 {
            (-self.w, Vec3::new(-self.x, -self.y, -self.z))
        } else {
            (self.w, Vec3::new(self.x, self.y, self.z))
        };
        let n = v.norm();
        if n < 1e-12 {
            return v * (2.0 / w);
        }
        let angle = 2.0 * n.atan2(w);
        v * (angle / n)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let n = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * n.atan2(self.w.abs())
    }

    /// Geodesic distance on SO(3) between two rotations, in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).angle()
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn inverse(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Applies the rotation to a vector.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let q = Vec3::new(self.x, self.y, self.z);
        let t = 2.0 * q.cross(v);
        v + self.w * t + q.cross(&t)
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let (a, b) = (self, other);
        Self::from_quaternion(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;

    fn mul(self, rhs: Vec3) -> Vec3 {
        self.rotate(&rhs)
    }
}

impl From<Rotation> for [f64; 3] {
    fn from(r: Rotation) -> Self {
        let v = r.to_axis_angle();
        [v.x, v.y, v.z]
    }
}

impl From<[f64; 3]> for Rotation {
    fn from(v: [f64; 3]) -> Self {
        Rotation::from_axis_angle(&Vec3::new(v[0], v[1], v[2]))
    }
}

/// Composition `a · b`.
pub fn compose(a: &Rotation, b: &Rotation) -> Rotation {
    a.compose(b)
}

pub fn inverse(r: &Rotation) -> Rotation {
    r.inverse()
}

/// Rotates `v` with the Rodrigues formula on the axis-angle form of `r`.
pub fn rodrigues_rotate(r: &Rotation, v: &Vec3) -> Vec3 {
    let aa = r.to_axis_angle();
    let angle = aa.norm();
    if angle < 1e-15 {
        return *v;
    }
    let k = aa / angle;
    let (s, c) = angle.sin_cos();
    v * c + k.cross(v) * s + k * (k.dot(v) * (1.0 - c))
}

/// Unit vector perpendicular to `v`, built from the basis axis along which
/// `v` has the smallest absolute component.
pub fn perpendicular_axis(v: &Vec3) -> Vec3 {
    let a = v.map(f64::abs);
    let basis = if a.x <= a.y && a.x <= a.z {
        Vec3::x()
    } else if a.y <= a.z {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let u = v.normalize();
    (basis - u * u.dot(&basis)).normalize()
}

/// The minimal rotation taking the direction of `v1` onto the direction of `v2`.
///
/// Angle is the arccos of the clamped normalized dot product, the axis is the
/// normalized cross product. Antiparallel inputs get a half-turn about
/// [`perpendicular_axis`] of `v1`.
pub fn axis_angle_between(v1: &Vec3, v2: &Vec3) -> Result<Rotation> {
    let (n1, n2) = (v1.norm(), v2.norm());
    if !(n1 > DEGENERATE_NORM) || !(n2 > DEGENERATE_NORM) {
        return Err(Error::DegenerateInput(format!(
            "direction with near-zero norm ({n1:e}, {n2:e})"
        )));
    }
    let (a, b) = (v1 / n1, v2 / n2);
    let cross = a.cross(&b);
    let cn = cross.norm();
    let cos = a.dot(&b).clamp(-1.0, 1.0);
    if cn < DEGENERATE_NORM {
        if cos > 0.0 {
            return Ok(Rotation::identity());
        }
        return Ok(Rotation::from_axis_and_angle(
            &perpendicular_axis(&a),
            std::f64::consts::PI,
        ));
    }
    Ok(Rotation::from_axis_angle(&(cross * (cos.acos() / cn))))
}

/// Splits `r` into `(swing, twist)` with `r = swing · twist`, where `twist`
/// rotates about `axis` and `swing` rotates about an axis perpendicular to it.
pub fn swing_twist_decompose(r: &Rotation, axis: &Vec3) -> Result<(Rotation, Rotation)> {
    let n = axis.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::DegenerateInput(format!(
            "twist axis must be unit length, got norm {n}"
        )));
    }
    let [w, x, y, z] = r.quaternion();
    let proj = axis * Vec3::new(x, y, z).dot(axis);
    let len = (w * w + proj.norm_squared()).sqrt();
    // a half-turn about a perpendicular axis has no twist component
    let twist = if len < 1e-12 {
        Rotation::identity()
    } else {
        Rotation::from_quaternion(w, proj.x, proj.y, proj.z)
    };
    let swing = *r * twist.inverse();
    Ok((swing, twist))
}
