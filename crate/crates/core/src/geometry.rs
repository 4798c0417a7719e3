//! Quaternion and rigid-body primitives.
//!
//! Orientation perturbations are left-multiplicative and expressed in the
//! world (left) frame: `q = Exp(δα) ⊗ q̄`. Every Jacobian in the crate follows
//! this convention, and pose perturbations are ordered `[δr, δα]`.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

/// Angles below this use series expansions in `exp`/`log`.
pub const SMALL_ANGLE: f64 = 1e-8;

pub type Quat = UnitQuaternion<f64>;

/// Flips the sign so that `w >= 0`.
pub fn canonical(q: Quat) -> Quat {
    if q.w < 0.0 {
        Quat::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Renormalizes and canonicalizes.
pub fn normalized(q: Quaternion<f64>) -> Quat {
    canonical(Quat::new_normalize(q))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Quaternion group exponential of a rotation vector.
pub fn exp(v: &Vector3<f64>) -> Quat {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let q = if theta < SMALL_ANGLE {
        let half = 0.5 * (1.0 - theta2 / 24.0);
        Quaternion::new(1.0 - theta2 / 8.0, half * v.x, half * v.y, half * v.z)
    } else {
        let (s, c) = (0.5 * theta).sin_cos();
        let k = s / theta;
        Quaternion::new(c, k * v.x, k * v.y, k * v.z)
    };
    normalized(q)
}

/// Quaternion group logarithm; the result has norm at most π.
pub fn log(q: &Quat) -> Vector3<f64> {
    let q = canonical(*q);
    let xyz = Vector3::new(q.i, q.j, q.k);
    let s = xyz.norm();
    if s < SMALL_ANGLE {
        // atan2(s, w) / s ≈ (1 - s²/(3w²)) / w
        let w = q.w;
        xyz * (2.0 / w) * (1.0 - s * s / (3.0 * w * w))
    } else {
        let angle = 2.0 * s.atan2(q.w);
        xyz * (angle / s)
    }
}

/// `q ⊟ q' = Log(q ⊗ q'⁻¹)`.
pub fn box_minus(q: &Quat, q_prime: &Quat) -> Vector3<f64> {
    log(&(q * q_prime.inverse()))
}

/// `Exp(δα) ⊗ q`, renormalized.
pub fn box_plus(q: &Quat, delta: &Vector3<f64>) -> Quat {
    normalized((exp(delta) * q).into_inner())
}

/// Left Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(J_l(φ) δ) Exp(φ)`.
pub fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let k2 = k * k;
    if theta2 < 1e-10 {
        return Matrix3::identity() + 0.5 * k + k2 / 6.0;
    }
    let theta = theta2.sqrt();
    Matrix3::identity()
        + (1.0 - theta.cos()) / theta2 * k
        + (theta - theta.sin()) / (theta2 * theta) * k2
}

pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let k2 = k * k;
    if theta2 < 1e-10 {
        return Matrix3::identity() - 0.5 * k + k2 / 12.0;
    }
    let theta = theta2.sqrt();
    let coeff = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() - 0.5 * k + coeff * k2
}

pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    left_jacobian(&(-phi))
}

/// Heading angle about the world z axis.
pub fn yaw(q: &Quat) -> f64 {
    (2.0 * (q.w * q.k + q.i * q.j)).atan2(1.0 - 2.0 * (q.j * q.j + q.k * q.k))
}

pub fn yaw_rotation(yaw: f64) -> Quat {
    exp(&Vector3::new(0.0, 0.0, yaw))
}

/// Rigid transform `T_AB`: position `r` of B's origin in A, orientation `q` of B relative to A.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub r: Vector3<f64>,
    pub q: Quat,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(r: Vector3<f64>, q: Quat) -> Self {
        Self { r, q: canonical(q) }
    }

    pub fn identity() -> Self {
        Self {
            r: Vector3::zeros(),
            q: Quat::identity(),
        }
    }

    pub fn from_translation(r: Vector3<f64>) -> Self {
        Self {
            r,
            q: Quat::identity(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    /// `T_AB ⊗ T_BC = T_AC`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: self.r + self.q * other.r,
            q: normalized((self.q * other.q).into_inner()),
        }
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.q.inverse();
        Pose {
            r: -(qi * self.r),
            q: canonical(qi),
        }
    }

    /// Applies the transform to a homogeneous point.
    pub fn transform_point(&self, p: &Vector4<f64>) -> Vector4<f64> {
        let xyz = self.q * p.xyz() + self.r * p.w;
        Vector4::new(xyz.x, xyz.y, xyz.z, p.w)
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.q * p + self.r
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.r);
        m
    }

    /// Perturbs with `[δr, δα]`: `r ← r + δr`, `q ← Exp(δα) ⊗ q`.
    pub fn box_plus(&self, delta: &Vector6<f64>) -> Pose {
        Pose {
            r: self.r + delta.fixed_rows::<3>(0),
            q: box_plus(&self.q, &delta.fixed_rows::<3>(3).into_owned()),
        }
    }

    /// `[r - r'; q ⊟ q']`, the inverse of [`Pose::box_plus`].
    pub fn box_minus(&self, other: &Pose) -> Vector6<f64> {
        let dr = self.r - other.r;
        let da = box_minus(&self.q, &other.q);
        Vector6::new(dr.x, dr.y, dr.z, da.x, da.y, da.z)
    }

    pub fn rotation_angle(&self) -> f64 {
        log(&self.q).norm()
    }
}
