//! Rigid transforms and the six-parameter pose representation.
//!
//! A [`Twist`] is an axis-angle rotation `u` plus a translation `v`. It maps to
//! a transform whose rotation is `Rodrigues(u)` and whose translation is `v`
//! directly; the coupled se(3) exponential is intentionally not used.
//!
//! A stored transform `T_{ref->live}` maps points expressed in the reference
//! camera frame into the live camera frame.

use core::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::math;

pub type Matrix3x6 = SMatrix<f64, 3, 6>;

/// Rotations below this magnitude use the second-order Taylor branch.
const SMALL_ANGLE: f64 = 1e-8;

/// Orthonormality tolerance accepted for rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    u: Vector3<f64>,
    v: Vector3<f64>,
}

impl Twist {
    /// Builds a twist; `|u|` must be strictly below pi and all entries finite.
    pub fn new(u: Vector3<f64>, v: Vector3<f64>) -> Result<Self> {
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("twist"));
        }
        let angle = u.norm();
        if angle >= PI {
            return Err(Error::OutOfDomain(angle));
        }
        Ok(Self { u, v })
    }

    pub fn zero() -> Self {
        Self {
            u: Vector3::zeros(),
            v: Vector3::zeros(),
        }
    }

    /// `[u0, u1, u2, v0, v1, v2]`.
    pub fn from_array(p: [f64; 6]) -> Result<Self> {
        Self::new(Vector3::new(p[0], p[1], p[2]), Vector3::new(p[3], p[4], p[5]))
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.u.x, self.u.y, self.u.z, self.v.x, self.v.y, self.v.z]
    }

    pub fn u(&self) -> &Vector3<f64> {
        &self.u
    }

    pub fn v(&self) -> &Vector3<f64> {
        &self.v
    }

    /// Recovers the twist of a transform (inverse of [`twist_to_transform`]).
    pub fn from_transform(t: &SE3Transform) -> Result<Self> {
        Self::new(rotation_log(&t.rotation)?, t.translation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Transform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl SE3Transform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checks `R^T R = I` and `det R = +1` within [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("transform"));
        }
        if orthonormality_error(&rotation) > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform("rotation is not orthonormal"));
        }
        if (rotation.determinant() - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform("rotation determinant is not +1"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Projects a nearly orthonormal matrix onto SO(3) before validating.
    ///
    /// Fails if `rotation` deviates from orthonormality by more than `tolerance`.
    pub fn from_approximate(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tolerance: f64,
    ) -> Result<Self> {
        if rotation.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("transform"));
        }
        if orthonormality_error(&rotation) > tolerance || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidTransform("rotation outside orthonormality tolerance"));
        }
        Self::new(orthonormalize(rotation), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle in radians, accurate near zero where `acos` of the
    /// trace loses half the digits.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() * 0.5;
        math::atan2(s, (r.trace() - 1.0) * 0.5)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &SE3Transform) -> SE3Transform {
        compose(self, other)
    }

    pub fn inverse(&self) -> SE3Transform {
        invert(self)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        transform_point(self, p)
    }
}

/// Frobenius norm of `R^T R - I`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

/// Iterated symmetric orthogonalization `R <- R (3I - R^T R) / 2`.
fn orthonormalize(mut r: Matrix3<f64>) -> Matrix3<f64> {
    for _ in 0..8 {
        if orthonormality_error(&r) < 1e-15 {
            break;
        }
        r = r * (Matrix3::identity() * 3.0 - r.transpose() * r) * 0.5;
    }
    r
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues' formula.
pub fn rodrigues(u: &Vector3<f64>) -> Matrix3<f64> {
    let k = skew(u);
    let k2 = k * k;
    let theta2 = u.norm_squared();
    if math::sqrt(theta2) < SMALL_ANGLE {
        return Matrix3::identity() + k + k2 * 0.5;
    }
    let theta = math::sqrt(theta2);
    Matrix3::identity() + k * (math::sin(theta) / theta) + k2 * ((1.0 - math::cos(theta)) / theta2)
}

/// Right Jacobian of SO(3): `d exp(u + d) ≈ exp(u) exp(J_r(u) d)`.
fn right_jacobian(u: &Vector3<f64>) -> Matrix3<f64> {
    let k = skew(u);
    let k2 = k * k;
    let theta2 = u.norm_squared();
    if math::sqrt(theta2) < SMALL_ANGLE {
        return Matrix3::identity() - k * 0.5 + k2 * (1.0 / 6.0);
    }
    let theta = math::sqrt(theta2);
    Matrix3::identity() - k * ((1.0 - math::cos(theta)) / theta2)
        + k2 * ((theta - math::sin(theta)) / (theta2 * theta))
}

/// Axis-angle vector of a rotation matrix, valid for angles below pi.
fn rotation_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = math::acos(c);
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-6 {
        // sin(theta)/theta ≈ 1 - theta^2/6
        return Ok(w * 0.5 * (1.0 + theta * theta / 6.0));
    }
    if PI - theta < 1e-6 {
        return Err(Error::OutOfDomain(theta));
    }
    Ok(w * (theta / (2.0 * math::sin(theta))))
}

pub fn twist_to_transform(t: &Twist) -> SE3Transform {
    SE3Transform {
        rotation: rodrigues(&t.u),
        translation: t.v,
    }
}

/// Applies `b` then `a`.
pub fn compose(a: &SE3Transform, b: &SE3Transform) -> SE3Transform {
    let mut rotation = a.rotation * b.rotation;
    if orthonormality_error(&rotation) > 1e-12 {
        rotation = orthonormalize(rotation);
    }
    SE3Transform {
        rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert(t: &SE3Transform) -> SE3Transform {
    let rt = t.rotation.transpose();
    SE3Transform {
        rotation: rt,
        translation: -(rt * t.translation),
    }
}

#[inline]
pub fn transform_point(t: &SE3Transform, p: &Vector3<f64>) -> Vector3<f64> {
    t.rotation * p + t.translation
}

/// `d(R(u) p + v) / d[u, v]` as a 3x6 matrix.
///
/// The rotation block is `-R [p]x J_r(u)`; the translation block is identity.
pub fn twist_jacobians(t: &Twist, p: &Vector3<f64>) -> Matrix3x6 {
    let r = rodrigues(&t.u);
    let rot_block = -(r * skew(p) * right_jacobian(&t.u));
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot_block);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}
