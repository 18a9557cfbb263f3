//! Rotation, rigid-body and similarity transforms with their Lie-group maps.
//!
//! Three groups are provided:
//!
//! * [`Rot3`] — 3D rotations SO(3), stored as a unit quaternion.
//! * [`SE3`] — rigid transforms, `p ↦ R·p + t`.
//! * [`Sim3`] — similarity transforms, `p ↦ s·R·p + t` with `s > 0`.
//!
//! All poses in this crate follow the *world-from-camera* convention: the
//! translation of a camera pose is the camera center expressed in the world
//! (or map) frame, and `pose.act(p_camera)` maps camera-frame points into
//! that frame.
//!
//! # Tangent parameterization
//!
//! A Sim(3) tangent element is the 7-vector `ξ = (ω, σ, ν)` — rotation
//! vector, log-scale and translational part, in that order. Its matrix form
//! is
//!
//! ```text
//!         ⎡ [ω]× + σI   ν ⎤
//!   ξ^ =  ⎣     0       0 ⎦ ,
//! ```
//!
//! and the exponential map has the closed form
//!
//! ```text
//!   exp(ξ) = ⎡ e^σ·exp([ω]×)   W·ν ⎤      W = ∫₀¹ e^{σu}·exp(u[ω]×) du
//!            ⎣       0          1  ⎦ ,      = a·[ω]× + b·[ω]×² + c·I .
//! ```
//!
//! The scalar coefficients `a`, `b`, `c` have removable singularities at
//! `θ = ‖ω‖ → 0` and `σ → 0`; below [`SMALL_ANGLE`] / [`SMALL_SIGMA`] they
//! are replaced by Taylor limits carrying the first-order correction term,
//! which keeps the branch switch-over error at the 1e-12 level. SE(3) uses
//! the `σ = 0` specialization of the same machinery.
//!
//! The logarithm inverts the construction: `ω` from the quaternion, `σ =
//! ln s`, and `ν = W⁻¹·t`. `W` is invertible for any rotation angle below π;
//! at exactly π the rotation axis — and with it the principal logarithm —
//! is ambiguous, which [`Sim3::log`] reports as an error.

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Unit, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// Below this rotation angle (radians) trigonometric coefficients switch to
/// their Taylor limits.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Below this |log-scale| the scale-dependent coefficients switch to their
/// Taylor limits.
pub const SMALL_SIGMA: f64 = 1e-6;

/// Rotations closer than this to the π branch cut make the principal
/// logarithm ambiguous.
const PI_BRANCH_MARGIN: f64 = 1e-9;

/// Errors from manifold operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifoldError {
    /// The rotation angle is within [`PI_BRANCH_MARGIN`] of π, where the
    /// principal logarithm branch is ambiguous.
    #[error("rotation angle {angle} rad is at the π branch cut; logarithm is ambiguous")]
    LogBranchAmbiguous { angle: f64 },
}

/// Skew-symmetric (cross-product) matrix of `v`: `hat(v)·x = v × x`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

// ---------------------------------------------------------------------------
// Rot3
// ---------------------------------------------------------------------------

/// A 3D rotation, stored as a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot3(UnitQuaternion<f64>);

impl Rot3 {
    pub fn identity() -> Self {
        Rot3(UnitQuaternion::identity())
    }

    /// Builds a rotation from quaternion coefficients `(w, x, y, z)`,
    /// normalizing them.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        Rot3(UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            w, x, y, z,
        )))
    }

    /// Quaternion coefficients as `(w, x, y, z)`.
    pub fn quaternion_wxyz(&self) -> (f64, f64, f64, f64) {
        let q = self.0.quaternion();
        (q.w, q.i, q.j, q.k)
    }

    /// Wraps quaternion coefficients that are already unit length without
    /// renormalizing, preserving their exact bit patterns (used by file
    /// round-trips). The caller must have verified `‖q‖ ≈ 1`.
    pub fn from_quaternion_unchecked(w: f64, x: f64, y: f64, z: f64) -> Self {
        Rot3(UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(
            w, x, y, z,
        )))
    }

    /// Builds a rotation from an orthonormal matrix. The caller must have
    /// verified orthonormality; small rounding errors are absorbed by the
    /// quaternion conversion.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Rot3(UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(*m),
        ))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Rot3(q)
    }

    pub fn unit_quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    /// Exponential map: rotation vector (axis times angle) to rotation.
    pub fn exp(omega: &Vector3<f64>) -> Self {
        Rot3(UnitQuaternion::from_scaled_axis(*omega))
    }

    /// Rotation about `axis` by `angle` radians.
    pub fn from_axis_angle(axis: &Unit<Vector3<f64>>, angle: f64) -> Self {
        Rot3(UnitQuaternion::from_axis_angle(axis, angle))
    }

    /// Principal logarithm as a rotation vector with angle in `[0, π]`.
    /// At exactly π the axis sign is implementation-defined but still
    /// satisfies `exp(log(R)) = R`.
    pub fn log(&self) -> Vector3<f64> {
        self.0.scaled_axis()
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.0.angle()
    }

    /// The rotation taking direction `a` to direction `b` along the
    /// shortest arc, if the two are not anti-parallel.
    pub fn rotation_between(a: &Vector3<f64>, b: &Vector3<f64>) -> Option<Self> {
        UnitQuaternion::rotation_between(a, b).map(Rot3)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        *self.0.to_rotation_matrix().matrix()
    }

    /// Group composition `self ∘ other`, renormalizing the quaternion so
    /// arbitrarily long chains stay on the unit sphere.
    pub fn compose(&self, other: &Rot3) -> Rot3 {
        Rot3(UnitQuaternion::new_normalize(
            (self.0 * other.0).into_inner(),
        ))
    }

    pub fn inverse(&self) -> Rot3 {
        Rot3(self.0.inverse())
    }

    pub fn act(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.0 * p
    }

    /// Embeds the rotation as a similarity with zero translation and unit
    /// scale.
    pub fn to_sim3(&self) -> Sim3 {
        Sim3 {
            rotation: *self,
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// SE3
// ---------------------------------------------------------------------------

/// A rigid-body transform `p ↦ R·p + t`.
///
/// Used for camera poses (world-from-camera; `translation` is the camera
/// center) and relative pose snapshots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3 {
    pub rotation: Rot3,
    pub translation: Vector3<f64>,
}

impl SE3 {
    pub fn identity() -> Self {
        SE3 {
            rotation: Rot3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_parts(rotation: Rot3, translation: Vector3<f64>) -> Self {
        SE3 {
            rotation,
            translation,
        }
    }

    /// Exponential map from a tangent `[ω, ν]`.
    pub fn exp(xi: &Vector6<f64>) -> Self {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let nu = Vector3::new(xi[3], xi[4], xi[5]);
        let w = w_matrix(&omega, 0.0);
        SE3 {
            rotation: Rot3::exp(&omega),
            translation: w * nu,
        }
    }

    /// Principal logarithm as `[ω, ν]`. Total; at a π rotation the axis
    /// sign is implementation-defined.
    pub fn log(&self) -> Vector6<f64> {
        let omega = self.rotation.log();
        let w = w_matrix(&omega, 0.0);
        let nu = w
            .try_inverse()
            .expect("W matrix is invertible below the π branch cut")
            * self.translation;
        Vector6::new(omega.x, omega.y, omega.z, nu.x, nu.y, nu.z)
    }

    pub fn compose(&self, other: &SE3) -> SE3 {
        SE3 {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.act(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3 {
        let rot_inv = self.rotation.inverse();
        SE3 {
            translation: -rot_inv.act(&self.translation),
            rotation: rot_inv,
        }
    }

    pub fn act(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.act(p) + self.translation
    }

    /// Homogeneous 4×4 matrix `[R t; 0 1]`.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_sim3(&self) -> Sim3 {
        Sim3 {
            rotation: self.rotation,
            translation: self.translation,
            scale: 1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Sim3
// ---------------------------------------------------------------------------

/// A similarity transform `p ↦ s·R·p + t`, `s > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub rotation: Rot3,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

/// Tangent element `ξ = (ω, σ, ν)` of Sim(3).
///
/// The packed vector order is `[ω₁, ω₂, ω₃, σ, ν₁, ν₂, ν₃]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Tangent {
    /// Rotation vector.
    pub omega: Vector3<f64>,
    /// Log-scale.
    pub sigma: f64,
    /// Translational tangent component (not the translation itself).
    pub nu: Vector3<f64>,
}

impl Sim3Tangent {
    pub fn zero() -> Self {
        Sim3Tangent {
            omega: Vector3::zeros(),
            sigma: 0.0,
            nu: Vector3::zeros(),
        }
    }

    pub fn new(omega: Vector3<f64>, sigma: f64, nu: Vector3<f64>) -> Self {
        Sim3Tangent { omega, sigma, nu }
    }

    pub fn from_vector(v: &SVector<f64, 7>) -> Self {
        Sim3Tangent {
            omega: Vector3::new(v[0], v[1], v[2]),
            sigma: v[3],
            nu: Vector3::new(v[4], v[5], v[6]),
        }
    }

    pub fn to_vector(&self) -> SVector<f64, 7> {
        SVector::<f64, 7>::from_column_slice(&[
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.sigma,
            self.nu.x,
            self.nu.y,
            self.nu.z,
        ])
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

impl Sim3 {
    pub fn identity() -> Self {
        Sim3 {
            rotation: Rot3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    /// Builds a similarity from parts. `scale` must be positive and finite.
    pub fn from_parts(rotation: Rot3, translation: Vector3<f64>, scale: f64) -> Self {
        assert!(
            scale.is_finite() && scale > 0.0,
            "similarity scale must be positive and finite, got {scale}"
        );
        Sim3 {
            rotation,
            translation,
            scale,
        }
    }

    /// A pure scaling about the origin.
    pub fn pure_scale(scale: f64) -> Self {
        Sim3::from_parts(Rot3::identity(), Vector3::zeros(), scale)
    }

    pub fn from_se3(g: &SE3) -> Self {
        g.to_sim3()
    }

    /// Drops the scale, keeping rotation and translation. This is the
    /// conversion used when writing optimized similarity poses back into a
    /// rigid-pose store (the scale lives on in the surrounding map
    /// structure, not in the pose itself).
    pub fn to_se3(&self) -> SE3 {
        SE3 {
            rotation: self.rotation,
            translation: self.translation,
        }
    }

    /// Exponential map.
    pub fn exp(xi: &Sim3Tangent) -> Self {
        let w = w_matrix(&xi.omega, xi.sigma);
        Sim3 {
            rotation: Rot3::exp(&xi.omega),
            translation: w * xi.nu,
            scale: xi.sigma.exp(),
        }
    }

    /// Principal logarithm.
    ///
    /// Errors when the rotation angle is within 1e-9 of π, where the
    /// principal branch is ambiguous.
    pub fn log(&self) -> Result<Sim3Tangent, ManifoldError> {
        let angle = self.rotation.angle();
        if angle > std::f64::consts::PI - PI_BRANCH_MARGIN {
            return Err(ManifoldError::LogBranchAmbiguous { angle });
        }
        let omega = self.rotation.log();
        let sigma = self.scale.ln();
        let w = w_matrix(&omega, sigma);
        let nu = w
            .try_inverse()
            .expect("W matrix is invertible below the π branch cut")
            * self.translation;
        Ok(Sim3Tangent { omega, sigma, nu })
    }

    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.scale * self.rotation.act(&other.translation) + self.translation,
            scale: self.scale * other.scale,
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let rot_inv = self.rotation.inverse();
        let scale_inv = 1.0 / self.scale;
        Sim3 {
            translation: -(rot_inv.act(&self.translation) * scale_inv),
            rotation: rot_inv,
            scale: scale_inv,
        }
    }

    pub fn act(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation.act(p) + self.translation
    }

    /// Homogeneous 4×4 matrix `[sR t; 0 1]`.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.scale * self.rotation.matrix()));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Adjoint matrix in the `(ω, σ, ν)` layout:
    /// `S·exp(ξ)·S⁻¹ = exp(Adj_S·ξ)`.
    ///
    /// ```text
    ///         ⎡    R      0    0  ⎤
    ///   Adj = ⎢    0      1    0  ⎥
    ///         ⎣ [t]×·R   −t   s·R ⎦
    /// ```
    pub fn adjoint(&self) -> SMatrix<f64, 7, 7> {
        let r = self.rotation.matrix();
        let t = &self.translation;
        let mut adj = SMatrix::<f64, 7, 7>::zeros();
        adj.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        adj[(3, 3)] = 1.0;
        adj.fixed_view_mut::<3, 3>(4, 0).copy_from(&(hat(t) * r));
        adj.fixed_view_mut::<3, 1>(4, 3).copy_from(&(-t));
        adj.fixed_view_mut::<3, 3>(4, 4).copy_from(&(self.scale * r));
        adj
    }
}

// ---------------------------------------------------------------------------
// W matrix
// ---------------------------------------------------------------------------

/// The translational mixing matrix `W = a·[ω]× + b·[ω]×² + c·I` of the
/// Sim(3) exponential. `σ = 0` yields the SE(3) `V` matrix.
fn w_matrix(omega: &Vector3<f64>, sigma: f64) -> Matrix3<f64> {
    let theta = omega.norm();
    let (a, b, c) = w_coefficients(theta, sigma);
    let om = hat(omega);
    om * a + om * om * b + Matrix3::identity() * c
}

/// Scalar coefficients `(a, b, c)` of the W matrix.
///
/// Exact forms (from `W = ∫₀¹ e^{σu}·exp(u[ω]×) du`):
///
/// ```text
///   c = (e^σ − 1)/σ
///   a = (e^σ·sinθ·σ + (1 − e^σ·cosθ)·θ) / (θ·(θ² + σ²))
///   b = (c − (e^σ·cosθ·σ − σ + e^σ·sinθ·θ)/(θ² + σ²)) / θ²
/// ```
///
/// Each removable singularity is replaced by a Taylor limit including the
/// first-order correction, so the branches agree with the exact forms to
/// ~1e-12 at the switch-over. The exact branches avoid the catastrophic
/// cancellation of the textbook forms near the switch-over by using
/// `exp_m1` and the identity `1 − cosθ = 2·sin²(θ/2)`, so every difference
/// is taken between accurately-computed small quantities.
fn w_coefficients(theta: f64, sigma: f64) -> (f64, f64, f64) {
    if sigma.abs() < SMALL_SIGMA {
        let c = 1.0 + sigma * (0.5 + sigma / 6.0);
        if theta < SMALL_ANGLE {
            // Both small: ∫u du, ∫u²/2 du with the σ-linear correction.
            (0.5 + sigma / 3.0, 1.0 / 6.0 + sigma / 8.0, c)
        } else {
            let (sin_t, cos_t) = theta.sin_cos();
            let t2 = theta * theta;
            let one_minus_cos = 2.0 * (0.5 * theta).sin().powi(2);
            let a = one_minus_cos / t2 + sigma * (sin_t - theta * cos_t) / (t2 * theta);
            let b = (theta - sin_t) / (t2 * theta)
                + sigma * (t2 / 2.0 + one_minus_cos - theta * sin_t) / (t2 * t2);
            (a, b, c)
        }
    } else {
        let scale = sigma.exp();
        let expm1 = sigma.exp_m1();
        let c = expm1 / sigma;
        if theta < SMALL_ANGLE {
            let s2 = sigma * sigma;
            // θ → 0 limits: ∫u·e^{σu} du and ∫(u²/2)·e^{σu} du, written so
            // the leading terms cancel between small quantities only.
            let a = (sigma * scale - expm1) / s2;
            let b = (scale * 0.5 * s2 - sigma * scale + expm1) / (s2 * sigma);
            (a, b, c)
        } else {
            let (sin_t, cos_t) = theta.sin_cos();
            let t2 = theta * theta;
            let denom = t2 + sigma * sigma;
            let one_minus_cos = 2.0 * (0.5 * theta).sin().powi(2);
            // 1 − e^σ·cosθ = 2sin²(θ/2) − cosθ·(e^σ − 1)
            let a = (scale * sin_t * sigma + (one_minus_cos - cos_t * expm1) * theta)
                / (theta * denom);
            // e^σ·cosθ·σ − σ = σ·(cosθ·(e^σ − 1) − 2sin²(θ/2))
            let b = (c - (sigma * (cos_t * expm1 - one_minus_cos) + scale * sin_t * theta) / denom)
                / t2;
            (a, b, c)
        }
    }
}
