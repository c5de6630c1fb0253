//! Quaternion and SE(3) algebra for exposure trajectories.
//!
//! Quaternions are Hamilton, stored `(x, y, z, w)`. Rotation updates are
//! right-multiplicative, `q' = q ⊗ exp(Δr)`, and translations are updated
//! additively. A pose maps points from its source frame into its target
//! frame: `p' = R p + t`.
//!
//! An [`ExposureTrajectory`] blends rotation in the tangent space of the
//! start orientation and translation linearly, which is the decomposed form
//! of the SE(3) interpolation. The coupled SE(3) exponential is not used.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix4x3, Vector3, Vector4};

use crate::error::{Error, Result};

/// Below this angle (radians) exp/log switch to their series expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// A unit quaternion `(x, y, z, w)` with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

/// An axis-angle rotation vector (radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationVector(pub Vector3<f64>);

impl RotationVector {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

impl UnitQuaternion {
    pub const IDENTITY: Self = Self {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        w: 1.0,
    };

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    /// Normalizes and canonicalizes (`w >= 0`) arbitrary components.
    ///
    /// Panics if the components have zero norm or are not finite.
    pub fn from_components(x: f64, y: f64, z: f64, w: f64) -> Self {
        Self::from_vector(&Vector4::new(x, y, z, w))
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        let n = v.norm();
        assert!(
            n.is_finite() && n > 0.0,
            "quaternion components must be finite and non-zero"
        );
        let s = if v[3] < 0.0 { -1.0 / n } else { 1.0 / n };
        Self {
            x: v[0] * s,
            y: v[1] * s,
            z: v[2] * s,
            w: v[3] * s,
        }
    }

    pub fn coords(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.z, self.w)
    }

    pub fn vector_part(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        self.coords().norm()
    }

    pub fn canonicalize(self) -> Self {
        if self.w < 0.0 {
            Self {
                x: -self.x,
                y: -self.y,
                z: -self.z,
                w: -self.w,
            }
        } else {
            self
        }
    }

    pub fn conjugate(&self) -> Self {
        Self {
            x: -self.x,
            y: -self.y,
            z: -self.z,
            w: self.w,
        }
    }

    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.coords())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_rotation_matrix() * v
    }

    /// Builds the quaternion of an orthonormal rotation matrix.
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        let r = nalgebra::Rotation3::from_matrix_unchecked(*m);
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&r);
        Self::from_components(q.i, q.j, q.k, q.w)
    }

    /// Geodesic angle between two rotations, radians in `[0, π]`.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let d = self.coords().dot(&other.coords()).abs().min(1.0);
        2.0 * d.acos()
    }

    /// Distance between quaternions modulo the double cover.
    pub fn distance(&self, other: &Self) -> f64 {
        let a = self.coords();
        let b = other.coords();
        (a - b).norm().min((a + b).norm())
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Rotation matrix of a (normalized on the fly) quaternion `(x, y, z, w)`.
pub fn rotation_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (x, y, z, w) = (q[0], q[1], q[2], q[3]);
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

/// Gradient of a scalar loss with respect to the raw quaternion, given the
/// gradient `g` with respect to the rotation matrix it generates.
///
/// The quaternion is normalized inside [`rotation_matrix`], so the result
/// has no radial component.
pub fn rotation_matrix_vjp(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let u = q / n;
    let (x, y, z, w) = (u[0], u[1], u[2], u[3]);
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let gu = Vector4::new(
        g.component_mul(&dx).sum(),
        g.component_mul(&dy).sum(),
        g.component_mul(&dz).sum(),
        g.component_mul(&dw).sum(),
    );
    (gu - u * u.dot(&gu)) / n
}

/// Left multiplication matrix: `a ⊗ b = Q(a) b`.
pub fn quat_left_matrix(a: &Vector4<f64>) -> Matrix4<f64> {
    let (x, y, z, w) = (a[0], a[1], a[2], a[3]);
    Matrix4::new(
        w, -z, y, x, //
        z, w, -x, y, //
        -y, x, w, z, //
        -x, -y, -z, w,
    )
}

/// Right multiplication matrix: `a ⊗ b = Q̂(b) a`.
pub fn quat_right_matrix(b: &Vector4<f64>) -> Matrix4<f64> {
    let (x, y, z, w) = (b[0], b[1], b[2], b[3]);
    Matrix4::new(
        w, z, -y, x, //
        -z, w, x, y, //
        y, -x, w, z, //
        -x, -y, -z, w,
    )
}

fn hamilton(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    quat_left_matrix(a) * b
}

/// `[0.5·I₃; 0]`, the derivative of `exp(Δr)` at `Δr = 0`.
pub fn half_identity_4x3() -> Matrix4x3<f64> {
    let mut m = Matrix4x3::zeros();
    m[(0, 0)] = 0.5;
    m[(1, 1)] = 0.5;
    m[(2, 2)] = 0.5;
    m
}

fn exp_raw(r: &Vector3<f64>) -> Vector4<f64> {
    let theta = r.norm();
    if theta < SMALL_ANGLE {
        let v = r * 0.5;
        Vector4::new(v[0], v[1], v[2], 1.0 - theta * theta / 8.0)
    } else {
        let s = (0.5 * theta).sin() / theta;
        Vector4::new(r[0] * s, r[1] * s, r[2] * s, (0.5 * theta).cos())
    }
}

/// Derivative of [`exp_raw`] with respect to `r`.
fn exp_jacobian(r: &Vector3<f64>) -> Matrix4x3<f64> {
    let theta = r.norm();
    let (h, dh_over_theta) = if theta < SMALL_ANGLE {
        (0.5 - theta * theta / 48.0, -1.0 / 24.0)
    } else {
        let (s, c) = (0.5 * theta).sin_cos();
        (
            s / theta,
            (0.5 * theta * c - s) / (theta * theta * theta),
        )
    };
    let top = Matrix3::identity() * h + r * r.transpose() * dh_over_theta;
    let mut j = Matrix4x3::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&top);
    let dw = -r * (0.5 * h);
    for k in 0..3 {
        j[(3, k)] = dw[k];
    }
    j
}

/// Principal-branch log of a raw quaternion of any positive norm.
fn log_raw(q: &Vector4<f64>) -> Vector3<f64> {
    let sign = if q[3] < 0.0 { -1.0 } else { 1.0 };
    let v = Vector3::new(q[0], q[1], q[2]) * sign;
    let w = q[3] * sign;
    let s = v.norm();
    if s < SMALL_ANGLE * w {
        // atan2(s, w)/s ≈ 1/w − s²/(3w³)
        v * (2.0 / w * (1.0 - s * s / (3.0 * w * w)))
    } else {
        v * (2.0 * s.atan2(w) / s)
    }
}

/// Derivative of [`log_raw`] with respect to the raw quaternion.
fn log_jacobian(q: &Vector4<f64>) -> Matrix3x4<f64> {
    let sign = if q[3] < 0.0 { -1.0 } else { 1.0 };
    let v = Vector3::new(q[0], q[1], q[2]) * sign;
    let w = q[3] * sign;
    let s = v.norm();
    let n2 = s * s + w * w;
    let (f, df_ds_over_s) = if s < SMALL_ANGLE * w {
        (
            2.0 / w * (1.0 - s * s / (3.0 * w * w)),
            -4.0 / (3.0 * w * w * w),
        )
    } else {
        let a = s.atan2(w);
        (2.0 * a / s, 2.0 * (w / (n2 * s) - a / (s * s)) / s)
    };
    let df_dw = -2.0 / n2;
    let dv = Matrix3::identity() * f + v * v.transpose() * df_ds_over_s;
    let mut j = Matrix3x4::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&dv);
    for k in 0..3 {
        j[(k, 3)] = v[k] * df_dw;
    }
    j * sign
}

/// Quaternion exponential of a rotation vector.
pub fn quat_exp(r: &RotationVector) -> UnitQuaternion {
    UnitQuaternion::from_vector(&exp_raw(&r.0))
}

/// Principal-branch logarithm; the returned angle is at most π.
pub fn quat_log(q: &UnitQuaternion) -> RotationVector {
    RotationVector(log_raw(&q.coords()))
}

/// Hamilton product, renormalized.
pub fn quat_mul(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    UnitQuaternion::from_vector(&hamilton(&a.coords(), &b.coords()))
}

pub fn quat_inv(q: &UnitQuaternion) -> UnitQuaternion {
    q.inverse()
}

/// Local update `q ⊗ exp(dr)`.
pub fn quat_boxplus(q: &UnitQuaternion, dr: &RotationVector) -> UnitQuaternion {
    UnitQuaternion::from_vector(&hamilton(&q.coords(), &exp_raw(&dr.0)))
}

/// Derivative of `q ⊞ Δr` at `Δr = 0`: `Q(q) · [0.5·I₃; 0]`.
pub fn boxplus_jacobian(q: &UnitQuaternion) -> Matrix4x3<f64> {
    quat_left_matrix(&q.coords()) * half_identity_4x3()
}

/// A rigid transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: UnitQuaternion,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn new(rotation: UnitQuaternion, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::IDENTITY, Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::IDENTITY, t)
    }

    pub fn from_rotation_vector(r: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self::new(quat_exp(&RotationVector(r)), t)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3::new(
            quat_mul(&self.rotation, &other.rotation),
            self.rotation.rotate(&other.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> PoseSE3 {
        let r = self.rotation.inverse();
        PoseSE3::new(r, -r.rotate(&self.translation))
    }

    /// Right-multiplicative rotation update and additive translation update.
    pub fn boxplus(&self, dr: &Vector3<f64>, dt: &Vector3<f64>) -> PoseSE3 {
        PoseSE3::new(
            quat_boxplus(&self.rotation, &RotationVector(*dr)),
            self.translation + dt,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.coords().iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Camera motion during one exposure of length `exposure` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureTrajectory {
    pub start: PoseSE3,
    pub end: PoseSE3,
    pub exposure: f64,
}

/// Jacobians of an interpolated pose with respect to the local updates of
/// the two endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpJacobians {
    pub dq_dr_start: Matrix4x3<f64>,
    pub dq_dr_end: Matrix4x3<f64>,
    pub dt_dtstart: Matrix3<f64>,
    pub dt_dtend: Matrix3<f64>,
}

impl ExposureTrajectory {
    pub fn new(start: PoseSE3, end: PoseSE3, exposure: f64) -> Result<Self> {
        if !(exposure > 0.0 && exposure.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "exposure must be positive, got {exposure}"
            )));
        }
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::InvalidArgument("non-finite endpoint pose".into()));
        }
        Ok(Self {
            start,
            end,
            exposure,
        })
    }

    /// A trajectory with no motion during the exposure.
    pub fn stationary(pose: PoseSE3, exposure: f64) -> Self {
        Self {
            start: pose,
            end: pose,
            exposure,
        }
    }

    pub fn mid(&self) -> PoseSE3 {
        interpolate_at_fraction(self, 0.5)
    }

    /// Applies `pose ∘ (·)` to both endpoints.
    pub fn left_compose(&self, pose: &PoseSE3) -> Self {
        Self {
            start: pose.compose(&self.start),
            end: pose.compose(&self.end),
            exposure: self.exposure,
        }
    }

    /// Applies a 12-dim local update `[Δr_start, Δt_start, Δr_end, Δt_end]`.
    pub fn boxplus(&self, delta: &[f64]) -> Self {
        assert_eq!(delta.len(), 12);
        let v = |o: usize| Vector3::new(delta[o], delta[o + 1], delta[o + 2]);
        Self {
            start: self.start.boxplus(&v(0), &v(3)),
            end: self.end.boxplus(&v(6), &v(9)),
            exposure: self.exposure,
        }
    }
}

fn check_time(traj: &ExposureTrajectory, t: f64) -> Result<()> {
    if !(0.0..=traj.exposure).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "time {t} outside exposure [0, {}]",
            traj.exposure
        )));
    }
    Ok(())
}

/// Intermediate quantities shared by the pose and its Jacobians.
struct Blend {
    qs: Vector4<f64>,
    qe: Vector4<f64>,
    qs_inv: Vector4<f64>,
    q_rel: Vector4<f64>,
    r: Vector3<f64>,
    q_step: Vector4<f64>,
    q_t: Vector4<f64>,
}

fn blend(traj: &ExposureTrajectory, frac: f64) -> Blend {
    let qs = traj.start.rotation.coords();
    let qe = traj.end.rotation.coords();
    let qs_inv = traj.start.rotation.conjugate().coords();
    let q_rel = hamilton(&qs_inv, &qe);
    let r = log_raw(&q_rel) * frac;
    let q_step = exp_raw(&r);
    let q_t = hamilton(&qs, &q_step);
    Blend {
        qs,
        qe,
        qs_inv,
        q_rel,
        r,
        q_step,
        q_t,
    }
}

fn interpolate_at_fraction(traj: &ExposureTrajectory, frac: f64) -> PoseSE3 {
    let b = blend(traj, frac);
    let a = 1.0 - frac;
    PoseSE3::new(
        UnitQuaternion::from_vector(&b.q_t),
        traj.start.translation * a + traj.end.translation * frac,
    )
}

/// Pose at time `t ∈ [0, τ]` within the exposure.
pub fn interpolate_pose(traj: &ExposureTrajectory, t: f64) -> Result<PoseSE3> {
    check_time(traj, t)?;
    if t == 0.0 {
        return Ok(traj.start);
    }
    if t == traj.exposure {
        return Ok(traj.end);
    }
    Ok(interpolate_at_fraction(traj, t / traj.exposure))
}

/// Analytic Jacobians of [`interpolate_pose`] with respect to the local
/// endpoint parameters.
///
/// The rotation blocks differentiate the quaternion returned by
/// `interpolate_pose` (including its sign canonicalization).
pub fn interp_jacobians(traj: &ExposureTrajectory, t: f64) -> Result<InterpJacobians> {
    check_time(traj, t)?;
    let frac = t / traj.exposure;
    let b = blend(traj, frac);

    let d_exp = exp_jacobian(&b.r);
    let d_log = log_jacobian(&b.q_rel) * frac;
    let step_chain: Matrix4<f64> = d_exp * d_log;
    let conj = Matrix4::from_diagonal(&Vector4::new(-1.0, -1.0, -1.0, 1.0));

    let left_s = quat_left_matrix(&b.qs);
    let dqt_dqs =
        quat_right_matrix(&b.q_step) + left_s * step_chain * quat_right_matrix(&b.qe) * conj;
    let dqt_dqe = left_s * step_chain * quat_left_matrix(&b.qs_inv);

    let half = half_identity_4x3();
    let mut dq_dr_start = dqt_dqs * left_s * half;
    let mut dq_dr_end = dqt_dqe * quat_left_matrix(&b.qe) * half;

    // Normalization only removes the radial component, which is already
    // orthogonal to these tangent directions. The sign flip is not.
    let out = if t == 0.0 {
        b.qs
    } else if t == traj.exposure {
        b.qe
    } else {
        b.q_t
    };
    if out[3] < 0.0 {
        dq_dr_start = -dq_dr_start;
        dq_dr_end = -dq_dr_end;
    }

    let wb = frac;
    let wa = 1.0 - frac;
    Ok(InterpJacobians {
        dq_dr_start,
        dq_dr_end,
        dt_dtstart: Matrix3::identity() * wa,
        dt_dtend: Matrix3::identity() * wb,
    })
}

/// Raw-quaternion output of `interpolate_pose`, exposed for Jacobian tests.
#[doc(hidden)]
pub fn interpolated_quaternion_coords(traj: &ExposureTrajectory, t: f64) -> Vector4<f64> {
    interpolate_pose(traj, t)
        .map(|p| p.rotation.coords())
        .unwrap_or_else(|_| Vector4::from_element(f64::NAN))
}

impl From<UnitQuaternion> for nalgebra::UnitQuaternion<f64> {
    fn from(q: UnitQuaternion) -> Self {
        nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q.w, q.x, q.y, q.z))
    }
}
