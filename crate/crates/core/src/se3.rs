//! Rigid-body transforms on SE(3).
//!
//! Tangent vectors use the translation-first layout `[rho; phi]`, where `phi`
//! is the rotation vector. `exp`/`log` are the closed-form SE(3) maps, with
//! Taylor expansions near the identity.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix6, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::GeometryError;

pub type Vec3 = Vector3<f64>;
pub type Tangent = Vector6<f64>;

/// Below this rotation angle the closed-form coefficients switch to series.
const SMALL_ANGLE: f64 = 1e-3;
/// Below this angle the cancellation-prone coefficients use their series.
const SERIES_ANGLE: f64 = 0.05;
/// `log` refuses rotations closer than this to pi.
pub const PI_MARGIN: f64 = 1e-6;

/// A rigid transform `x -> R x + t`.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.quaternion_wxyz();
        f.debug_struct("Pose")
            .field("t", &[self.translation.x, self.translation.y, self.translation.z])
            .field("q", &q)
            .finish()
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn hat(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vec3 {
    Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Coefficients `(sin t / t, (1 - cos t)/t^2, (t - sin t)/t^3)`.
fn so3_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (1.0 - t2 / 6.0 + t4 / 120.0, 0.5 - t2 / 24.0 + t4 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0)
    } else {
        let s = theta.sin();
        let half = (0.5 * theta).sin() / theta;
        (s / theta, 2.0 * half * half, sin_remainder(theta))
    }
}

/// `(t - sin t) / t^3`.
fn sin_remainder(theta: f64) -> f64 {
    if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362_880.0
    } else {
        (theta - theta.sin()) / (theta * theta * theta)
    }
}

/// Rotation matrix of the rotation vector `phi` (Rodrigues).
pub fn so3_exp(phi: &Vec3) -> Matrix3<f64> {
    let theta = phi.norm();
    let (a, b, _) = so3_coefficients(theta);
    let w = hat(phi);
    Matrix3::identity() + w * a + w * w * b
}

/// Rotation vector of `r`, principal branch.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vec3, GeometryError> {
    let axis2 = vee(r) * 2.0; // 2 sin(theta) * axis
    let sin2 = axis2.norm();
    let cos2 = r.trace() - 1.0;
    let theta = sin2.atan2(cos2);
    if theta > std::f64::consts::PI - PI_MARGIN {
        return Err(GeometryError::NearPiRotation { angle: theta });
    }
    let scale = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        0.5 * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
    } else {
        theta / sin2
    };
    Ok(axis2 * scale)
}

/// Left Jacobian of SO(3) (also the `V` matrix of the SE(3) exponential).
pub fn so3_left_jacobian(phi: &Vec3) -> Matrix3<f64> {
    let theta = phi.norm();
    let (_, b, c) = so3_coefficients(theta);
    let w = hat(phi);
    Matrix3::identity() + w * b + w * w * c
}

pub fn so3_left_jacobian_inv(phi: &Vec3) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = hat(phi);
    let d = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2 * t2 * t2 / 1_209_600.0
    } else {
        let (s, c) = theta.sin_cos();
        (1.0 - theta * s / (2.0 * (1.0 - c))) / (theta * theta)
    };
    Matrix3::identity() - w * 0.5 + w * w * d
}

/// The `Q` block coupling translation and rotation in the SE(3) left Jacobian.
fn se3_q(rho: &Vec3, phi: &Vec3) -> Matrix3<f64> {
    let theta = phi.norm();
    let (c1, c2, c3) = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            sin_remainder(theta),
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0 - t4 * t2 / 3_628_800.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 120_960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let t3 = t2 * theta;
        (
            (theta - s) / t3,
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t3),
        )
    };
    let p = hat(phi);
    let r = hat(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

/// Inverse of the SE(3) left Jacobian for the `[rho; phi]` layout.
pub fn se3_left_jacobian_inv(xi: &Tangent) -> Matrix6<f64> {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let jinv = so3_left_jacobian_inv(&phi);
    let q = se3_q(&rho, &phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-jinv * q * jinv));
    out
}

/// Inverse of the SE(3) right Jacobian, `Jr^-1(xi) = Jl^-1(-xi)`.
pub fn se3_right_jacobian_inv(xi: &Tangent) -> Matrix6<f64> {
    se3_left_jacobian_inv(&(-xi))
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    /// Builds a pose from a rotation matrix that is already orthonormal.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        debug_assert!(
            (rotation.transpose() * rotation - Matrix3::identity()).norm() < 1e-6,
            "rotation is not orthonormal"
        );
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation about `+z` followed by a translation.
    pub fn from_yaw(yaw: f64, t: Vec3) -> Self {
        Self { rotation: so3_exp(&Vec3::new(0.0, 0.0, yaw)), translation: t }
    }

    pub fn from_rotation_vector(phi: Vec3, t: Vec3) -> Self {
        Self { rotation: so3_exp(&phi), translation: t }
    }

    /// From a quaternion in `[w, x, y, z]` order; the quaternion is normalized.
    pub fn from_quaternion(q: [f64; 4], t: Vec3) -> Result<Self, GeometryError> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(GeometryError::InvalidQuaternion);
        }
        let unit = UnitQuaternion::from_quaternion(quat);
        Ok(Self { rotation: unit.to_rotation_matrix().into_inner(), translation: t })
    }

    /// Unit quaternion `[w, x, y, z]` with `w >= 0`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = q.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self^-1 * other`, the pose of `other` expressed in `self`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse() * *other
    }

    /// Projects the rotation back onto SO(3).
    pub fn orthonormalized(&self) -> Self {
        let rot = Rotation3::from_matrix_eps(&self.rotation, 1e-15, 32, Rotation3::identity());
        Self { rotation: rot.into_inner(), translation: self.translation }
    }

    pub fn exp(xi: &Tangent) -> Self {
        let rho = xi.fixed_rows::<3>(0).into_owned();
        let phi = xi.fixed_rows::<3>(3).into_owned();
        let rotation = so3_exp(&phi);
        let translation = so3_left_jacobian(&phi) * rho;
        Self { rotation, translation }
    }

    pub fn log(&self) -> Result<Tangent, GeometryError> {
        let phi = so3_log(&self.rotation)?;
        let rho = so3_left_jacobian_inv(&phi) * self.translation;
        Ok(Tangent::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
    }

    /// Geodesic interpolation between the identity (`s = 0`) and `self` (`s = 1`).
    pub fn interpolate(&self, s: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(GeometryError::OutOfRangeFactor { factor: s });
        }
        if s == 0.0 {
            return Ok(Self::identity());
        }
        if s == 1.0 {
            return Ok(*self);
        }
        Ok(Self::exp(&(self.log()? * s)))
    }

    /// Adjoint for the `[rho; phi]` layout: `[[R, t^ R], [0, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat(&self.translation) * self.rotation));
        ad
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        let axis2 = vee(&self.rotation) * 2.0;
        axis2.norm().atan2(self.rotation.trace() - 1.0)
    }

    /// Translation distance and rotation angle of `self^-1 * other`.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        let d = self.between(other);
        (d.translation.norm(), d.angle())
    }

    /// Maximum deviation of `R^T R` from identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose { rotation: self.rotation * rhs.rotation, translation: self.rotation * rhs.translation + self.translation }
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        *self * *rhs
    }
}

/// Wire form: `{"t":[x,y,z],"q":[w,x,y,z]}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    t: [f64; 3],
    q: [f64; 4],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let t = self.translation;
        PoseRepr { t: [t.x, t.y, t.z], q: self.quaternion_wxyz() }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(deserializer)?;
        Pose::from_quaternion(repr.q, Vec3::from(repr.t)).map_err(serde::de::Error::custom)
    }
}

/// A sequence of poses indexed by frame, with cumulative path length.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    poses: Vec<Pose>,
    arc: Vec<f64>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_poses(poses: impl IntoIterator<Item = Pose>) -> Self {
        let mut traj = Self::new();
        for p in poses {
            traj.push(p);
        }
        traj
    }

    pub fn push(&mut self, pose: Pose) {
        let step = match self.poses.last() {
            Some(prev) => (pose.translation - prev.translation).norm(),
            None => 0.0,
        };
        let total = self.arc.last().copied().unwrap_or(0.0) + step;
        self.poses.push(pose);
        self.arc.push(total);
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn pose(&self, frame: usize) -> Option<&Pose> {
        self.poses.get(frame)
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    /// Path length travelled between two frames (order-independent).
    pub fn travel(&self, a: usize, b: usize) -> f64 {
        (self.arc[b] - self.arc[a]).abs()
    }

    pub fn arc_length(&self, frame: usize) -> f64 {
        self.arc[frame]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn transform_point_cases() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().transform_point(&p), p);
        let shift = Pose::from_translation(Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(shift.transform_point(&Vec3::zeros()), Vec3::new(0.0, 0.0, 1.0));
        let yaw = Pose::from_yaw(FRAC_PI_2, Vec3::zeros());
        assert!(close(&yaw.transform_point(&Vec3::x()), &Vec3::y(), 1e-15));
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let t = Pose::exp(&Tangent::zeros());
        assert_eq!(t, Pose::identity());
    }

    #[test]
    fn exp_yaw_quarter_turn() {
        let t = Pose::exp(&Tangent::new(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((t.rotation() - expected).abs().max() < 1e-15);
    }

    #[test]
    fn log_rejects_half_turn() {
        let t = Pose::from_rotation_vector(Vec3::new(0.0, std::f64::consts::PI, 0.0), Vec3::zeros());
        assert!(matches!(t.log(), Err(GeometryError::NearPiRotation { .. })));
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        for &theta in &[0.9e-3, 1.1e-3, 1e-6, 1e-9] {
            let xi = Tangent::new(0.3, -0.2, 0.1, theta, -theta * 0.5, theta * 0.25);
            let back = Pose::exp(&xi).log().unwrap();
            assert!((back - xi).norm() < 1e-14, "theta {theta}: {}", (back - xi).norm());
        }
    }

    #[test]
    fn interpolate_endpoints_and_translation() {
        let t = Pose::from_rotation_vector(Vec3::new(0.1, 0.2, -0.3), Vec3::new(1.0, -2.0, 0.5));
        assert_eq!(t.interpolate(0.0).unwrap(), Pose::identity());
        assert_eq!(t.interpolate(1.0).unwrap(), t);
        let pure = Pose::from_translation(Vec3::new(2.0, 0.0, 0.0));
        let half = pure.interpolate(0.5).unwrap();
        assert!(close(half.translation(), &Vec3::new(1.0, 0.0, 0.0), 1e-15));
        assert!(matches!(t.interpolate(1.5), Err(GeometryError::OutOfRangeFactor { .. })));
        assert!(matches!(t.interpolate(-0.1), Err(GeometryError::OutOfRangeFactor { .. })));
    }

    #[test]
    fn quaternion_wire_format() {
        let t = Pose::from_yaw(FRAC_PI_2, Vec3::new(1.0, 2.0, 3.0));
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.starts_with("{\"t\":[1.0,2.0,3.0],\"q\":["));
        let back: Pose = serde_json::from_str(&json).unwrap();
        assert!((back.rotation() - t.rotation()).abs().max() < 1e-15);
        let bad = serde_json::from_str::<Pose>(r#"{"t":[0,0,0],"q":[0,0,0,0]}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn trajectory_travel() {
        let traj = Trajectory::from_poses((0..5).map(|i| Pose::from_translation(Vec3::new(i as f64, 0.0, 0.0))));
        assert_eq!(traj.travel(0, 4), 4.0);
        assert_eq!(traj.travel(3, 1), 2.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pose() -> impl Strategy<Value = Pose> {
            (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-10.0..10.0f64))
                .prop_map(|(r, t)| Pose::from_rotation_vector(Vec3::from(r), Vec3::from(t)))
        }

        fn max_diff(a: &Pose, b: &Pose) -> f64 {
            (a.rotation() - b.rotation()).abs().max().max((a.translation() - b.translation()).abs().max())
        }

        proptest! {
            #[test]
            fn composition_is_associative(a in pose(), b in pose(), c in pose()) {
                prop_assert!(max_diff(&((a * b) * c), &(a * (b * c))) < 1e-10);
            }

            #[test]
            fn inverse_cancels(a in pose()) {
                prop_assert!(max_diff(&(a * a.inverse()), &Pose::identity()) < 1e-10);
                prop_assert!(max_diff(&(a.inverse() * a), &Pose::identity()) < 1e-10);
            }

            #[test]
            fn exp_log_round_trip(r in prop::array::uniform3(-1.5..1.5f64), t in prop::array::uniform3(-5.0..5.0f64)) {
                let xi = Tangent::new(t[0], t[1], t[2], r[0], r[1], r[2]);
                prop_assert!((Pose::exp(&xi).log().unwrap() - xi).norm() < 1e-9);
            }

            #[test]
            fn interpolation_is_geodesic(
                r in prop::array::uniform3(-1.0..1.0f64),
                t in prop::array::uniform3(-5.0..5.0f64),
                s in 0.0..1.0f64,
                u in 0.0..1.0f64,
            ) {
                let a = Pose::from_rotation_vector(Vec3::from(r), Vec3::from(t));
                let total = s + (1.0 - s) * u;
                let split = a.interpolate(s).unwrap() * a.interpolate(total - s).unwrap();
                prop_assert!(max_diff(&split, &a.interpolate(total).unwrap()) < 1e-10);
            }

            #[test]
            fn orthonormality_preserved(a in pose(), b in pose()) {
                prop_assert!((a * b).orthonormality_error() < 1e-12);
                prop_assert!((a * b).rotation().determinant() > 0.0);
            }
        }
    }
}
