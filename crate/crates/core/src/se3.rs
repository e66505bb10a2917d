//! Rotation and rigid-transform algebra.
//!
//! Quaternions are stored `(w, x, y, z)` with the double cover resolved to
//! `w >= 0`. Euler angles use the extrinsic X-Y-Z convention,
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`, in radians.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Accepted deviation from unit norm when constructing a quaternion.
pub const QUATERNION_NORM_TOL: f64 = 1e-6;
/// Accepted deviation of `RᵀR` from identity and of `det R` from one.
pub const ORTHONORMAL_TOL: f64 = 1e-9;
/// Distance of |pitch| from π/2 below which a decomposition is gimbal locked.
pub const GIMBAL_LOCK_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid quaternion: norm {norm} is not within {QUATERNION_NORM_TOL} of 1")]
    InvalidQuaternion { norm: f64 },
    #[error("invalid rotation matrix: {reason}")]
    InvalidRotation { reason: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Validates and canonicalizes a quaternion that is already (nearly) unit norm.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        if ![w, x, y, z].iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinite("quaternion"));
        }
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(GeometryError::InvalidQuaternion { norm });
        }
        Ok(Self::canonical(w / norm, x / norm, y / norm, z / norm))
    }

    /// Normalizes any non-zero finite quaternion.
    pub fn normalized(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() {
            return Err(GeometryError::NonFinite("quaternion"));
        }
        if norm < 1e-12 {
            return Err(GeometryError::InvalidQuaternion { norm });
        }
        Ok(Self::canonical(w / norm, x / norm, y / norm, z / norm))
    }

    /// Stores the components verbatim, without normalization or sign canonicalization.
    ///
    /// Used by storage so that a read reproduces the written bits exactly;
    /// [`Quaternion::norm_error`] lets validation report bad values.
    pub fn from_raw(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Result<Self, GeometryError> {
        let n = axis.norm();
        if !(n.is_finite() && angle.is_finite()) {
            return Err(GeometryError::NonFinite("axis-angle"));
        }
        if n < 1e-12 {
            return Ok(Self::IDENTITY);
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let a = axis / n;
        Self::normalized(c, s * a.x, s * a.y, s * a.z)
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        if w < 0.0 {
            Self {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            Self { w, x, y, z }
        }
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// `|‖q‖ - 1|`; NaN components yield NaN.
    pub fn norm_error(&self) -> f64 {
        (self.norm() - 1.0).abs()
    }

    pub fn conjugate(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        let (a, b) = (self, rhs);
        Quaternion {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
    }

    /// Rotation angle in `[0, π]` between two orientations.
    ///
    /// Uses `atan2` on the relative quaternion so that tiny angles keep full precision.
    pub fn angle_to(&self, other: &Quaternion) -> f64 {
        let rel = self.conjugate().mul(other);
        let v = (rel.x * rel.x + rel.y * rel.y + rel.z * rel.z).sqrt();
        2.0 * v.atan2(rel.w.abs())
    }

    pub fn to_matrix(&self) -> RotationMatrix {
        quat_to_matrix(self)
    }
}

/// Proper rotation matrix (orthonormal, `det = +1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("rotation matrix"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        if ortho > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidRotation {
                reason: format!("RᵀR deviates from identity by {ortho:e}"),
            });
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidRotation {
                reason: format!("determinant {det}"),
            });
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Composition `self * rhs` (apply `rhs` first).
    pub fn compose(&self, rhs: &RotationMatrix) -> RotationMatrix {
        Self(self.0 * rhs.0)
    }

    pub fn transpose(&self) -> RotationMatrix {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> RotationMatrix {
        self.transpose()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Rotation angle of `selfᵀ * other`, via quaternions for precision.
    pub fn angle_to(&self, other: &RotationMatrix) -> f64 {
        matrix_to_quat_unchecked(&self.0).angle_to(&matrix_to_quat_unchecked(&other.0))
    }
}

pub fn quat_to_matrix(q: &Quaternion) -> RotationMatrix {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    let (wx, wy, wz) = (w * x, w * y, w * z);
    RotationMatrix(Matrix3::new(
        1.0 - 2.0 * (yy + zz),
        2.0 * (xy - wz),
        2.0 * (xz + wy),
        2.0 * (xy + wz),
        1.0 - 2.0 * (xx + zz),
        2.0 * (yz - wx),
        2.0 * (xz - wy),
        2.0 * (yz + wx),
        1.0 - 2.0 * (xx + yy),
    ))
}

/// Validates `m` then converts with Shepperd's method.
pub fn matrix_to_quat_checked(m: &Matrix3<f64>) -> Result<Quaternion, GeometryError> {
    let r = RotationMatrix::new(*m)?;
    Ok(matrix_to_quat(&r))
}

pub fn matrix_to_quat(r: &RotationMatrix) -> Quaternion {
    matrix_to_quat_unchecked(&r.0)
}

fn matrix_to_quat_unchecked(m: &Matrix3<f64>) -> Quaternion {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let (w, x, y, z) = if trace > 0.0 {
        let s = 2.0 * (1.0 + trace).sqrt();
        (
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
        (
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
        (
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
        (
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    let norm = (w * w + x * x + y * y + z * z).sqrt();
    Quaternion::canonical(w / norm, x / norm, y / norm, z / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub const ZERO: EulerAngles = EulerAngles {
        roll: 0.0,
        pitch: 0.0,
        yaw: 0.0,
    };

    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    /// Each component wrapped into `(-π, π]`.
    pub fn wrapped(&self) -> Self {
        Self {
            roll: wrap_angle(self.roll),
            pitch: wrap_angle(self.pitch),
            yaw: wrap_angle(self.yaw),
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.roll, self.pitch, self.yaw]
    }
}

/// Result of decomposing a rotation into Euler angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerDecomposition {
    pub angles: EulerAngles,
    /// Set when |pitch| is within [`GIMBAL_LOCK_TOL`] of π/2; yaw is then forced to 0.
    pub gimbal_lock: bool,
}

pub fn euler_to_matrix(e: &EulerAngles) -> RotationMatrix {
    RotationMatrix::rot_z(e.yaw)
        .compose(&RotationMatrix::rot_y(e.pitch))
        .compose(&RotationMatrix::rot_x(e.roll))
}

pub fn matrix_to_euler(r: &RotationMatrix) -> EulerDecomposition {
    let m = &r.0;
    let cos_pitch = (m[(0, 0)] * m[(0, 0)] + m[(1, 0)] * m[(1, 0)]).sqrt();
    let pitch = (-m[(2, 0)]).atan2(cos_pitch);
    if FRAC_PI_2 - pitch.abs() < GIMBAL_LOCK_TOL {
        // Only roll - yaw (pitch > 0) or roll + yaw (pitch < 0) is observable.
        let roll = if pitch > 0.0 {
            m[(0, 1)].atan2(m[(0, 2)])
        } else {
            (-m[(0, 1)]).atan2(-m[(0, 2)])
        };
        return EulerDecomposition {
            angles: EulerAngles::new(wrap_angle(roll), pitch, 0.0),
            gimbal_lock: true,
        };
    }
    let roll = m[(2, 1)].atan2(m[(2, 2)]);
    let yaw = m[(1, 0)].atan2(m[(0, 0)]);
    EulerDecomposition {
        angles: EulerAngles::new(wrap_angle(roll), pitch, wrap_angle(yaw)),
        gimbal_lock: false,
    }
}

/// Rigid transform `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: RotationMatrix,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: RotationMatrix::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: RotationMatrix, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds from the top three rows of a homogeneous 4×4 matrix.
    pub fn from_rows(rows: [[f64; 4]; 3]) -> Result<Self, GeometryError> {
        let rotation = RotationMatrix::from_rows([
            [rows[0][0], rows[0][1], rows[0][2]],
            [rows[1][0], rows[1][1], rows[1][2]],
            [rows[2][0], rows[2][1], rows[2][2]],
        ])?;
        let translation = Vec3::new(rows[0][3], rows[1][3], rows[2][3]);
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("translation"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn rows(&self) -> [[f64; 4]; 3] {
        let r = self.rotation.rows();
        let t = &self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t.x],
            [r[1][0], r[1][1], r[1][2], t.y],
            [r[2][0], r[2][1], r[2][2], t.z],
        ]
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// Rotation only; for displacements and directions.
    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.rotate(v)
    }

    pub fn transform_pose(&self, pose: &Pose) -> Pose {
        let frame = matrix_to_quat(&self.rotation);
        let o = frame.mul(&pose.orientation);
        Pose {
            position: self.transform_point(&pose.position),
            orientation: Quaternion::canonical(o.w, o.x, o.y, o.z),
        }
    }

    /// `self ∘ rhs`: applies `rhs` first.
    pub fn compose(&self, rhs: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(&rhs.rotation),
            translation: self.rotation.rotate(&rhs.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            translation: -rt.rotate(&self.translation),
            rotation: rt,
        }
    }
}

pub fn transform_point(t: &RigidTransform, p: &Vec3) -> Vec3 {
    t.transform_point(p)
}

pub fn transform_pose(t: &RigidTransform, pose: &Pose) -> Pose {
    t.transform_pose(pose)
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// End-effector position and orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quaternion,
}

impl Pose {
    pub fn new(position: Vec3, orientation: Quaternion) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vec3::zeros(), Quaternion::IDENTITY)
    }

    pub fn from_rotation(position: Vec3, rotation: &RotationMatrix) -> Self {
        Self::new(position, matrix_to_quat(rotation))
    }

    pub fn rotation(&self) -> RotationMatrix {
        quat_to_matrix(&self.orientation)
    }

    /// Position distance and rotation angle to `other`.
    pub fn error_to(&self, other: &Pose) -> (f64, f64) {
        (
            (self.position - other.position).norm(),
            self.orientation.angle_to(&other.orientation),
        )
    }
}
