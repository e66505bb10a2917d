//! Delta actions between consecutive end-effector poses.
//!
//! Three representations are supported:
//! * EADM: position difference plus per-axis Euler angle difference.
//! * CRMM: position difference plus `R_{t+1} · R_tᵀ`, both in the world frame.
//! * PCM: position difference and rotation expressed in the frame of the pose at `t`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::{
    euler_to_matrix, matrix_to_euler, matrix_to_quat, EulerAngles, Pose, RotationMatrix, Vec3,
};

pub const GRIPPER_OPEN: f64 = -1.0;
pub const GRIPPER_CLOSED: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActionError {
    #[error("gimbal lock while decomposing into Euler angles (pitch {pitch})")]
    GimbalLock { pitch: f64 },
    #[error("action is {found:?} but {expected:?} was required")]
    ReprMismatch {
        expected: ActionRepr,
        found: ActionRepr,
    },
    #[error("scale factors must be finite and strictly positive, got {0:?}")]
    InvalidScale([f64; 6]),
    #[error("gripper open and close values must differ and be finite (open {open}, close {close})")]
    InvalidGripperMap { open: f64, close: f64 },
    #[error("invalid value {0}")]
    InvalidValue(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ActionRepr {
    Eadm,
    Crmm,
    Pcm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaRotation {
    Euler(EulerAngles),
    Matrix(RotationMatrix),
}

impl DeltaRotation {
    fn matrix(&self) -> Option<&RotationMatrix> {
        match self {
            DeltaRotation::Matrix(m) => Some(m),
            DeltaRotation::Euler(_) => None,
        }
    }
}

/// Relative motion plus gripper command, tagged with its representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaAction {
    pub dpos: Vec3,
    pub drot: DeltaRotation,
    pub gripper: f64,
    repr: ActionRepr,
}

impl DeltaAction {
    pub fn eadm(dpos: Vec3, drot: EulerAngles, gripper: f64) -> Self {
        Self {
            dpos,
            drot: DeltaRotation::Euler(drot),
            gripper,
            repr: ActionRepr::Eadm,
        }
    }

    pub fn crmm(dpos: Vec3, drot: RotationMatrix, gripper: f64) -> Self {
        Self {
            dpos,
            drot: DeltaRotation::Matrix(drot),
            gripper,
            repr: ActionRepr::Crmm,
        }
    }

    pub fn pcm(dpos: Vec3, drot: RotationMatrix, gripper: f64) -> Self {
        Self {
            dpos,
            drot: DeltaRotation::Matrix(drot),
            gripper,
            repr: ActionRepr::Pcm,
        }
    }

    /// Zero motion in the given representation.
    pub fn zero(repr: ActionRepr) -> Self {
        match repr {
            ActionRepr::Eadm => Self::eadm(Vec3::zeros(), EulerAngles::ZERO, GRIPPER_OPEN),
            ActionRepr::Crmm => Self::crmm(Vec3::zeros(), RotationMatrix::identity(), GRIPPER_OPEN),
            ActionRepr::Pcm => Self::pcm(Vec3::zeros(), RotationMatrix::identity(), GRIPPER_OPEN),
        }
    }

    pub fn repr(&self) -> ActionRepr {
        self.repr
    }

    pub fn with_gripper(mut self, gripper: f64) -> Self {
        self.gripper = gripper;
        self
    }

    /// EADM network form `[dx, dy, dz, roll, pitch, yaw, gripper]`.
    pub fn to_vector(&self) -> Result<[f64; 7], ActionError> {
        match self.drot {
            DeltaRotation::Euler(e) => Ok([
                self.dpos.x,
                self.dpos.y,
                self.dpos.z,
                e.roll,
                e.pitch,
                e.yaw,
                self.gripper,
            ]),
            DeltaRotation::Matrix(_) => Err(ActionError::ReprMismatch {
                expected: ActionRepr::Eadm,
                found: self.repr,
            }),
        }
    }

    pub fn from_vector(v: [f64; 7]) -> Self {
        Self::eadm(
            Vec3::new(v[0], v[1], v[2]),
            EulerAngles::new(v[3], v[4], v[5]),
            v[6],
        )
    }

    fn expect(&self, repr: ActionRepr) -> Result<(), ActionError> {
        if self.repr == repr {
            Ok(())
        } else {
            Err(ActionError::ReprMismatch {
                expected: repr,
                found: self.repr,
            })
        }
    }
}

fn euler_of(pose: &Pose) -> Result<EulerAngles, ActionError> {
    let d = matrix_to_euler(&pose.rotation());
    if d.gimbal_lock {
        return Err(ActionError::GimbalLock {
            pitch: d.angles.pitch,
        });
    }
    Ok(d.angles)
}

/// Euler angle difference, wrapped per component into `(-π, π]`.
pub fn eadm(from: &Pose, to: &Pose) -> Result<DeltaAction, ActionError> {
    let a = euler_of(from)?;
    let b = euler_of(to)?;
    let diff = EulerAngles::new(b.roll - a.roll, b.pitch - a.pitch, b.yaw - a.yaw).wrapped();
    Ok(DeltaAction::eadm(
        to.position - from.position,
        diff,
        GRIPPER_OPEN,
    ))
}

pub fn crmm(from: &Pose, to: &Pose) -> DeltaAction {
    let r_from = from.rotation();
    let r_to = to.rotation();
    DeltaAction::crmm(
        to.position - from.position,
        r_to.compose(&r_from.inverse()),
        GRIPPER_OPEN,
    )
}

pub fn pcm(from: &Pose, to: &Pose) -> DeltaAction {
    let inv_from = from.rotation().inverse();
    DeltaAction::pcm(
        inv_from.rotate(&(to.position - from.position)),
        inv_from.compose(&to.rotation()),
        GRIPPER_OPEN,
    )
}

/// Forward operation for `repr`.
pub fn delta(repr: ActionRepr, from: &Pose, to: &Pose) -> Result<DeltaAction, ActionError> {
    match repr {
        ActionRepr::Eadm => eadm(from, to),
        ActionRepr::Crmm => Ok(crmm(from, to)),
        ActionRepr::Pcm => Ok(pcm(from, to)),
    }
}

pub fn apply_eadm(pose: &Pose, action: &DeltaAction) -> Result<Pose, ActionError> {
    action.expect(ActionRepr::Eadm)?;
    let DeltaRotation::Euler(d) = action.drot else {
        unreachable!("EADM actions carry Euler payloads");
    };
    let e = euler_of(pose)?;
    let target = EulerAngles::new(e.roll + d.roll, e.pitch + d.pitch, e.yaw + d.yaw);
    Ok(Pose::from_rotation(
        pose.position + action.dpos,
        &euler_to_matrix(&target),
    ))
}

pub fn apply_crmm(pose: &Pose, action: &DeltaAction) -> Result<Pose, ActionError> {
    action.expect(ActionRepr::Crmm)?;
    let drot = action.drot.matrix().expect("CRMM carries a matrix");
    Ok(Pose::from_rotation(
        pose.position + action.dpos,
        &drot.compose(&pose.rotation()),
    ))
}

pub fn apply_pcm(pose: &Pose, action: &DeltaAction) -> Result<Pose, ActionError> {
    action.expect(ActionRepr::Pcm)?;
    let drot = action.drot.matrix().expect("PCM carries a matrix");
    let r = pose.rotation();
    Ok(Pose::from_rotation(
        pose.position + r.rotate(&action.dpos),
        &r.compose(drot),
    ))
}

/// Applies an action in whatever representation it carries.
pub fn apply(pose: &Pose, action: &DeltaAction) -> Result<Pose, ActionError> {
    match action.repr {
        ActionRepr::Eadm => apply_eadm(pose, action),
        ActionRepr::Crmm => apply_crmm(pose, action),
        ActionRepr::Pcm => apply_pcm(pose, action),
    }
}

/// Re-expresses `action` (taken at `pose`) in `target`, by reconstructing the
/// successor pose and re-deriving. The gripper command is carried over.
pub fn convert_repr(
    action: &DeltaAction,
    pose: &Pose,
    target: ActionRepr,
) -> Result<DeltaAction, ActionError> {
    if action.repr == target {
        return Ok(*action);
    }
    let next = apply(pose, action)?;
    Ok(delta(target, pose, &next)?.with_gripper(action.gripper))
}

/// Per-axis factors for `(x, y, z, roll, pitch, yaw)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct ScaleVector([f64; 6]);

impl ScaleVector {
    /// CALVIN's network scaling: 0.02 m on translation axes, 0.05 rad on rotation axes.
    pub const CALVIN: ScaleVector = ScaleVector([0.02, 0.02, 0.02, 0.05, 0.05, 0.05]);
    pub const UNIT: ScaleVector = ScaleVector([1.0; 6]);

    pub fn new(factors: [f64; 6]) -> Result<Self, ActionError> {
        if factors.iter().all(|f| f.is_finite() && *f > 0.0) {
            Ok(Self(factors))
        } else {
            Err(ActionError::InvalidScale(factors))
        }
    }

    pub fn factors(&self) -> [f64; 6] {
        self.0
    }
}

impl TryFrom<[f64; 6]> for ScaleVector {
    type Error = ActionError;
    fn try_from(v: [f64; 6]) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ScaleVector> for [f64; 6] {
    fn from(s: ScaleVector) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleDirection {
    /// Divide by the factors (dataset units to network units).
    Normalize,
    /// Multiply by the factors.
    Denormalize,
}

/// Scales an EADM action axis by axis; the gripper is left untouched.
pub fn scale_action(
    action: &DeltaAction,
    scale: &ScaleVector,
    direction: ScaleDirection,
) -> Result<DeltaAction, ActionError> {
    let mut v = action.to_vector()?;
    for (x, f) in v.iter_mut().zip(scale.0) {
        match direction {
            ScaleDirection::Normalize => *x /= f,
            ScaleDirection::Denormalize => *x *= f,
        }
    }
    Ok(DeltaAction::from_vector(v))
}

/// Maps a dataset's native gripper encoding onto `-1` open / `+1` closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GripperMapRaw", into = "GripperMapRaw")]
pub struct GripperMap {
    open: f64,
    close: f64,
}

#[derive(Serialize, Deserialize)]
struct GripperMapRaw {
    open: f64,
    close: f64,
}

impl GripperMap {
    pub const CANONICAL: GripperMap = GripperMap {
        open: GRIPPER_OPEN,
        close: GRIPPER_CLOSED,
    };

    pub fn new(open: f64, close: f64) -> Result<Self, ActionError> {
        if !(open.is_finite() && close.is_finite()) || open == close {
            return Err(ActionError::InvalidGripperMap { open, close });
        }
        Ok(Self { open, close })
    }

    pub fn open(&self) -> f64 {
        self.open
    }

    pub fn close(&self) -> f64 {
        self.close
    }

    pub fn threshold(&self) -> f64 {
        0.5 * (self.open + self.close)
    }

    /// `-1` on the open side of the midpoint, `+1` otherwise (ties count as closed).
    pub fn remap(&self, value: f64) -> Result<f64, ActionError> {
        if !value.is_finite() {
            return Err(ActionError::InvalidValue(value));
        }
        let t = self.threshold();
        let is_open = if self.open < self.close {
            value < t
        } else {
            value > t
        };
        Ok(if is_open { GRIPPER_OPEN } else { GRIPPER_CLOSED })
    }
}

impl TryFrom<GripperMapRaw> for GripperMap {
    type Error = ActionError;
    fn try_from(raw: GripperMapRaw) -> Result<Self, Self::Error> {
        Self::new(raw.open, raw.close)
    }
}

impl From<GripperMap> for GripperMapRaw {
    fn from(m: GripperMap) -> Self {
        Self {
            open: m.open,
            close: m.close,
        }
    }
}

pub fn remap_gripper(value: f64, map: &GripperMap) -> Result<f64, ActionError> {
    map.remap(value)
}

/// Quaternion form of a CRMM/PCM rotation payload.
pub fn rotation_quaternion(action: &DeltaAction) -> Option<crate::se3::Quaternion> {
    action.drot.matrix().map(matrix_to_quat)
}
