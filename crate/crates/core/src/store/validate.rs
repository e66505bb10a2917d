use std::fmt;

use serde::Serialize;

use super::{Episode, ImageSize};
use crate::action::{GRIPPER_CLOSED, GRIPPER_OPEN};
use crate::align::workspace_violations;
use crate::se3::QUATERNION_NORM_TOL;

/// Position (meters) and angle (radians) tolerance between an action's
/// implied successor and the recorded next pose.
pub const ACTION_POSE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    TooFewSteps,
    EmptyInstruction,
    NonFinite,
    BadQuaternion,
    OutOfWorkspace,
    GripperNotCanonical,
    ActionPresence,
    ActionPoseMismatch,
    ViewSetMismatch,
    ImageSizeMismatch,
    MissingCamera,
}

impl ViolationKind {
    pub fn label(self) -> &'static str {
        match self {
            ViolationKind::TooFewSteps => "too-few-steps",
            ViolationKind::EmptyInstruction => "empty-instruction",
            ViolationKind::NonFinite => "non-finite",
            ViolationKind::BadQuaternion => "bad-quaternion",
            ViolationKind::OutOfWorkspace => "out-of-workspace",
            ViolationKind::GripperNotCanonical => "gripper-not-canonical",
            ViolationKind::ActionPresence => "action-presence",
            ViolationKind::ActionPoseMismatch => "action-pose-mismatch",
            ViolationKind::ViewSetMismatch => "view-set-mismatch",
            ViolationKind::ImageSizeMismatch => "image-size-mismatch",
            ViolationKind::MissingCamera => "missing-camera",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub episode: String,
    pub step: Option<usize>,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(s) => write!(f, "{} step {s}: {}: {}", self.episode, self.kind.label(), self.detail),
            None => write!(f, "{}: {}: {}", self.episode, self.kind.label(), self.detail),
        }
    }
}

/// Checks every structural invariant of a stored episode. An empty result
/// means the episode is clean.
pub fn validate(ep: &Episode, image_size: ImageSize) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |step: Option<usize>, kind, detail: String| {
        out.push(Violation {
            episode: ep.id.clone(),
            step,
            kind,
            detail,
        })
    };

    if ep.steps.len() < 2 {
        push(None, ViolationKind::TooFewSteps, format!("{} steps", ep.steps.len()));
    }
    if ep.instruction.trim().is_empty() {
        push(None, ViolationKind::EmptyInstruction, "instruction is empty".into());
    }

    let views = ep.view_names();
    for v in &views {
        match ep.cameras.view(v) {
            None => push(None, ViolationKind::MissingCamera, format!("no camera for view {v:?}")),
            Some(cam) if (cam.height(), cam.width()) != (image_size.height, image_size.width) => {
                push(
                    None,
                    ViolationKind::ImageSizeMismatch,
                    format!(
                        "camera {v:?} is {}x{}, expected {}x{}",
                        cam.height(),
                        cam.width(),
                        image_size.height,
                        image_size.width
                    ),
                )
            }
            Some(_) => {}
        }
    }

    let last = ep.steps.len().saturating_sub(1);
    for (i, s) in ep.steps.iter().enumerate() {
        let p = s.pose.position;
        let q = s.pose.orientation;
        if !p.iter().all(|v| v.is_finite()) || !q.to_array().iter().all(|v| v.is_finite()) {
            push(Some(i), ViolationKind::NonFinite, "pose has non-finite values".into());
            continue;
        }
        let err = q.norm_error();
        if err > QUATERNION_NORM_TOL {
            push(
                Some(i),
                ViolationKind::BadQuaternion,
                format!("quaternion norm {:.9}", q.norm()),
            );
        }
        for w in workspace_violations(i, &p) {
            push(Some(i), ViolationKind::OutOfWorkspace, w.to_string());
        }
        if s.gripper != GRIPPER_OPEN && s.gripper != GRIPPER_CLOSED {
            push(
                Some(i),
                ViolationKind::GripperNotCanonical,
                format!("gripper {}", s.gripper),
            );
        }

        match (&s.action, i == last) {
            (Some(_), true) => push(
                Some(i),
                ViolationKind::ActionPresence,
                "final step carries an action".into(),
            ),
            (None, false) => push(Some(i), ViolationKind::ActionPresence, "missing action".into()),
            (Some(a), false) => {
                let next = &ep.steps[i + 1].pose;
                let implied = a.apply(&s.pose);
                let (dp, dr) = implied.error_to(next);
                if !(dp <= ACTION_POSE_TOL && dr <= ACTION_POSE_TOL) {
                    push(
                        Some(i),
                        ViolationKind::ActionPoseMismatch,
                        format!("position error {dp:.3e} m, rotation error {dr:.3e} rad"),
                    );
                }
            }
            (None, true) => {}
        }

        if s.frames.keys().ne(views.iter()) {
            push(
                Some(i),
                ViolationKind::ViewSetMismatch,
                format!(
                    "views {:?}, expected {views:?}",
                    s.frames.keys().collect::<Vec<_>>()
                ),
            );
        }
        for (name, frame) in &s.frames {
            let (w, h) = frame.rgb.dimensions();
            if (h, w) != (image_size.height, image_size.width) {
                push(
                    Some(i),
                    ViolationKind::ImageSizeMismatch,
                    format!("{name} image is {h}x{w}"),
                );
            }
            if let Some(d) = &frame.depth {
                if d.dimensions() != (w, h) {
                    push(
                        Some(i),
                        ViolationKind::ImageSizeMismatch,
                        format!("{name} depth is {}x{}", d.height(), d.width()),
                    );
                }
            }
        }
    }
    out
}
