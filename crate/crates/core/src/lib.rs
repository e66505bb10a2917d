//! Unified robot-manipulation episode data: SE(3) utilities, delta-action
//! representations, dataset frame alignment, a canonical episode store,
//! perception geometry, token masking and training losses.

pub mod action;
pub mod align;
pub mod loss;
pub mod par;
pub mod percept;
pub mod pipeline;
pub mod se3;
pub mod store;
pub mod tokens;

pub use par::Execution;
pub use se3::{Pose, Quaternion, RigidTransform, RotationMatrix, Vec3};
