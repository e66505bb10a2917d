//! Per-dataset conventions and re-basing into the unified frame.
//!
//! The unified frame has X pointing right, Y forward and Z up, with the
//! workspace bounded by `[-0.5, -0.5, 0]` to `[0.5, 0.5, 1]` meters.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{crmm, ActionError, DeltaAction, GripperMap, ScaleVector};
use crate::se3::{GeometryError, Pose, RigidTransform, Vec3};

pub const WORKSPACE_MIN: [f64; 3] = [-0.5, -0.5, 0.0];
pub const WORKSPACE_MAX: [f64; 3] = [0.5, 0.5, 1.0];
/// Slack before a position counts as outside the unified workspace.
pub const WORKSPACE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("unknown dataset profile {name:?}; known profiles: {}", known.join(", "))]
    Unknown { name: String, known: Vec<String> },
    #[error("profile {name:?}: {reason}")]
    Invalid { name: String, reason: String },
    #[error("profile {name:?}: {source}")]
    Geometry {
        name: String,
        #[source]
        source: GeometryError,
    },
    #[error("profile {name:?}: {source}")]
    Action {
        name: String,
        #[source]
        source: ActionError,
    },
    #[error("reading profile file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing profile file {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisConvention {
    RightForwardUp,
    ForwardLeftUp,
    ForwardRightDown,
}

/// How a dataset natively encodes its actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SourceActionRepr {
    Eadm,
    Crmm,
    Pcm,
    /// Only absolute end-effector poses are recorded.
    Absolute,
    /// Translation-only actions; rotation is zero-padded.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetProfile {
    pub name: String,
    pub world_from_native: RigidTransform,
    pub axis_convention: AxisConvention,
    pub workspace_min: Vec3,
    pub workspace_max: Vec3,
    pub action_repr: SourceActionRepr,
    pub gripper_map: GripperMap,
    pub scale: Option<ScaleVector>,
}

/// On-disk form of a [`DatasetProfile`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub name: String,
    /// Top three rows of the homogeneous world-from-native matrix.
    pub world_from_native: [[f64; 4]; 3],
    pub axis_convention: AxisConvention,
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    pub action_repr: SourceActionRepr,
    pub gripper: GripperMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<ScaleVector>,
}

impl TryFrom<ProfileSpec> for DatasetProfile {
    type Error = ProfileError;

    fn try_from(spec: ProfileSpec) -> Result<Self, Self::Error> {
        let name = spec.name.clone();
        if name.trim().is_empty() {
            return Err(ProfileError::Invalid {
                name,
                reason: "empty name".into(),
            });
        }
        let world_from_native =
            RigidTransform::from_rows(spec.world_from_native).map_err(|source| {
                ProfileError::Geometry {
                    name: name.clone(),
                    source,
                }
            })?;
        if !(0..3).all(|i| spec.workspace_min[i] < spec.workspace_max[i]) {
            return Err(ProfileError::Invalid {
                name,
                reason: format!(
                    "workspace min {:?} is not below max {:?}",
                    spec.workspace_min, spec.workspace_max
                ),
            });
        }
        Ok(DatasetProfile {
            name: spec.name,
            world_from_native,
            axis_convention: spec.axis_convention,
            workspace_min: Vec3::from(spec.workspace_min),
            workspace_max: Vec3::from(spec.workspace_max),
            action_repr: spec.action_repr,
            gripper_map: spec.gripper,
            scale: spec.scale,
        })
    }
}

impl From<&DatasetProfile> for ProfileSpec {
    fn from(p: &DatasetProfile) -> Self {
        ProfileSpec {
            name: p.name.clone(),
            world_from_native: p.world_from_native.rows(),
            axis_convention: p.axis_convention,
            workspace_min: p.workspace_min.into(),
            workspace_max: p.workspace_max.into(),
            action_repr: p.action_repr,
            gripper: p.gripper_map,
            scale: p.scale,
        }
    }
}

fn builtin(
    name: &str,
    rows: [[f64; 4]; 3],
    axis_convention: AxisConvention,
    workspace: ([f64; 3], [f64; 3]),
    action_repr: SourceActionRepr,
    gripper: (f64, f64),
    scale: Option<ScaleVector>,
) -> DatasetProfile {
    DatasetProfile::try_from(ProfileSpec {
        name: name.to_string(),
        world_from_native: rows,
        axis_convention,
        workspace_min: workspace.0,
        workspace_max: workspace.1,
        action_repr,
        gripper: GripperMap::new(gripper.0, gripper.1).expect("built-in gripper map"),
        scale,
    })
    .expect("built-in profile is valid")
}

const IDENTITY_ROWS: [[f64; 4]; 3] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
];
const ROBOMIMIC_ROWS: [[f64; 4]; 3] = [
    [0.0, 1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.4],
];
const LIBERO_ROWS: [[f64; 4]; 3] = [
    [0.0, 1.0, 0.0, 0.3],
    [-1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, -0.1],
];
const MANISKILL2_ROWS: [[f64; 4]; 3] = [
    [0.0, 1.0, 0.0, 0.3],
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, -1.0, 0.0],
];
const ROBOCAS_ROWS: [[f64; 4]; 3] = [
    [0.0, 1.0, 0.0, 0.3],
    [-1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.7],
];
const RLBENCH_ROWS: [[f64; 4]; 3] = [
    [0.0, 1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.7],
];

/// Profiles for the supported source datasets.
///
/// Workspaces are the native bounds; gripper maps are `(open, close)` in native units.
pub fn builtin_profiles() -> Vec<DatasetProfile> {
    use AxisConvention::*;
    use SourceActionRepr as A;
    vec![
        builtin(
            "CALVIN",
            IDENTITY_ROWS,
            RightForwardUp,
            ([-0.43, -0.57, 0.43], [0.37, -0.00, 0.80]),
            A::Eadm,
            (-1.0, 1.0),
            Some(ScaleVector::CALVIN),
        ),
        builtin(
            "Meta-World",
            IDENTITY_ROWS,
            RightForwardUp,
            ([-0.50, -0.10, 0.12], [0.48, 0.41, 0.60]),
            A::None,
            (0.5, -0.5),
            None,
        ),
        builtin(
            "LIBERO",
            LIBERO_ROWS,
            ForwardLeftUp,
            ([-0.24, -0.43, 0.01], [0.86, 0.57, 0.90]),
            A::Crmm,
            (1.0, -1.0),
            None,
        ),
        builtin(
            "Robomimic",
            ROBOMIMIC_ROWS,
            ForwardLeftUp,
            ([-0.17, -0.40, 0.90], [0.33, 0.33, 1.29]),
            A::Crmm,
            (1.0, -1.0),
            None,
        ),
        // Aligned the same way as LIBERO.
        builtin(
            "RoboCasa",
            LIBERO_ROWS,
            ForwardLeftUp,
            ([-0.81, -1.35, 0.70], [0.85, 0.75, 1.83]),
            A::Crmm,
            (1.0, -1.0),
            None,
        ),
        builtin(
            "ManiSkill2",
            MANISKILL2_ROWS,
            ForwardRightDown,
            ([-0.26, -0.79, -1.17], [0.85, 0.76, 0.00]),
            A::Pcm,
            (-1.0, 1.0),
            None,
        ),
        builtin(
            "RoboCAS",
            ROBOCAS_ROWS,
            ForwardLeftUp,
            ([-0.70, -0.82, 0.062], [0.85, 0.67, 0.92]),
            A::Absolute,
            (0.0, 0.08),
            None,
        ),
        builtin(
            "RLBench",
            RLBENCH_ROWS,
            ForwardLeftUp,
            ([-0.89, -0.72, 0.80], [0.56, 0.69, 1.89]),
            A::Absolute,
            (0.0, 1.0),
            None,
        ),
        builtin(
            "Colosseum",
            RLBENCH_ROWS,
            ForwardLeftUp,
            ([-0.68, -0.68, 0.83], [0.54, 0.70, 1.85]),
            A::Absolute,
            (0.0, 1.0),
            None,
        ),
    ]
}

/// Built-in profiles plus any loaded from files. Lookup is case-insensitive;
/// later registrations replace earlier ones with the same name.
#[derive(Debug, Clone)]
pub struct ProfileRegistry {
    profiles: Vec<DatasetProfile>,
}

impl Default for ProfileRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl ProfileRegistry {
    pub fn builtin() -> Self {
        Self {
            profiles: builtin_profiles(),
        }
    }

    pub fn empty() -> Self {
        Self {
            profiles: Vec::new(),
        }
    }

    pub fn insert(&mut self, profile: DatasetProfile) {
        let key = profile.name.to_lowercase();
        match self
            .profiles
            .iter_mut()
            .find(|p| p.name.to_lowercase() == key)
        {
            Some(slot) => *slot = profile,
            None => self.profiles.push(profile),
        }
    }

    /// Loads a JSON file holding one profile object or an array of them.
    pub fn load_file(&mut self, path: &Path) -> Result<usize, ProfileError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
            path: display.clone(),
            source,
        })?;
        let specs = parse_profiles(&text).map_err(|source| ProfileError::Parse {
            path: display,
            source,
        })?;
        let n = specs.len();
        for spec in specs {
            self.insert(DatasetProfile::try_from(spec)?);
        }
        Ok(n)
    }

    pub fn get(&self, name: &str) -> Result<&DatasetProfile, ProfileError> {
        let key = name.to_lowercase();
        self.profiles
            .iter()
            .find(|p| p.name.to_lowercase() == key)
            .ok_or_else(|| ProfileError::Unknown {
                name: name.to_string(),
                known: self.names(),
            })
    }

    pub fn names(&self) -> Vec<String> {
        self.profiles.iter().map(|p| p.name.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatasetProfile> {
        self.profiles.iter()
    }
}

pub fn parse_profiles(text: &str) -> Result<Vec<ProfileSpec>, serde_json::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        Many(Vec<ProfileSpec>),
        One(ProfileSpec),
    }
    Ok(match serde_json::from_str(text)? {
        OneOrMany::Many(v) => v,
        OneOrMany::One(p) => vec![p],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorkspaceViolation {
    pub index: usize,
    pub axis: usize,
    pub bound: Bound,
    pub value: f64,
}

impl fmt::Display for WorkspaceViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let axis = ["x", "y", "z"][self.axis];
        let bound = match self.bound {
            Bound::Min => "min",
            Bound::Max => "max",
        };
        write!(f, "point {} violates {axis}-{bound} ({})", self.index, self.value)
    }
}

/// Axis bounds `position` breaks, tagged with `index`.
pub fn workspace_violations(index: usize, position: &Vec3) -> Vec<WorkspaceViolation> {
    let mut out = Vec::new();
    for axis in 0..3 {
        let v = position[axis];
        if !(v >= WORKSPACE_MIN[axis] - WORKSPACE_TOL) {
            out.push(WorkspaceViolation {
                index,
                axis,
                bound: Bound::Min,
                value: v,
            });
        } else if !(v <= WORKSPACE_MAX[axis] + WORKSPACE_TOL) {
            out.push(WorkspaceViolation {
                index,
                axis,
                bound: Bound::Max,
                value: v,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkspaceReport {
    pub count: usize,
    /// Per-axis extent of the inputs; `None` for an empty sequence.
    pub min: Option<[f64; 3]>,
    pub max: Option<[f64; 3]>,
    pub out_of_bounds: usize,
    pub violations: Vec<WorkspaceViolation>,
}

pub fn clip_report(positions: &[Vec3]) -> WorkspaceReport {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    let mut violations = Vec::new();
    let mut out_of_bounds = 0;
    for (i, p) in positions.iter().enumerate() {
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
        let v = workspace_violations(i, p);
        if !v.is_empty() {
            out_of_bounds += 1;
        }
        violations.extend(v);
    }
    let empty = positions.is_empty();
    WorkspaceReport {
        count: positions.len(),
        min: (!empty).then_some(min),
        max: (!empty).then_some(max),
        out_of_bounds,
        violations,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPose {
    pub pose: Pose,
    /// Non-empty when the aligned position falls outside the unified workspace.
    pub warnings: Vec<WorkspaceViolation>,
}

pub fn align_pose(profile: &DatasetProfile, pose: &Pose) -> AlignedPose {
    let aligned = profile.world_from_native.transform_pose(pose);
    AlignedPose {
        warnings: workspace_violations(0, &aligned.position),
        pose: aligned,
    }
}

/// CRMM action between the two poses after alignment.
pub fn align_action(profile: &DatasetProfile, from: &Pose, to: &Pose) -> DeltaAction {
    let a = align_pose(profile, from).pose;
    let b = align_pose(profile, to).pose;
    crmm(&a, &b)
}
