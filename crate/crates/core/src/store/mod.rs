//! Canonical on-disk episode format.
//!
//! A store root holds `manifest.json` and one directory per episode:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<id>/meta.json
//! <root>/<id>/cameras.json
//! <root>/<id>/steps.bin          little-endian f64 records, 15 per step
//! <root>/<id>/steps.sha256       hex SHA-256 of steps.bin
//! <root>/<id>/images/<view>/<step:05>.png
//! <root>/<id>/depth/<view>/<step:05>.png   16-bit, millimeters (optional)
//! ```
//!
//! A step record is `px py pz qw qx qy qz gripper dx dy dz dqw dqx dqy dqz`:
//! unified-frame pose, canonical gripper, then the CRMM action toward the next
//! step with its rotation as a quaternion. The final step's action is NaN.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{DeltaAction, DeltaRotation};
use crate::percept::{CameraRig, PerceptError};
use crate::se3::{quat_to_matrix, Pose, Quaternion, Vec3};

mod ingest;
mod io;
mod validate;

pub use ingest::{ingest, ingest_episode, list_native_episodes, Ingested, NativeEpisode, NativeStep};
#[cfg(test)]
pub(crate) use ingest::fixtures;
pub use io::{read_episode, read_meta, write_episode, EpisodeMeta};
pub use validate::{validate, Violation, ViolationKind, ACTION_POSE_TOL};

pub const FORMAT_VERSION: u32 = 1;
pub const STEP_RECORD_LEN: usize = 15;
pub const DEFAULT_IMAGE_SIZE: ImageSize = ImageSize {
    height: 256,
    width: 256,
};
pub const MANIFEST_FILE: &str = "manifest.json";

pub type DepthImage = ImageBuffer<Luma<u16>, Vec<u16>>;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: format version {found}, expected {FORMAT_VERSION}")]
    SchemaVersion { path: PathBuf, found: u32 },
    #[error("{path}: checksum mismatch (expected {expected}, found {found})")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("invalid episode id {0:?}")]
    InvalidId(String),
    #[error("camera: {0}")]
    Camera(#[from] PerceptError),
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn malformed(path: &Path, reason: impl Into<String>) -> Self {
        StoreError::Malformed {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub height: u32,
    pub width: u32,
}

impl std::str::FromStr for ImageSize {
    type Err = String;
    /// Parses `HxW`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| format!("bad image dimension {v:?}"))
        };
        Ok(ImageSize {
            height: parse(h)?,
            width: parse(w)?,
        })
    }
}

/// CRMM action as stored: translation plus the rotation as a quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepAction {
    pub dpos: Vec3,
    pub drot: Quaternion,
}

impl StepAction {
    /// `None` unless the action carries a rotation matrix (CRMM or PCM payload).
    pub fn from_crmm(action: &DeltaAction) -> Option<Self> {
        match action.drot {
            DeltaRotation::Matrix(m) if action.repr() == crate::action::ActionRepr::Crmm => {
                Some(Self {
                    dpos: action.dpos,
                    drot: crate::se3::matrix_to_quat(&m),
                })
            }
            _ => None,
        }
    }

    pub fn to_delta(&self, gripper: f64) -> DeltaAction {
        DeltaAction::crmm(self.dpos, quat_to_matrix(&self.drot), gripper)
    }

    /// Successor pose implied by applying this action at `pose`.
    pub fn apply(&self, pose: &Pose) -> Pose {
        Pose::new(pose.position + self.dpos, self.drot.mul(&pose.orientation))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub rgb: RgbImage,
    pub depth: Option<DepthImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub pose: Pose,
    /// Canonical gripper state.
    pub gripper: f64,
    /// Present on every step but the last.
    pub action: Option<StepAction>,
    /// Keyed by view name.
    pub frames: BTreeMap<String, Frame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub origin_dataset: String,
    pub instruction: String,
    pub robot: String,
    pub cameras: CameraRig,
    pub steps: Vec<Step>,
    /// Unrecognized native fields, kept verbatim.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Episode {
    pub fn view_names(&self) -> Vec<String> {
        self.steps
            .first()
            .map(|s| s.frames.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn task_verb(&self) -> String {
        task_verb(&self.instruction)
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.steps.iter().map(|s| s.pose.position).collect()
    }
}

/// Episode ids double as directory names.
pub fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

/// First whitespace token of the instruction, lowercased.
pub fn task_verb(instruction: &str) -> String {
    instruction
        .split_whitespace()
        .next()
        .map(str::to_lowercase)
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub steps: usize,
    pub task: String,
}

impl ManifestEntry {
    pub fn of(ep: &Episode) -> Self {
        Self {
            id: ep.id.clone(),
            steps: ep.steps.len(),
            task: ep.task_verb(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub image_size: ImageSize,
    pub profiles: Vec<String>,
    pub episodes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(image_size: ImageSize) -> Self {
        Self {
            format: FORMAT_VERSION,
            image_size,
            profiles: Vec::new(),
            episodes: Vec::new(),
        }
    }

    /// Adds or replaces an entry and keeps the index sorted by id.
    pub fn upsert(&mut self, ep: &Episode) {
        self.upsert_entry(ManifestEntry::of(ep), &ep.origin_dataset);
    }

    pub fn upsert_entry(&mut self, entry: ManifestEntry, profile: &str) {
        match self.episodes.binary_search_by(|e| e.id.cmp(&entry.id)) {
            Ok(i) => self.episodes[i] = entry,
            Err(i) => self.episodes.insert(i, entry),
        }
        if !self.profiles.iter().any(|p| p == profile) {
            self.profiles.push(profile.to_string());
            self.profiles.sort();
        }
    }

    pub fn read(root: &Path) -> Result<Self, StoreError> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|source| StoreError::Json {
                path: path.clone(),
                source,
            })?;
        let found = value.get("format").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(StoreError::SchemaVersion { path, found });
        }
        serde_json::from_value(value).map_err(|source| StoreError::Json { path, source })
    }

    pub fn write(&self, root: &Path) -> Result<(), StoreError> {
        std::fs::create_dir_all(root).map_err(|e| StoreError::io(root, e))?;
        let path = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| StoreError::io(&path, e))
    }

    /// Differences between the index and the episode directories under `root`.
    pub fn check_contents(&self, root: &Path) -> Result<Vec<String>, StoreError> {
        let mut dirs = Vec::new();
        for entry in std::fs::read_dir(root).map_err(|e| StoreError::io(root, e))? {
            let entry = entry.map_err(|e| StoreError::io(root, e))?;
            if entry.path().is_dir() {
                let name = entry.file_name().to_string_lossy().into_owned();
                if !name.starts_with('.') {
                    dirs.push(name);
                }
            }
        }
        dirs.sort();
        let indexed: Vec<&str> = self.episodes.iter().map(|e| e.id.as_str()).collect();
        let mut problems = Vec::new();
        for d in &dirs {
            if !indexed.contains(&d.as_str()) {
                problems.push(format!("directory {d:?} is not in the manifest"));
            }
        }
        for id in indexed {
            if !dirs.iter().any(|d| d == id) {
                problems.push(format!("manifest entry {id:?} has no directory"));
            }
        }
        Ok(problems)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskCount {
    pub verb: String,
    pub count: usize,
}

/// Episode counts per task verb, most frequent first (ties by verb).
pub fn stats(manifest: &Manifest) -> Vec<TaskCount> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &manifest.episodes {
        *counts.entry(e.task.as_str()).or_default() += 1;
    }
    let mut out: Vec<TaskCount> = counts
        .into_iter()
        .map(|(verb, count)| TaskCount {
            verb: verb.to_string(),
            count,
        })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.verb.cmp(&b.verb)));
    out
}

#[cfg(test)]
pub(crate) fn sample_episode(id: &str, n: usize, with_depth: bool) -> Episode {
    use crate::percept::{CameraView, Intrinsics};
    use crate::se3::RigidTransform;
    use image::{Luma, Rgb};
    let view = CameraView::new(
        "front",
        4,
        3,
        Intrinsics {
            fx: 2.0,
            fy: 2.0,
            cx: 2.0,
            cy: 1.5,
        },
        RigidTransform::identity(),
    )
    .unwrap();
    let mut steps = Vec::new();
    for i in 0..n {
        let rgb = RgbImage::from_fn(4, 3, |x, y| Rgb([i as u8, x as u8 * 10, y as u8 * 20]));
        let depth = with_depth.then(|| DepthImage::from_fn(4, 3, |x, _| Luma([500 + x as u16])));
        let mut frames = BTreeMap::new();
        frames.insert("front".to_string(), Frame { rgb, depth });
        let pose = Pose::new(
            Vec3::new(0.01 * i as f64, 0.1, 0.3),
            Quaternion::from_axis_angle(&Vec3::z(), 0.1 * i as f64).unwrap(),
        );
        steps.push(Step {
            pose,
            gripper: if i % 2 == 0 { -1.0 } else { 1.0 },
            action: None,
            frames,
        });
    }
    for i in 0..n.saturating_sub(1) {
        let a = crate::action::crmm(&steps[i].pose, &steps[i + 1].pose);
        steps[i].action = StepAction::from_crmm(&a);
    }
    let mut extra = serde_json::Map::new();
    extra.insert("scene".into(), serde_json::json!({"table": "oak", "seed": 7}));
    Episode {
        id: id.into(),
        origin_dataset: "CALVIN".into(),
        instruction: "open the drawer".into(),
        robot: "franka".into(),
        cameras: CameraRig::new(vec![view]).unwrap(),
        steps,
        extra,
    }
}
