//! Reading episodes in the generic native layout:
//!
//! ```text
//! <native>/<episode>/episode.json
//! <native>/<episode>/images/<view>/<step:05>.png
//! <native>/<episode>/depth/<view>/<step:05>.png    optional, 16-bit mm
//! ```
//!
//! `episode.json` holds `instruction`, optional `robot`, `cameras` (view specs
//! with extrinsics in the dataset's native frame) and `steps`, each with
//! `position`, optional `orientation` (`[w, x, y, z]`), `gripper` in the
//! dataset's native range and an optional native `action`. Any other top-level
//! field is carried through untouched.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use serde::Deserialize;

use super::{check_id, DepthImage, Episode, Frame, ImageSize, Step, StepAction, StoreError};
use crate::action::crmm;
use crate::align::{align_pose, DatasetProfile, SourceActionRepr};
use crate::percept::{CameraRig, CameraView, CameraViewSpec};
use crate::se3::{Pose, Quaternion, Vec3};

#[derive(Debug, Clone, Deserialize)]
pub struct NativeStep {
    pub position: [f64; 3],
    #[serde(default)]
    pub orientation: Option<[f64; 4]>,
    pub gripper: f64,
    #[serde(default)]
    pub action: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NativeEpisode {
    pub instruction: String,
    #[serde(default = "unknown_robot")]
    pub robot: String,
    #[serde(default)]
    pub cameras: Vec<CameraViewSpec>,
    pub steps: Vec<NativeStep>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

fn unknown_robot() -> String {
    "unknown".into()
}

/// Result of ingesting one native episode.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub episode: Episode,
    /// Steps whose aligned position lies outside the unified workspace.
    pub workspace_warnings: usize,
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// Episode directories under `native_dir`, sorted by name.
pub fn list_native_episodes(native_dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(native_dir).map_err(|e| StoreError::io(native_dir, e))? {
        let entry = entry.map_err(|e| StoreError::io(native_dir, e))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_dir() && !hidden {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn expected_action_len(repr: SourceActionRepr) -> &'static [usize] {
    match repr {
        // translation (+ gripper)
        SourceActionRepr::None => &[3, 4],
        // euler (+ gripper)
        SourceActionRepr::Eadm => &[6, 7],
        // translation + flattened matrix (+ gripper)
        SourceActionRepr::Crmm | SourceActionRepr::Pcm => &[12, 13],
        // absolute pose as position + quaternion (+ gripper)
        SourceActionRepr::Absolute => &[7, 8],
    }
}

fn load_rgb(path: &Path, size: ImageSize) -> Result<image::RgbImage, StoreError> {
    let img = image::open(path)
        .map_err(|source| StoreError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    if img.dimensions() == (size.width, size.height) {
        Ok(img)
    } else {
        Ok(imageops::resize(&img, size.width, size.height, FilterType::Triangle))
    }
}

fn load_depth(path: &Path, size: ImageSize) -> Result<DepthImage, StoreError> {
    let img = image::open(path)
        .map_err(|source| StoreError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma16();
    if img.dimensions() == (size.width, size.height) {
        Ok(img)
    } else {
        // Interpolating depth would invent surfaces between objects.
        Ok(imageops::resize(&img, size.width, size.height, FilterType::Nearest))
    }
}

fn resize_camera(spec: &CameraViewSpec, size: ImageSize) -> CameraViewSpec {
    let sx = size.width as f64 / spec.width as f64;
    let sy = size.height as f64 / spec.height as f64;
    CameraViewSpec {
        width: size.width,
        height: size.height,
        fx: spec.fx * sx,
        fy: spec.fy * sy,
        cx: spec.cx * sx,
        cy: spec.cy * sy,
        ..spec.clone()
    }
}

/// Ingests one native episode directory into the unified frame.
///
/// Poses and cameras are mapped through the profile's rigid transform,
/// grippers are remapped to {-1, +1} and actions are regenerated as CRMM
/// deltas between consecutive aligned poses. Profiles without rotation
/// actions get an exact identity rotation and a fixed orientation.
pub fn ingest_episode(
    dir: &Path,
    profile: &DatasetProfile,
    image_size: ImageSize,
) -> Result<Ingested, StoreError> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let id = format!("{}-{}", slug(&profile.name), slug(&name));
    check_id(&id)?;

    let json_path = dir.join("episode.json");
    let text = fs::read_to_string(&json_path).map_err(|e| StoreError::io(&json_path, e))?;
    let native: NativeEpisode = serde_json::from_str(&text).map_err(|source| StoreError::Json {
        path: json_path.clone(),
        source,
    })?;

    let allowed = expected_action_len(profile.action_repr);
    let rotation_free = profile.action_repr == SourceActionRepr::None;
    let mut poses = Vec::with_capacity(native.steps.len());
    let mut grippers = Vec::with_capacity(native.steps.len());
    let mut workspace_warnings = 0;
    for (i, s) in native.steps.iter().enumerate() {
        if let Some(a) = &s.action {
            if !allowed.contains(&a.len()) {
                return Err(StoreError::malformed(
                    &json_path,
                    format!(
                        "step {i}: native action has {} values, expected one of {allowed:?}",
                        a.len()
                    ),
                ));
            }
        }
        let q = match s.orientation {
            // Rotation is not tracked; a varying orientation would contradict
            // the identity rotation actions.
            _ if rotation_free => Quaternion::IDENTITY,
            Some([w, x, y, z]) => Quaternion::normalized(w, x, y, z).map_err(|e| {
                StoreError::malformed(&json_path, format!("step {i}: orientation: {e}"))
            })?,
            None => Quaternion::IDENTITY,
        };
        let p = Vec3::from(s.position);
        if !p.iter().all(|v| v.is_finite()) {
            return Err(StoreError::malformed(&json_path, format!("step {i}: non-finite position")));
        }
        let aligned = align_pose(profile, &Pose::new(p, q));
        if !aligned.warnings.is_empty() {
            workspace_warnings += 1;
        }
        poses.push(aligned.pose);
        grippers.push(
            profile
                .gripper_map
                .remap(s.gripper)
                .map_err(|e| StoreError::malformed(&json_path, format!("step {i}: {e}")))?,
        );
    }

    let specs: Vec<CameraViewSpec> = native
        .cameras
        .iter()
        .map(|c| resize_camera(c, image_size))
        .collect();
    let views = specs
        .into_iter()
        .map(CameraView::try_from)
        .collect::<Result<Vec<_>, _>>()?;
    let cameras = CameraRig::new(views)?.rebased(&profile.world_from_native);
    let view_names: Vec<String> = cameras.views.iter().map(|v| v.name().to_string()).collect();

    let mut steps = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let action = poses.get(i + 1).map(|next| {
            if rotation_free {
                StepAction {
                    dpos: next.position - pose.position,
                    drot: Quaternion::IDENTITY,
                }
            } else {
                StepAction::from_crmm(&crmm(pose, next)).expect("crmm carries a matrix")
            }
        });
        let mut frames = BTreeMap::new();
        for view in &view_names {
            let rgb_path = dir.join("images").join(view).join(format!("{i:05}.png"));
            let rgb = load_rgb(&rgb_path, image_size)?;
            let depth_path = dir.join("depth").join(view).join(format!("{i:05}.png"));
            let depth = if depth_path.exists() {
                Some(load_depth(&depth_path, image_size)?)
            } else {
                None
            };
            frames.insert(view.clone(), Frame { rgb, depth });
        }
        steps.push(Step {
            pose: *pose,
            gripper: grippers[i],
            action,
            frames,
        });
    }

    Ok(Ingested {
        episode: Episode {
            id,
            origin_dataset: profile.name.clone(),
            instruction: native.instruction,
            robot: native.robot,
            cameras,
            steps,
            extra: native.extra,
        },
        workspace_warnings,
    })
}

/// Lazily ingests every episode under `native_dir` in name order. Each item
/// carries the source directory so failures can be reported and skipped.
pub fn ingest<'a>(
    native_dir: &Path,
    profile: &'a DatasetProfile,
    image_size: ImageSize,
) -> Result<impl Iterator<Item = (PathBuf, Result<Ingested, StoreError>)> + 'a, StoreError> {
    let dirs = list_native_episodes(native_dir)?;
    Ok(dirs.into_iter().map(move |d| {
        let r = ingest_episode(&d, profile, image_size);
        (d, r)
    }))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use image::{Luma, Rgb, RgbImage};
    use serde_json::json;

    /// Writes a small native episode with one `front` camera.
    pub fn write_native(
        root: &Path,
        name: &str,
        positions: &[[f64; 3]],
        grippers: &[f64],
        image_hw: (u32, u32),
        with_depth: bool,
    ) -> PathBuf {
        let dir = root.join(name);
        let (h, w) = image_hw;
        let steps: Vec<_> = positions
            .iter()
            .zip(grippers)
            .enumerate()
            .map(|(i, (p, g))| {
                let a = 0.05 * i as f64;
                json!({
                    "position": p,
                    "orientation": [(a / 2.0).cos(), 0.0, 0.0, (a / 2.0).sin()],
                    "gripper": g,
                })
            })
            .collect();
        let ep = json!({
            "instruction": format!("Pick the block {name}"),
            "robot": "franka",
            "scene": {"lighting": "dim", "objects": ["block", "bowl"]},
            "cameras": [{
                "name": "front", "width": w, "height": h,
                "fx": w as f64, "fy": w as f64, "cx": w as f64 / 2.0, "cy": h as f64 / 2.0,
                "world_from_camera": [[1.0, 0.0, 0.0, 0.0], [0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 1.2]]
            }],
            "steps": steps,
        });
        fs::create_dir_all(dir.join("images/front")).unwrap();
        fs::write(dir.join("episode.json"), serde_json::to_string_pretty(&ep).unwrap()).unwrap();
        if with_depth {
            fs::create_dir_all(dir.join("depth/front")).unwrap();
        }
        for i in 0..positions.len() {
            let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 + i as u32) as u8, (y * 5) as u8, 99]));
            img.save(dir.join(format!("images/front/{i:05}.png"))).unwrap();
            if with_depth {
                let d = DepthImage::from_fn(w, h, |x, _| Luma([1000 + x as u16]));
                d.save(dir.join(format!("depth/front/{i:05}.png"))).unwrap();
            }
        }
        dir
    }
}
