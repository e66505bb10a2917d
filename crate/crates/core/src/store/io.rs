use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_id, DepthImage, Episode, Frame, Step, StepAction, StoreError, FORMAT_VERSION,
    STEP_RECORD_LEN,
};
use crate::percept::{CameraRig, CameraView, CameraViewSpec};
use crate::se3::{Pose, Quaternion, Vec3};

const RECORD_BYTES: usize = STEP_RECORD_LEN * 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub format: u32,
    pub id: String,
    pub origin_dataset: String,
    pub instruction: String,
    pub robot: String,
    pub steps: usize,
    pub views: Vec<String>,
    /// Views that carry depth on every step.
    pub depth_views: Vec<String>,
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    views: Vec<CameraViewSpec>,
}

fn frame_path(dir: &Path, kind: &str, view: &str, step: usize) -> PathBuf {
    dir.join(kind).join(view).join(format!("{step:05}.png"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| StoreError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| StoreError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn encode_steps(steps: &[Step]) -> Vec<u8> {
    let mut out = Vec::with_capacity(steps.len() * RECORD_BYTES);
    for s in steps {
        let p = s.pose.position;
        let q = s.pose.orientation.to_array();
        let (dp, dq) = match &s.action {
            Some(a) => ([a.dpos.x, a.dpos.y, a.dpos.z], a.drot.to_array()),
            None => ([f64::NAN; 3], [f64::NAN; 4]),
        };
        let rec = [
            p.x, p.y, p.z, q[0], q[1], q[2], q[3], s.gripper, dp[0], dp[1], dp[2], dq[0], dq[1],
            dq[2], dq[3],
        ];
        for v in rec {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_record(bytes: &[u8]) -> [f64; STEP_RECORD_LEN] {
    let mut rec = [0.0; STEP_RECORD_LEN];
    for (v, chunk) in rec.iter_mut().zip(bytes.chunks_exact(8)) {
        *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    rec
}

/// Writes `ep` under `root/<id>/`, replacing any previous copy. The episode
/// is assembled in a hidden sibling directory and renamed into place.
pub fn write_episode(root: &Path, ep: &Episode) -> Result<PathBuf, StoreError> {
    check_id(&ep.id)?;
    let views = ep.view_names();
    let depth_views: Vec<String> = views
        .iter()
        .filter(|v| {
            !ep.steps.is_empty()
                && ep
                    .steps
                    .iter()
                    .all(|s| s.frames.get(*v).is_some_and(|f| f.depth.is_some()))
        })
        .cloned()
        .collect();
    for (i, s) in ep.steps.iter().enumerate() {
        if s.frames.keys().ne(views.iter()) {
            return Err(StoreError::malformed(
                Path::new(&ep.id),
                format!("step {i} has a different view set"),
            ));
        }
    }

    fs::create_dir_all(root).map_err(|e| StoreError::io(root, e))?;
    let final_dir = root.join(&ep.id);
    let tmp = root.join(format!(".{}.partial", ep.id));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| StoreError::io(&tmp, e))?;

    let meta = EpisodeMeta {
        format: FORMAT_VERSION,
        id: ep.id.clone(),
        origin_dataset: ep.origin_dataset.clone(),
        instruction: ep.instruction.clone(),
        robot: ep.robot.clone(),
        steps: ep.steps.len(),
        views: views.clone(),
        depth_views: depth_views.clone(),
        extra: ep.extra.clone(),
    };
    write_json(&tmp.join("meta.json"), &meta)?;
    write_json(
        &tmp.join("cameras.json"),
        &CamerasFile {
            views: ep.cameras.views.iter().map(CameraViewSpec::from).collect(),
        },
    )?;

    let bytes = encode_steps(&ep.steps);
    let digest = hex::encode(Sha256::digest(&bytes));
    let steps_path = tmp.join("steps.bin");
    fs::write(&steps_path, &bytes).map_err(|e| StoreError::io(&steps_path, e))?;
    let sum_path = tmp.join("steps.sha256");
    fs::write(&sum_path, format!("{digest}\n")).map_err(|e| StoreError::io(&sum_path, e))?;

    for view in &views {
        let rgb_dir = tmp.join("images").join(view);
        fs::create_dir_all(&rgb_dir).map_err(|e| StoreError::io(&rgb_dir, e))?;
        if depth_views.contains(view) {
            let d = tmp.join("depth").join(view);
            fs::create_dir_all(&d).map_err(|e| StoreError::io(&d, e))?;
        }
    }
    for (i, s) in ep.steps.iter().enumerate() {
        for (view, frame) in &s.frames {
            let path = frame_path(&tmp, "images", view, i);
            frame.rgb.save(&path).map_err(|source| StoreError::Image {
                path: path.clone(),
                source,
            })?;
            if let (true, Some(depth)) = (depth_views.contains(view), &frame.depth) {
                let path = frame_path(&tmp, "depth", view, i);
                depth.save(&path).map_err(|source| StoreError::Image {
                    path: path.clone(),
                    source,
                })?;
            }
        }
    }

    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(|e| StoreError::io(&final_dir, e))?;
    }
    fs::rename(&tmp, &final_dir).map_err(|e| StoreError::io(&final_dir, e))?;
    Ok(final_dir)
}

pub fn read_meta(dir: &Path) -> Result<EpisodeMeta, StoreError> {
    let path = dir.join("meta.json");
    let value: serde_json::Value = read_json(&path)?;
    let found = value.get("format").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(StoreError::SchemaVersion { path, found });
    }
    serde_json::from_value(value).map_err(|source| StoreError::Json { path, source })
}

fn load_png<P>(path: &Path) -> Result<image::ImageBuffer<P, Vec<P::Subpixel>>, StoreError>
where
    P: image::Pixel,
    image::DynamicImage: IntoBuffer<P>,
{
    let img = image::open(path).map_err(|source| StoreError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.into_buffer())
}

trait IntoBuffer<P: image::Pixel> {
    fn into_buffer(self) -> image::ImageBuffer<P, Vec<P::Subpixel>>;
}

impl IntoBuffer<image::Rgb<u8>> for image::DynamicImage {
    fn into_buffer(self) -> image::RgbImage {
        self.into_rgb8()
    }
}

impl IntoBuffer<image::Luma<u16>> for image::DynamicImage {
    fn into_buffer(self) -> DepthImage {
        self.into_luma16()
    }
}

/// Reads the episode stored in `dir`. Any checksum, schema or file error
/// fails the whole read.
pub fn read_episode(dir: &Path) -> Result<Episode, StoreError> {
    let meta = read_meta(dir)?;
    check_id(&meta.id)?;

    let steps_path = dir.join("steps.bin");
    let bytes = fs::read(&steps_path).map_err(|e| StoreError::io(&steps_path, e))?;
    let sum_path = dir.join("steps.sha256");
    let expected = fs::read_to_string(&sum_path)
        .map_err(|e| StoreError::io(&sum_path, e))?
        .trim()
        .to_ascii_lowercase();
    let found = hex::encode(Sha256::digest(&bytes));
    if expected != found {
        return Err(StoreError::Checksum {
            path: steps_path,
            expected,
            found,
        });
    }
    if bytes.len() != meta.steps * RECORD_BYTES {
        return Err(StoreError::malformed(
            &steps_path,
            format!(
                "{} bytes for {} steps of {RECORD_BYTES} bytes",
                bytes.len(),
                meta.steps
            ),
        ));
    }

    let cams: CamerasFile = read_json(&dir.join("cameras.json"))?;
    let views = cams
        .views
        .into_iter()
        .map(CameraView::try_from)
        .collect::<Result<Vec<_>, _>>()?;
    let cameras = CameraRig::new(views)?;

    let n = meta.steps;
    let mut steps = Vec::with_capacity(n);
    for (i, chunk) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let r = decode_record(chunk);
        let pose = Pose::new(
            Vec3::new(r[0], r[1], r[2]),
            Quaternion::from_raw(r[3], r[4], r[5], r[6]),
        );
        let action_fields = &r[8..];
        let action = if action_fields.iter().all(|v| v.is_nan()) {
            None
        } else {
            Some(StepAction {
                dpos: Vec3::new(r[8], r[9], r[10]),
                drot: Quaternion::from_raw(r[11], r[12], r[13], r[14]),
            })
        };
        let mut frames = BTreeMap::new();
        for view in &meta.views {
            let rgb = load_png::<image::Rgb<u8>>(&frame_path(dir, "images", view, i))?;
            let depth = if meta.depth_views.contains(view) {
                Some(load_png::<image::Luma<u16>>(&frame_path(dir, "depth", view, i))?)
            } else {
                None
            };
            frames.insert(view.clone(), Frame { rgb, depth });
        }
        steps.push(Step {
            pose,
            gripper: r[7],
            action,
            frames,
        });
    }

    Ok(Episode {
        id: meta.id,
        origin_dataset: meta.origin_dataset,
        instruction: meta.instruction,
        robot: meta.robot,
        cameras,
        steps,
        extra: meta.extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::sample_episode;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for depth in [false, true] {
            let ep = sample_episode("ep-1", 4, depth);
            let path = write_episode(dir.path(), &ep).unwrap();
            let back = read_episode(&path).unwrap();
            assert_eq!(back, ep);
            assert!(back.steps.last().unwrap().action.is_none());
            let has_depth = back.steps[0].frames["front"].depth.is_some();
            assert_eq!(has_depth, depth);
        }
    }

    #[test]
    fn corrupted_steps_fail_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_episode(dir.path(), &sample_episode("ep", 3, false)).unwrap();
        let bin = path.join("steps.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[17] ^= 0x01;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(read_episode(&path), Err(StoreError::Checksum { .. })));
    }

    #[test]
    fn wrong_format_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_episode(dir.path(), &sample_episode("ep", 2, false)).unwrap();
        let meta_path = path.join("meta.json");
        let text = fs::read_to_string(&meta_path).unwrap();
        fs::write(&meta_path, text.replace("\"format\": 1", "\"format\": 9")).unwrap();
        assert!(matches!(
            read_episode(&path),
            Err(StoreError::SchemaVersion { found: 9, .. })
        ));
    }

    #[test]
    fn bad_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ep = sample_episode("../escape", 2, false);
        assert!(matches!(write_episode(dir.path(), &ep), Err(StoreError::InvalidId(_))));
    }

    #[test]
    fn rewrite_replaces() {
        let dir = tempfile::tempdir().unwrap();
        write_episode(dir.path(), &sample_episode("ep", 5, false)).unwrap();
        let short = sample_episode("ep", 2, false);
        let path = write_episode(dir.path(), &short).unwrap();
        assert_eq!(read_episode(&path).unwrap(), short);
        assert!(!path.join("images/front/00004.png").exists());
    }
}
