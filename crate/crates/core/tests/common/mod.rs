#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use nalgebra::{Matrix3, Matrix4, Vector4};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde_json::json;

use robodata_core::percept::{CameraRig, CameraView, Intrinsics};
use robodata_core::se3::{Pose, Quaternion, RigidTransform, RotationMatrix, Vec3};
use robodata_core::store::{Episode, Frame, Step, StepAction};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_quat(rng: &mut impl Rng) -> Quaternion {
    loop {
        let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n2: f64 = c.iter().map(|v| v * v).sum();
        if n2 > 1e-2 && n2 <= 1.0 {
            return Quaternion::normalized(c[0], c[1], c[2], c[3]).unwrap();
        }
    }
}

pub fn vec3(rng: &mut impl Rng, lo: f64, hi: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    )
}

pub fn pose(rng: &mut impl Rng) -> Pose {
    Pose::new(vec3(rng, -1.0, 1.0), unit_quat(rng))
}

pub fn transform(rng: &mut impl Rng) -> RigidTransform {
    RigidTransform::new(unit_quat(rng).to_matrix(), vec3(rng, -2.0, 2.0))
}

/// Raw 4-vector sampled uniformly from the unit-ball shell, for proptest.
pub fn quat_strategy() -> impl Strategy<Value = Quaternion> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("near-zero", |c| c.iter().map(|v| v * v).sum::<f64>() > 1e-2)
        .prop_map(|c| Quaternion::normalized(c[0], c[1], c[2], c[3]).unwrap())
}

pub fn pose_strategy() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-1.0f64..1.0), quat_strategy())
        .prop_map(|(p, q)| Pose::new(Vec3::from(p), q))
}

/// Homogeneous 4x4 matrix built entry by entry from the 3x4 rows.
pub fn homogeneous(t: &RigidTransform) -> Matrix4<f64> {
    let r = t.rows();
    Matrix4::new(
        r[0][0], r[0][1], r[0][2], r[0][3], r[1][0], r[1][1], r[1][2], r[1][3], r[2][0], r[2][1],
        r[2][2], r[2][3], 0.0, 0.0, 0.0, 1.0,
    )
}

pub fn apply_h(m: &Matrix4<f64>, p: &Vec3) -> Vec3 {
    let h = m * Vector4::new(p.x, p.y, p.z, 1.0);
    Vec3::new(h.x, h.y, h.z)
}

pub fn matrix_of(r: &RotationMatrix) -> Matrix3<f64> {
    *r.matrix()
}

/// Camera looking down at the workspace from above with some jitter.
pub fn random_camera(rng: &mut impl Rng, name: &str, w: u32, h: u32) -> CameraView {
    let tilt = Quaternion::from_axis_angle(&vec3(rng, -1.0, 1.0), rng.random_range(0.0..0.3)).unwrap();
    let down = RotationMatrix::rot_x(std::f64::consts::PI);
    let rot = tilt.to_matrix().compose(&down);
    let t = Vec3::new(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(1.0..2.0),
    );
    let f = rng.random_range(0.6..1.5) * w as f64;
    CameraView::new(
        name,
        w,
        h,
        Intrinsics {
            fx: f,
            fy: f * rng.random_range(0.9..1.1),
            cx: w as f64 * rng.random_range(0.4..0.6),
            cy: h as f64 * rng.random_range(0.4..0.6),
        },
        RigidTransform::new(rot, t),
    )
    .unwrap()
}

/// Synthetic canonical episode with consistent CRMM actions.
pub fn synthetic_episode(rng: &mut impl Rng, id: &str, size: (u32, u32), with_depth: bool) -> Episode {
    let (h, w) = size;
    let n = rng.random_range(2..7);
    let mut poses = vec![Pose::new(vec3(rng, -0.3, 0.3) + Vec3::new(0.0, 0.0, 0.5), unit_quat(rng))];
    for _ in 1..n {
        let prev = poses.last().unwrap();
        let dq = Quaternion::from_axis_angle(&vec3(rng, -1.0, 1.0), rng.random_range(-0.2..0.2))
            .unwrap_or(Quaternion::IDENTITY);
        poses.push(Pose::new(
            prev.position + vec3(rng, -0.02, 0.02),
            dq.mul(&prev.orientation),
        ));
    }
    let cam = random_camera(rng, "front", w, h);
    let wrist = random_camera(rng, "wrist", w, h);
    let steps = (0..n)
        .map(|i| {
            let mut frames = BTreeMap::new();
            for view in ["front", "wrist"] {
                let rgb = RgbImage::from_fn(w, h, |_, _| Rgb(rng.random()));
                let depth = with_depth
                    .then(|| ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w, h, |_, _| Luma([rng.random_range(0..5000)])));
                frames.insert(view.to_string(), Frame { rgb, depth });
            }
            let action = poses.get(i + 1).map(|next| {
                let a = robodata_core::action::crmm(&poses[i], next);
                StepAction::from_crmm(&a).unwrap()
            });
            Step {
                pose: poses[i],
                gripper: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                action,
                frames,
            }
        })
        .collect();
    let mut extra = serde_json::Map::new();
    extra.insert("seed".into(), json!(rng.random::<u32>()));
    extra.insert("nested".into(), json!({"a": [1.5, -2.25, 1e-300], "b": null}));
    Episode {
        id: id.into(),
        origin_dataset: "CALVIN".into(),
        instruction: format!("stack block {}", rng.random::<u16>()),
        robot: "franka".into(),
        cameras: CameraRig::new(vec![cam, wrist]).unwrap(),
        steps,
        extra,
    }
}

/// Writes a native-layout episode (one `front` camera, 8x8 images).
pub fn write_native(root: &Path, name: &str, instruction: &str, positions: &[[f64; 3]], grippers: &[f64]) -> PathBuf {
    let dir = root.join(name);
    fs::create_dir_all(dir.join("images/front")).unwrap();
    fs::create_dir_all(dir.join("depth/front")).unwrap();
    let steps: Vec<_> = positions
        .iter()
        .zip(grippers)
        .enumerate()
        .map(|(i, (p, g))| {
            let a = 0.07 * i as f64;
            json!({"position": p, "orientation": [(a / 2.0).cos(), 0.0, (a / 2.0).sin(), 0.0], "gripper": g})
        })
        .collect();
    let ep = json!({
        "instruction": instruction,
        "cameras": [{
            "name": "front", "width": 8, "height": 8, "fx": 8.0, "fy": 8.0, "cx": 4.0, "cy": 4.0,
            "world_from_camera": [[1.0, 0.0, 0.0, 0.0], [0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 1.2]]
        }],
        "steps": steps,
    });
    fs::write(dir.join("episode.json"), ep.to_string()).unwrap();
    for i in 0..positions.len() {
        RgbImage::from_fn(8, 8, |x, y| Rgb([(x * 31) as u8, (y * 17) as u8, i as u8]))
            .save(dir.join(format!("images/front/{i:05}.png")))
            .unwrap();
        ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(8, 8, |x, y| Luma([800 + (x * y) as u16]))
            .save(dir.join(format!("depth/front/{i:05}.png")))
            .unwrap();
    }
    dir
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().into(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
