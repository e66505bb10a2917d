mod common;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix3x4, Vector4};
use proptest::prelude::*;
use rand::Rng;

use common::random_camera;
use robodata_core::par::Execution;
use robodata_core::percept::{
    make_grid, make_grid_in, project, project_grid, unproject_pixel, voxelize, voxelize_with,
    CameraView, ColoredPoint, GridQuery, MIN_DEPTH,
};
use robodata_core::se3::Vec3;

/// Brute-force binning: one point at a time, cells accumulated in a map.
fn oracle_voxelize(cloud: &[ColoredPoint], grid: &GridQuery) -> BTreeMap<[usize; 3], ([f64; 3], usize)> {
    let dims = grid.dims();
    let (lo, hi) = (grid.min(), grid.max());
    let mut cells: BTreeMap<[usize; 3], ([f64; 3], usize)> = BTreeMap::new();
    'points: for pt in cloud {
        let mut cell = [0; 3];
        for a in 0..3 {
            let x = pt.position[a];
            if x < lo[a] || x > hi[a] || x.is_nan() {
                continue 'points;
            }
            let size = (hi[a] - lo[a]) / dims[a] as f64;
            let i = ((x - lo[a]) / size).floor() as usize;
            cell[a] = if i >= dims[a] { dims[a] - 1 } else { i };
        }
        let e = cells.entry(cell).or_insert(([0.0; 3], 0));
        for c in 0..3 {
            e.0[c] += pt.color[c];
        }
        e.1 += 1;
    }
    cells
}

/// `K [R^T | -R^T t]` assembled directly from the calibration numbers.
fn projection_matrix(view: &CameraView) -> Matrix3x4<f64> {
    let k = view.intrinsics();
    let kmat = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
    let rows = view.world_from_camera().rows();
    let r = Matrix3::from_fn(|i, j| rows[i][j]);
    let t = Vec3::new(rows[0][3], rows[1][3], rows[2][3]);
    let rt = r.transpose();
    let mut ext = Matrix3x4::zeros();
    ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    ext.set_column(3, &(-rt * t));
    kmat * ext
}

fn cloud_strategy() -> impl Strategy<Value = Vec<ColoredPoint>> {
    prop::collection::vec(
        (prop::array::uniform3(-0.6f64..0.6), prop::array::uniform3(0.0f64..1.0)),
        0..1000,
    )
    .prop_map(|pts| {
        pts.into_iter()
            .map(|(p, c)| ColoredPoint {
                position: Vec3::new(p[0], p[1], p[2] + 0.5),
                color: c,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn voxelize_matches_oracle(
        cloud in cloud_strategy(),
        dims in prop::array::uniform3(1usize..=8),
    ) {
        let grid = make_grid(dims[0], dims[1], dims[2]).unwrap();
        let got = voxelize(&cloud, &grid);
        let want = oracle_voxelize(&cloud, &grid);
        let occupied: Vec<[usize; 3]> = (0..grid.len())
            .filter(|&i| got.grid.occupied[i])
            .map(|i| grid.cell(i))
            .collect();
        prop_assert_eq!(occupied, want.keys().copied().collect::<Vec<_>>());
        for (cell, (sum, n)) in &want {
            let i = grid.index(*cell);
            prop_assert_eq!(got.grid.counts[i] as usize, *n);
            for c in 0..3 {
                prop_assert!((got.grid.rgb[i][c] - sum[c] / *n as f64).abs() <= 1e-12);
            }
        }
        let kept: usize = want.values().map(|v| v.1).sum();
        prop_assert_eq!(got.dropped, cloud.len() - kept);
        prop_assert_eq!(voxelize_with(&cloud, &grid, Execution::Sequential), got);
    }

    #[test]
    fn max_face_goes_to_last_cell(
        dims in prop::array::uniform3(1usize..=8),
        lo in prop::array::uniform3(-1.0f64..0.0),
        ext in prop::array::uniform3(0.1f64..2.0),
        frac in prop::array::uniform3(0.0f64..1.0),
        axis in 0usize..3,
    ) {
        let min = Vec3::from(lo);
        let max = min + Vec3::from(ext);
        let grid = make_grid_in(dims, min, max).unwrap();
        let mut p = Vec3::from_fn(|a, _| min[a] + frac[a] * (max[a] - min[a]));
        p[axis] = max[axis];
        let cell = grid.cell_of(&p).unwrap();
        prop_assert_eq!(cell[axis], dims[axis] - 1);
        p[axis] = min[axis];
        prop_assert_eq!(grid.cell_of(&p).unwrap()[axis], 0);
    }

    #[test]
    fn grid_projection_matches_matrix_oracle(seed in any::<u64>(), dims in prop::array::uniform3(1usize..=6)) {
        let mut rng = common::rng(seed);
        let view = random_camera(&mut rng, "cam", 64, 48);
        let grid = make_grid(dims[0], dims[1], dims[2]).unwrap();
        let p = projection_matrix(&view);
        for (pt, proj) in grid.points().iter().zip(project_grid(&view, &grid, Execution::Parallel)) {
            let h = p * Vector4::new(pt.x, pt.y, pt.z, 1.0);
            if h.z <= MIN_DEPTH {
                prop_assert!(!proj.valid);
                continue;
            }
            prop_assert!((proj.u - h.x / h.z).abs() < 1e-9);
            prop_assert!((proj.v - h.y / h.z).abs() < 1e-9);
            prop_assert!((proj.depth - h.z).abs() < 1e-12);
        }
    }
}

#[test]
fn project_unproject_round_trip() {
    let mut rng = common::rng(7);
    for rig in 0..10 {
        let view = random_camera(&mut rng, "cam", 32, 24);
        let mut worst: f64 = 0.0;
        for v in 0..view.height() {
            for u in 0..view.width() {
                let depth = rng.random_range(0.2..3.0);
                let p = unproject_pixel(&view, u as f64, v as f64, depth);
                let back = project(&view, &p);
                assert!(back.valid, "rig {rig} pixel ({u},{v})");
                worst = worst
                    .max((back.u - u as f64).abs())
                    .max((back.v - v as f64).abs())
                    .max((back.depth - depth).abs());
            }
        }
        assert!(worst < 1e-9, "rig {rig}: {worst}");
    }
}
