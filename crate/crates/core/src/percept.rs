//! Geometry behind unified-view perception: grid queries over the workspace,
//! pinhole projection, bilinear feature sampling, depth unprojection and
//! occupancy voxelization.
//!
//! Extrinsics are stored world-from-camera. Pixel coordinates place pixel
//! `(col, row)` at `(u, v) = (col, row)`.

use std::io::{self, Read, Write};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{WORKSPACE_MAX, WORKSPACE_MIN};
use crate::par::{self, Execution};
use crate::se3::{GeometryError, RigidTransform, Vec3};

/// Minimum camera-frame depth for a point to project.
pub const MIN_DEPTH: f64 = 1e-6;
/// Slack on the image-bounds test so border pixels survive a round trip.
pub const PIXEL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PerceptError {
    #[error("grid dimensions must be at least 1, got {0:?}")]
    InvalidDims([usize; 3]),
    #[error("camera {name:?}: {reason}")]
    InvalidCamera { name: String, reason: String },
    #[error("camera {name:?}: {source}")]
    CameraGeometry {
        name: String,
        #[source]
        source: GeometryError,
    },
    #[error("sample ({u}, {v}) outside feature map of {width}x{height}")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("occupancy block: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// One calibrated view of a [`CameraRig`].
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    name: String,
    width: u32,
    height: u32,
    intrinsics: Intrinsics,
    world_from_camera: RigidTransform,
    camera_from_world: RigidTransform,
}

impl CameraView {
    pub fn new(
        name: impl Into<String>,
        width: u32,
        height: u32,
        intrinsics: Intrinsics,
        world_from_camera: RigidTransform,
    ) -> Result<Self, PerceptError> {
        let name = name.into();
        let Intrinsics { fx, fy, cx, cy } = intrinsics;
        let invalid = |reason: String| PerceptError::InvalidCamera {
            name: name.clone(),
            reason,
        };
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(invalid(format!("focal lengths must be positive (fx {fx}, fy {fy})")));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(invalid(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            camera_from_world: world_from_camera.inverse(),
            name,
            width,
            height,
            intrinsics,
            world_from_camera,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }
    pub fn world_from_camera(&self) -> &RigidTransform {
        &self.world_from_camera
    }

    /// Same camera with its extrinsics re-based by `world_from_world`.
    pub fn rebased(&self, new_world_from_old: &RigidTransform) -> Self {
        let w = new_world_from_old.compose(&self.world_from_camera);
        Self {
            camera_from_world: w.inverse(),
            world_from_camera: w,
            ..self.clone()
        }
    }
}

/// Serialized camera view (`cameras.json` entries).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraViewSpec {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Top three rows of the homogeneous world-from-camera matrix.
    pub world_from_camera: [[f64; 4]; 3],
}

impl TryFrom<CameraViewSpec> for CameraView {
    type Error = PerceptError;
    fn try_from(s: CameraViewSpec) -> Result<Self, Self::Error> {
        let extr =
            RigidTransform::from_rows(s.world_from_camera).map_err(|source| {
                PerceptError::CameraGeometry {
                    name: s.name.clone(),
                    source,
                }
            })?;
        CameraView::new(
            s.name,
            s.width,
            s.height,
            Intrinsics {
                fx: s.fx,
                fy: s.fy,
                cx: s.cx,
                cy: s.cy,
            },
            extr,
        )
    }
}

impl From<&CameraView> for CameraViewSpec {
    fn from(v: &CameraView) -> Self {
        CameraViewSpec {
            name: v.name.clone(),
            width: v.width,
            height: v.height,
            fx: v.intrinsics.fx,
            fy: v.intrinsics.fy,
            cx: v.intrinsics.cx,
            cy: v.intrinsics.cy,
            world_from_camera: v.world_from_camera.rows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CameraRig {
    pub views: Vec<CameraView>,
}

impl CameraRig {
    pub fn new(views: Vec<CameraView>) -> Result<Self, PerceptError> {
        let mut names: Vec<&str> = views.iter().map(|v| v.name()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(PerceptError::InvalidCamera {
                name: w[0].to_string(),
                reason: "duplicate view name".into(),
            });
        }
        Ok(Self { views })
    }

    pub fn view(&self, name: &str) -> Option<&CameraView> {
        self.views.iter().find(|v| v.name == name)
    }

    pub fn rebased(&self, new_world_from_old: &RigidTransform) -> Self {
        Self {
            views: self
                .views
                .iter()
                .map(|v| v.rebased(new_world_from_old))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

pub fn project(view: &CameraView, p_world: &Vec3) -> Projection {
    let p = view.camera_from_world.transform_point(p_world);
    let Intrinsics { fx, fy, cx, cy } = view.intrinsics;
    let u = fx * p.x / p.z + cx;
    let v = fy * p.y / p.z + cy;
    let valid = p.z > MIN_DEPTH
        && u >= -PIXEL_TOL
        && u <= (view.width - 1) as f64 + PIXEL_TOL
        && v >= -PIXEL_TOL
        && v <= (view.height - 1) as f64 + PIXEL_TOL;
    Projection {
        u,
        v,
        depth: p.z,
        valid,
    }
}

/// Regular voxel-center lattice over the unified workspace.
///
/// Index order is `(l * B + b) * P + p`: `l` along X, `b` along Y and `p`
/// (pillar height) along Z.
#[derive(Debug, Clone, PartialEq)]
pub struct GridQuery {
    dims: [usize; 3],
    min: Vec3,
    max: Vec3,
    voxel: Vec3,
    points: Vec<Vec3>,
}

impl GridQuery {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn min(&self) -> Vec3 {
        self.min
    }
    pub fn max(&self) -> Vec3 {
        self.max
    }
    pub fn voxel_size(&self) -> Vec3 {
        self.voxel
    }
    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn index(&self, cell: [usize; 3]) -> usize {
        (cell[0] * self.dims[1] + cell[1]) * self.dims[2] + cell[2]
    }

    pub fn cell(&self, index: usize) -> [usize; 3] {
        let p = index % self.dims[2];
        let rest = index / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], p]
    }

    pub fn center(&self, cell: [usize; 3]) -> Vec3 {
        Vec3::from_fn(|a, _| self.min[a] + (cell[a] as f64 + 0.5) * self.voxel[a])
    }

    /// Cell containing `p`: half-open `[lo, hi)` per axis, with the max face
    /// belonging to the last cell. `None` outside the bounds.
    pub fn cell_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut cell = [0usize; 3];
        for a in 0..3 {
            let x = p[a];
            if !(x >= self.min[a] && x <= self.max[a]) {
                return None;
            }
            let i = ((x - self.min[a]) / self.voxel[a]).floor() as usize;
            cell[a] = i.min(self.dims[a] - 1);
        }
        Some(cell)
    }
}

pub fn make_grid(l: usize, b: usize, p: usize) -> Result<GridQuery, PerceptError> {
    make_grid_in(
        [l, b, p],
        Vec3::from(WORKSPACE_MIN),
        Vec3::from(WORKSPACE_MAX),
    )
}

pub fn make_grid_in(dims: [usize; 3], min: Vec3, max: Vec3) -> Result<GridQuery, PerceptError> {
    if dims.contains(&0) {
        return Err(PerceptError::InvalidDims(dims));
    }
    let voxel = Vec3::from_fn(|a, _| (max[a] - min[a]) / dims[a] as f64);
    let mut grid = GridQuery {
        dims,
        min,
        max,
        voxel,
        points: Vec::with_capacity(dims[0] * dims[1] * dims[2]),
    };
    for l in 0..dims[0] {
        for b in 0..dims[1] {
            for p in 0..dims[2] {
                let c = grid.center([l, b, p]);
                grid.points.push(c);
            }
        }
    }
    Ok(grid)
}

/// Projects every grid point into `view`, in grid index order.
pub fn project_grid(view: &CameraView, grid: &GridQuery, exec: Execution) -> Vec<Projection> {
    par::map(exec, grid.points(), |p| project(view, p))
}

/// Dense `H × W × C` feature map, row-major over `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, PerceptError> {
        if data.len() != height * width * channels || height == 0 || width == 0 {
            return Err(PerceptError::SizeMismatch(format!(
                "{} values for a {height}x{width}x{channels} map",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }
}

pub fn sample_bilinear(map: &FeatureMap, u: f64, v: f64) -> Result<Vec<f64>, PerceptError> {
    let (w, h) = (map.width, map.height);
    let (umax, vmax) = ((w - 1) as f64, (h - 1) as f64);
    let inside = |x: f64, hi: f64| x >= -PIXEL_TOL && x <= hi + PIXEL_TOL;
    if !(inside(u, umax) && inside(v, vmax)) {
        return Err(PerceptError::OutOfBounds {
            u,
            v,
            width: w,
            height: h,
        });
    }
    let (u, v) = (u.clamp(0.0, umax), v.clamp(0.0, vmax));
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let (a, b, c, d) = (map.at(y0, x0), map.at(y0, x1), map.at(y1, x0), map.at(y1, x1));
    Ok((0..map.channels)
        .map(|k| {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bottom = c[k] + (d[k] - c[k]) * fx;
            top + (bottom - top) * fy
        })
        .collect())
}

/// Depth in meters, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self, PerceptError> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(PerceptError::SizeMismatch(format!(
                "{} depth values for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// From a 16-bit depth image in millimeters; zero stays zero (no reading).
    pub fn from_millimeters(img: &image::ImageBuffer<image::Luma<u16>, Vec<u16>>) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0[0] as f64 / 1000.0).collect(),
        }
    }

    pub fn get(&self, col: u32, row: u32) -> f64 {
        self.data[(row * self.width + col) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: Vec3,
    /// RGB in `[0, 1]`.
    pub color: [f64; 3],
}

pub fn unproject_pixel(view: &CameraView, u: f64, v: f64, depth: f64) -> Vec3 {
    let Intrinsics { fx, fy, cx, cy } = view.intrinsics;
    let p_cam = Vec3::new(depth * (u - cx) / fx, depth * (v - cy) / fy, depth);
    view.world_from_camera.transform_point(&p_cam)
}

pub fn unproject_depth(
    view: &CameraView,
    depth: &DepthMap,
    rgb: &RgbImage,
) -> Result<Vec<ColoredPoint>, PerceptError> {
    unproject_depth_with(view, depth, rgb, Execution::default())
}

/// Colored world-frame points for every pixel with a positive finite depth.
pub fn unproject_depth_with(
    view: &CameraView,
    depth: &DepthMap,
    rgb: &RgbImage,
    exec: Execution,
) -> Result<Vec<ColoredPoint>, PerceptError> {
    if (depth.width, depth.height) != rgb.dimensions() {
        return Err(PerceptError::SizeMismatch(format!(
            "depth {}x{} vs rgb {}x{}",
            depth.width,
            depth.height,
            rgb.width(),
            rgb.height()
        )));
    }
    if (depth.width, depth.height) != (view.width, view.height) {
        return Err(PerceptError::SizeMismatch(format!(
            "depth {}x{} vs camera {:?} {}x{}",
            depth.width, depth.height, view.name, view.width, view.height
        )));
    }
    let rows = par::map_range(exec, depth.height as usize, |row| {
        let row = row as u32;
        (0..depth.width)
            .filter_map(|col| {
                let d = depth.get(col, row);
                if !(d.is_finite() && d > 0.0) {
                    return None;
                }
                let px = rgb.get_pixel(col, row).0;
                Some(ColoredPoint {
                    position: unproject_pixel(view, col as f64, row as f64, d),
                    color: px.map(|c| c as f64 / 255.0),
                })
            })
            .collect::<Vec<_>>()
    });
    Ok(rows.into_iter().flatten().collect())
}

/// `L × B × P` occupancy and mean color, indexed like [`GridQuery`].
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub dims: [usize; 3],
    pub occupied: Vec<bool>,
    /// Mean member color; zero where unoccupied.
    pub rgb: Vec<[f64; 3]>,
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voxelized {
    pub grid: OccupancyGrid,
    /// Points that fell outside the grid bounds.
    pub dropped: usize,
}

impl OccupancyGrid {
    pub fn empty(dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            dims,
            occupied: vec![false; n],
            rgb: vec![[0.0; 3]; n],
            counts: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|o| **o).count()
    }

    /// Voxel-center positions of occupied cells, in index order.
    pub fn occupied_positions(&self, grid: &GridQuery) -> Vec<Vec3> {
        self.occupied
            .iter()
            .enumerate()
            .filter(|(_, o)| **o)
            .map(|(i, _)| grid.points()[i])
            .collect()
    }

    const MAGIC: &'static [u8; 4] = b"OCCG";
    const VERSION: u32 = 1;

    /// Binary block: `"OCCG"`, u32 version, u32 L/B/P, occupancy bitset
    /// (LSB-first, `ceil(n/8)` bytes), then per occupied cell in index order
    /// three f64 RGB values followed by all u32 counts. Little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        for d in self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut bits = vec![0u8; self.len().div_ceil(8)];
        for (i, o) in self.occupied.iter().enumerate() {
            if *o {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bits)?;
        for (i, o) in self.occupied.iter().enumerate() {
            if *o {
                for c in self.rgb[i] {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
        }
        for (i, o) in self.occupied.iter().enumerate() {
            if *o {
                w.write_all(&self.counts[i].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, PerceptError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(PerceptError::Format("bad magic".into()));
        }
        let read_u32 = |r: &mut R| -> io::Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(PerceptError::Format(format!("unsupported version {version}")));
        }
        let dims = [
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
        ];
        let mut grid = Self::empty(dims);
        let mut bits = vec![0u8; grid.len().div_ceil(8)];
        r.read_exact(&mut bits)?;
        for (i, o) in grid.occupied.iter_mut().enumerate() {
            *o = bits[i / 8] & (1 << (i % 8)) != 0;
        }
        let occupied: Vec<usize> = (0..grid.len()).filter(|i| grid.occupied[*i]).collect();
        for &i in &occupied {
            for c in 0..3 {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                grid.rgb[i][c] = f64::from_le_bytes(b);
            }
        }
        for &i in &occupied {
            grid.counts[i] = read_u32(&mut r)?;
        }
        Ok(grid)
    }
}

pub fn voxelize(cloud: &[ColoredPoint], grid: &GridQuery) -> Voxelized {
    voxelize_with(cloud, grid, Execution::default())
}

/// Bins points into cells and averages their colors.
///
/// Cell lookup may run in parallel; accumulation then runs in point order so
/// results are bit-identical for either execution mode.
pub fn voxelize_with(cloud: &[ColoredPoint], grid: &GridQuery, exec: Execution) -> Voxelized {
    let cells = par::map(exec, cloud, |pt| grid.cell_of(&pt.position).map(|c| grid.index(c)));
    let mut out = OccupancyGrid::empty(grid.dims());
    let mut dropped = 0;
    for (pt, cell) in cloud.iter().zip(cells) {
        let Some(i) = cell else {
            dropped += 1;
            continue;
        };
        out.counts[i] += 1;
        for c in 0..3 {
            out.rgb[i][c] += pt.color[c];
        }
    }
    for i in 0..out.len() {
        if out.counts[i] > 0 {
            out.occupied[i] = true;
            let n = out.counts[i] as f64;
            for c in 0..3 {
                out.rgb[i][c] /= n;
            }
        }
    }
    Voxelized { grid: out, dropped }
}
