//! Camera models, rigid transforms, voxel grid indexing and LiDAR projection.
//!
//! Frames:
//! - ego: x forward, y left, z up (meters).
//! - camera: x right, y down, z along the optical axis.
//! - pixels: `u` along the image width, `v` along the height, origin at the
//!   top-left, pixel centers at integer coordinates.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::NUM_CLASSES;

pub type Vec3 = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-9;

/// Rotation plus translation. `apply(p) = R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("rigid transform", "non-finite entry"));
        }
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if ortho_err > ORTHO_TOL {
            return Err(Error::invalid(
                "rigid transform",
                format!("rotation is not orthonormal (|RᵀR − I| = {ortho_err:e})"),
            ));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid(
                "rigid transform",
                format!("rotation determinant {det} is not 1"),
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about +z by `yaw` radians, followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self {
            rotation: yaw_matrix(yaw),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `R·p + t` for every point.
pub fn transform_points(points: &[Vec3], t: &RigidTransform) -> Vec<Vec3> {
    points.iter().map(|p| t.apply(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole camera with an extrinsic pose relative to the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    intrinsics_inv: Matrix3<f64>,
    cam_to_ego: RigidTransform,
    ego_to_cam: RigidTransform,
    height: usize,
    width: usize,
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        cam_to_ego: RigidTransform,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("camera", "image size must be positive"));
        }
        if !intrinsics.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("camera", "non-finite intrinsics"));
        }
        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 {
            return Err(Error::invalid("camera", "focal lengths must be positive"));
        }
        if intrinsics[(1, 0)] != 0.0
            || intrinsics[(2, 0)] != 0.0
            || intrinsics[(2, 1)] != 0.0
            || intrinsics[(2, 2)] != 1.0
        {
            return Err(Error::invalid(
                "camera",
                "intrinsics must be upper triangular with K[2][2] = 1",
            ));
        }
        let intrinsics_inv = intrinsics
            .try_inverse()
            .ok_or_else(|| Error::invalid("camera", "singular intrinsics"))?;
        Ok(Self {
            intrinsics,
            intrinsics_inv,
            ego_to_cam: cam_to_ego.inverse(),
            cam_to_ego,
            height,
            width,
        })
    }

    /// Zero-skew camera at `position` looking horizontally along `yaw`.
    pub fn forward_facing(
        position: Vec3,
        yaw: f64,
        focal: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let k = Matrix3::new(
            focal,
            0.0,
            (width as f64 - 1.0) / 2.0,
            0.0,
            focal,
            (height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        let pose = RigidTransform::new(yaw_matrix(yaw) * camera_to_ego_axes(), position)?;
        Self::new(k, pose, height, width)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn cam_to_ego(&self) -> &RigidTransform {
        &self.cam_to_ego
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Camera center in the ego frame.
    pub fn center(&self) -> Vec3 {
        *self.cam_to_ego.translation()
    }

    /// Projects without the image-bounds check. `None` only when depth ≤ 0.
    pub fn project_unbounded(&self, point: &Vec3) -> Option<Projection> {
        let pc = self.ego_to_cam.apply(point);
        if !(pc.z > 0.0) {
            return None;
        }
        let uvw = self.intrinsics * pc;
        Some(Projection {
            u: uvw.x / uvw.z,
            v: uvw.y / uvw.z,
            depth: pc.z,
        })
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }

    /// Ego point at z-depth `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let pc = self.intrinsics_inv * Vec3::new(u, v, 1.0) * depth;
        self.cam_to_ego.apply(&pc)
    }

    /// Direction in the ego frame whose camera-z component is 1.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        self.cam_to_ego.rotation() * (self.intrinsics_inv * Vec3::new(u, v, 1.0))
    }
}

/// Maps camera axes (x right, y down, z forward) onto ego axes facing +x.
pub fn camera_to_ego_axes() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

/// Projects an ego point into `cam`; `None` behind the camera or outside
/// `[0, W) × [0, H)`.
pub fn project_ego_point(point: &Vec3, cam: &CameraModel) -> Option<Projection> {
    cam.project_unbounded(point)
        .filter(|p| cam.contains_pixel(p.u, p.v))
}

/// Axis-aligned voxel grid in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridJson", into = "GridJson")]
pub struct VoxelGridSpec {
    min_corner: [f64; 3],
    max_corner: [f64; 3],
    voxel_size: f64,
    shape: [usize; 3],
}

#[derive(Serialize, Deserialize)]
struct GridJson {
    min_corner: [f64; 3],
    max_corner: [f64; 3],
    voxel_size: f64,
}

impl TryFrom<GridJson> for VoxelGridSpec {
    type Error = Error;
    fn try_from(g: GridJson) -> Result<Self> {
        VoxelGridSpec::new(g.min_corner, g.max_corner, g.voxel_size)
    }
}

impl From<VoxelGridSpec> for GridJson {
    fn from(g: VoxelGridSpec) -> Self {
        GridJson {
            min_corner: g.min_corner,
            max_corner: g.max_corner,
            voxel_size: g.voxel_size,
        }
    }
}

impl VoxelGridSpec {
    pub fn new(min_corner: [f64; 3], max_corner: [f64; 3], voxel_size: f64) -> Result<Self> {
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(Error::invalid("voxel grid", "voxel_size must be positive"));
        }
        let mut shape = [0usize; 3];
        for axis in 0..3 {
            let (lo, hi) = (min_corner[axis], max_corner[axis]);
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::invalid(
                    "voxel grid",
                    format!("axis {axis}: need finite min < max"),
                ));
            }
            let cells = (hi - lo) / voxel_size;
            let rounded = cells.round();
            if (cells - rounded).abs() > 1e-6 || rounded < 1.0 || rounded > 1e6 {
                return Err(Error::invalid(
                    "voxel grid",
                    format!("axis {axis}: extent is not an integral number of voxels ({cells})"),
                ));
            }
            shape[axis] = rounded as usize;
        }
        Ok(Self {
            min_corner,
            max_corner,
            voxel_size,
            shape,
        })
    }

    /// `[-40, -40, -1] .. [40, 40, 5.4]` at 0.4 m: 200 × 200 × 16.
    pub fn occ3d() -> Self {
        Self::new([-40.0, -40.0, -1.0], [40.0, 40.0, 5.4], 0.4).expect("valid occ3d grid")
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn min_corner(&self) -> [f64; 3] {
        self.min_corner
    }

    pub fn max_corner(&self) -> [f64; 3] {
        self.max_corner
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min_corner[a] && p[a] < self.max_corner[a])
    }

    pub fn voxel_index(&self, p: &Vec3) -> Option<[usize; 3]> {
        if !self.contains(p) {
            return None;
        }
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.min_corner[a]) / self.voxel_size).floor();
            idx[a] = (f.max(0.0) as usize).min(self.shape[a] - 1);
        }
        Some(idx)
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Vec3 {
        Vec3::new(
            self.min_corner[0] + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.min_corner[1] + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.min_corner[2] + (idx[2] as f64 + 0.5) * self.voxel_size,
        )
    }

    /// Continuous voxel coordinates where voxel centers sit on integers.
    pub fn continuous_index(&self, p: &Vec3) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.min_corner[a]) / self.voxel_size - 0.5)
    }

    /// Largest horizontal distance from the ego origin to any grid corner.
    pub fn max_horizontal_distance(&self) -> f64 {
        let fx = self.min_corner[0].abs().max(self.max_corner[0].abs());
        let fy = self.min_corner[1].abs().max(self.max_corner[1].abs());
        fx.hypot(fy)
    }

    /// Parametric `[t_enter, t_exit]` of `origin + t·dir` inside the box.
    pub fn ray_box(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.min_corner[a] || origin[a] >= self.max_corner[a] {
                    return None;
                }
                continue;
            }
            let ta = (self.min_corner[a] - origin[a]) / dir[a];
            let tb = (self.max_corner[a] - origin[a]) / dir[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// LiDAR sweep in the ego frame, optionally with per-point class ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LidarFrame {
    points: Vec<Vec3>,
    labels: Option<Vec<u8>>,
}

impl LidarFrame {
    pub fn new(points: Vec<Vec3>, labels: Option<Vec<u8>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("lidar frame", format!("point {i} is not finite")));
        }
        if let Some(labels) = &labels {
            if labels.len() != points.len() {
                return Err(Error::invalid(
                    "lidar frame",
                    format!("{} labels for {} points", labels.len(), points.len()),
                ));
            }
            if let Some(i) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
                return Err(Error::invalid(
                    "lidar frame",
                    format!("label {} at point {i} is outside [0, 17]", labels[i]),
                ));
            }
        }
        Ok(Self { points, labels })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// Parses whitespace-separated `x y z [label]` lines. `#` starts a
    /// comment. Either every point carries a label or none does.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut labelled: Option<bool> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let has_label = match fields.len() {
                3 => false,
                4 => true,
                n => {
                    return Err(Error::invalid(
                        "lidar text",
                        format!("line {}: expected 3 or 4 fields, got {n}", lineno + 1),
                    ))
                }
            };
            if *labelled.get_or_insert(has_label) != has_label {
                return Err(Error::invalid(
                    "lidar text",
                    format!("line {}: mixed labelled and unlabelled points", lineno + 1),
                ));
            }
            let mut xyz = [0.0; 3];
            for (slot, f) in xyz.iter_mut().zip(&fields) {
                *slot = f.parse::<f64>().map_err(|e| {
                    Error::invalid("lidar text", format!("line {}: {e}", lineno + 1))
                })?;
            }
            points.push(Vec3::from(xyz));
            if has_label {
                let l = fields[3].parse::<u8>().map_err(|e| {
                    Error::invalid("lidar text", format!("line {}: {e}", lineno + 1))
                })?;
                labels.push(l);
            }
        }
        Self::new(points, labelled.unwrap_or(false).then_some(labels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPixel {
    pub depth: f64,
    pub label: Option<u8>,
}

/// Sparse image keyed by `(row, col)`.
pub type SparsePixelMap = BTreeMap<(usize, usize), LidarPixel>;

/// Projects every point to its rounded pixel. On collisions the smallest
/// depth wins; equal depths keep the earlier point.
pub fn lidar_to_image(frame: &LidarFrame, cam: &CameraModel) -> SparsePixelMap {
    let mut out = SparsePixelMap::new();
    for (i, p) in frame.points.iter().enumerate() {
        let Some(proj) = project_ego_point(p, cam) else {
            continue;
        };
        let col = proj.u.round() as usize;
        let row = proj.v.round() as usize;
        // rounding can push u ∈ [W−0.5, W) onto column W
        if col >= cam.width || row >= cam.height {
            continue;
        }
        let px = LidarPixel {
            depth: proj.depth,
            label: frame.labels.as_ref().map(|l| l[i]),
        };
        out.entry((row, col))
            .and_modify(|cur| {
                if px.depth < cur.depth {
                    *cur = px;
                }
            })
            .or_insert(px);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub intrinsics: [f64; 9],
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub height: usize,
    pub width: usize,
}

impl TryFrom<&CameraJson> for CameraModel {
    type Error = Error;
    fn try_from(c: &CameraJson) -> Result<Self> {
        let k = Matrix3::from_row_slice(&c.intrinsics);
        let r = Matrix3::from_row_slice(&c.rotation);
        let pose = RigidTransform::new(r, Vec3::from(c.translation))?;
        CameraModel::new(k, pose, c.height, c.width)
    }
}

impl From<&CameraModel> for CameraJson {
    fn from(c: &CameraModel) -> Self {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for col in 0..3 {
                    out[r * 3 + col] = m[(r, col)];
                }
            }
            out
        };
        CameraJson {
            intrinsics: row_major(&c.intrinsics),
            rotation: row_major(c.cam_to_ego.rotation()),
            translation: (*c.cam_to_ego.translation()).into(),
            height: c.height,
            width: c.width,
        }
    }
}

/// Parses a camera rig: a JSON array of cameras.
pub fn parse_rig(json: &str) -> Result<Vec<CameraModel>> {
    let cams: Vec<CameraJson> = serde_json::from_str(json)?;
    cams.iter().map(CameraModel::try_from).collect()
}

pub fn rig_to_json(rig: &[CameraModel]) -> String {
    let cams: Vec<CameraJson> = rig.iter().map(CameraJson::from).collect();
    serde_json::to_string_pretty(&cams).expect("rig serializes")
}

/// Homogeneous `K·[I|0]·T⁻¹` as a 3×4 matrix, useful as a cross-check.
pub fn projection_matrix(cam: &CameraModel) -> nalgebra::Matrix3x4<f64> {
    let ego_to_cam = cam.ego_to_cam.to_homogeneous();
    let mut k = nalgebra::Matrix3x4::zeros();
    k.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.intrinsics);
    k * ego_to_cam
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector4;
    use std::f64::consts::FRAC_PI_2;

    fn homogeneous(p: &Vec3) -> Vector4<f64> {
        Vector4::new(p.x, p.y, p.z, 1.0)
    }

    fn simple_cam(pose: RigidTransform, f: f64, cx: f64, cy: f64, h: usize, w: usize) -> CameraModel {
        let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
        CameraModel::new(k, pose, h, w).unwrap()
    }

    #[test]
    fn principal_point() {
        let cam = simple_cam(RigidTransform::identity(), 100.0, 50.0, 50.0, 100, 100);
        let p = project_ego_point(&Vec3::new(0.0, 0.0, 1.0), &cam).unwrap();
        assert_eq!((p.u, p.v, p.depth), (50.0, 50.0, 1.0));
    }

    #[test]
    fn behind_camera_is_absent() {
        let cam = simple_cam(RigidTransform::identity(), 100.0, 50.0, 50.0, 100, 100);
        assert!(project_ego_point(&Vec3::new(0.0, 0.0, -1.0), &cam).is_none());
        assert!(project_ego_point(&Vec3::new(0.0, 0.0, 0.0), &cam).is_none());
    }

    #[test]
    fn yawed_camera_matches_homogeneous_pipeline() {
        let pose = RigidTransform::new(yaw_matrix(FRAC_PI_2) * camera_to_ego_axes(), Vec3::zeros())
            .unwrap();
        let cam = simple_cam(pose, 100.0, 320.0, 180.0, 360, 640);
        let point = Vec3::new(2.0, 1.0, 0.0);

        // independent 4×4 homogeneous pipeline, written out by hand
        let t = pose.to_homogeneous();
        let mut inv = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                inv[r][c] = t[(c, r)];
            }
        }
        for r in 0..3 {
            inv[r][3] = -(0..3).map(|c| t[(c, r)] * t[(c, 3)]).sum::<f64>();
        }
        inv[3][3] = 1.0;
        let ph = [point.x, point.y, point.z, 1.0];
        let pc: Vec<f64> = (0..4)
            .map(|r| (0..4).map(|c| inv[r][c] * ph[c]).sum())
            .collect();
        let k = [[100.0, 0.0, 320.0], [0.0, 100.0, 180.0], [0.0, 0.0, 1.0]];
        let uvw: Vec<f64> = (0..3)
            .map(|r| (0..3).map(|c| k[r][c] * pc[c]).sum())
            .collect();
        let (eu, ev, ed) = (uvw[0] / uvw[2], uvw[1] / uvw[2], pc[2]);

        let p = project_ego_point(&point, &cam).unwrap();
        assert!((p.u - eu).abs() < 1e-9 && (p.v - ev).abs() < 1e-9 && (p.depth - ed).abs() < 1e-12);
        assert!((p.u - 520.0).abs() < 1e-9 && (p.v - 180.0).abs() < 1e-9);
    }

    #[test]
    fn voxel_index_examples() {
        let g = VoxelGridSpec::occ3d();
        assert_eq!(g.shape(), [200, 200, 16]);
        assert_eq!(g.voxel_index(&Vec3::new(-40.0, -40.0, -1.0)), Some([0, 0, 0]));
        assert_eq!(g.voxel_index(&Vec3::new(39.99, 39.99, 5.39)), Some([199, 199, 15]));
        assert_eq!(g.voxel_index(&Vec3::new(0.0, 0.0, 0.0)), Some([100, 100, 2]));
        assert_eq!(g.voxel_index(&Vec3::new(40.0, 0.0, 0.0)), None);
        assert_eq!(g.voxel_index(&Vec3::new(0.0, 0.0, -1.0001)), None);
    }

    #[test]
    fn grid_rejects_fractional_extent() {
        assert!(VoxelGridSpec::new([0.0; 3], [1.0, 1.0, 1.0], 0.3).is_err());
        assert!(VoxelGridSpec::new([0.0; 3], [1.0, 1.0, 1.0], 0.0).is_err());
        assert!(VoxelGridSpec::new([0.0; 3], [1.0, 0.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn transform_examples() {
        let pts = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-4.0, 0.5, 9.0)];
        assert_eq!(transform_points(&pts, &RigidTransform::identity()), pts);
        let t = RigidTransform::from_translation(Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(t.apply(&Vec3::zeros()), Vec3::new(1.0, 2.0, 3.0));
        let yaw = RigidTransform::from_yaw(FRAC_PI_2, Vec3::zeros());
        let r = yaw.apply(&Vec3::new(1.0, 0.0, 0.0));
        assert!((r - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn rejects_reflection() {
        let m = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(m, Vec3::zeros()).is_err());
    }

    #[test]
    fn lidar_nearest_wins() {
        let cam = simple_cam(RigidTransform::identity(), 100.0, 50.0, 50.0, 100, 100);
        let frame = LidarFrame::new(
            vec![Vec3::new(0.0, 0.0, 5.0), Vec3::new(0.0, 0.0, 3.0)],
            Some(vec![1, 2]),
        )
        .unwrap();
        let map = lidar_to_image(&frame, &cam);
        assert_eq!(map.len(), 1);
        assert_eq!(map[&(50, 50)], LidarPixel { depth: 3.0, label: Some(2) });
        assert!(lidar_to_image(&LidarFrame::default(), &cam).is_empty());
    }

    #[test]
    fn lidar_text_parsing() {
        let f = LidarFrame::parse_text("# header\n1 2 3 4\n\n5 6 7 8 # trailing\n").unwrap();
        assert_eq!(f.points().len(), 2);
        assert_eq!(f.labels(), Some(&[4u8, 8][..]));
        assert!(LidarFrame::parse_text("1 2 3\n1 2 3 4\n").is_err());
        assert!(LidarFrame::parse_text("1 2 3 18\n").is_err());
        assert!(LidarFrame::parse_text("1 2\n").is_err());
        assert!(LidarFrame::parse_text("1 2 nan\n").is_err());
        assert_eq!(LidarFrame::parse_text("").unwrap().labels(), None);
    }

    #[test]
    fn rig_json_round_trip() {
        let cam = CameraModel::forward_facing(Vec3::new(1.0, 0.0, 1.5), 0.3, 80.0, 96, 160).unwrap();
        let json = rig_to_json(std::slice::from_ref(&cam));
        let back = parse_rig(&json).unwrap();
        assert_eq!(back.len(), 1);
        let p = Vec3::new(10.0, 2.0, 1.0);
        let a = project_ego_point(&p, &cam).unwrap();
        let b = project_ego_point(&p, &back[0]).unwrap();
        assert!((a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9);
        assert!(parse_rig("[{\"intrinsics\":[1,0,0,0,1,0,0,0,1]}]").is_err());
    }

    #[test]
    fn projection_matrix_agrees() {
        let cam = CameraModel::forward_facing(Vec3::new(0.5, -0.2, 1.6), -0.7, 120.0, 90, 160).unwrap();
        let p = Vec3::new(8.0, -5.0, 0.3);
        let m = projection_matrix(&cam) * homogeneous(&p);
        let proj = cam.project_unbounded(&p).unwrap();
        assert!((m.x / m.z - proj.u).abs() < 1e-9);
        assert!((m.y / m.z - proj.v).abs() < 1e-9);
    }
}
