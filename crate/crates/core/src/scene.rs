//! Synthetic scenes: primitives rasterized to exact ground truth, ray-marched
//! depth / semantic views, camera visibility masks and shaded RGB images.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_vtm::RgbImage;
use crate::geometry::{yaw_matrix, CameraJson, CameraModel, RigidTransform, Vec3, VoxelGridSpec};
use crate::occ_head::OccupancyGrid;
use crate::{class_id, FREE_LABEL, NUM_CLASSES};

/// Depth written for pixels whose ray hits nothing.
pub const MISS_DEPTH: f64 = 0.0;
/// Label written for pixels whose ray hits nothing.
pub const MISS_LABEL: u8 = 255;

// Tolerance on primitive faces so voxel centers that sit exactly on a face
// resolve the same way regardless of rounding.
const FACE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Primitive {
    /// Box centered at `center`, rotated by `yaw` about z, full extents `size`.
    /// Contains local points with `-size/2 ≤ p < size/2` per axis.
    Box {
        center: [f64; 3],
        #[serde(default)]
        yaw: f64,
        size: [f64; 3],
        class: u8,
    },
    /// Infinite horizontal slab `[top − thickness, top)`.
    GroundPlane { top: f64, thickness: f64, class: u8 },
}

impl Primitive {
    pub fn class(&self) -> u8 {
        match self {
            Primitive::Box { class, .. } | Primitive::GroundPlane { class, .. } => *class,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.class() as usize >= FREE_LABEL as usize {
            return Err(Error::invalid("primitive", format!("class {} is not an object class (0–16)", self.class())));
        }
        let ok = match self {
            Primitive::Box { center, yaw, size, .. } => {
                center.iter().chain([yaw]).all(|v| v.is_finite()) && size.iter().all(|s| s.is_finite() && *s > 0.0)
            }
            Primitive::GroundPlane { top, thickness, .. } => top.is_finite() && thickness.is_finite() && *thickness > 0.0,
        };
        if !ok {
            return Err(Error::invalid("primitive", "dimensions must be finite and positive"));
        }
        Ok(())
    }

    /// World-frame containment test.
    pub fn contains(&self, p: &Vec3) -> bool {
        let inside = |v: f64, half: f64| v >= -half - FACE_EPS && v < half - FACE_EPS;
        match self {
            Primitive::Box { center, yaw, size, .. } => {
                let local = yaw_matrix(*yaw).transpose() * (p - Vec3::from(*center));
                (0..3).all(|a| inside(local[a], size[a] / 2.0))
            }
            Primitive::GroundPlane { top, thickness, .. } => inside(p.z - (top - thickness / 2.0), thickness / 2.0),
        }
    }
}

/// Planar ego pose: position and heading in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoPose {
    pub translation: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

impl EgoPose {
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_yaw(self.yaw, Vec3::from(self.translation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneJson {
    primitives: Vec<Primitive>,
    rig: Vec<CameraJson>,
    #[serde(default)]
    ego_trajectory: Vec<EgoPose>,
}

/// World-frame primitives, an ego-relative camera rig and the ego poses of
/// each frame.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub rig: Vec<CameraModel>,
    pub ego_trajectory: Vec<EgoPose>,
}

impl SceneSpec {
    pub fn new(primitives: Vec<Primitive>, rig: Vec<CameraModel>, ego_trajectory: Vec<EgoPose>) -> Result<Self> {
        if rig.is_empty() {
            return Err(Error::Empty("camera rig"));
        }
        for p in &primitives {
            p.validate()?;
        }
        if ego_trajectory
            .iter()
            .any(|e| !e.yaw.is_finite() || e.translation.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::invalid("ego trajectory", "poses must be finite"));
        }
        Ok(Self {
            primitives,
            rig,
            ego_trajectory,
        })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let raw: SceneJson = serde_json::from_str(json)?;
        let rig = raw.rig.iter().map(CameraModel::try_from).collect::<Result<Vec<_>>>()?;
        Self::new(raw.primitives, rig, raw.ego_trajectory)
    }

    pub fn to_json(&self) -> String {
        let raw = SceneJson {
            primitives: self.primitives.clone(),
            rig: self.rig.iter().map(CameraJson::from).collect(),
            ego_trajectory: self.ego_trajectory.clone(),
        };
        serde_json::to_string_pretty(&raw).expect("scene serializes")
    }

    /// Ego pose of `frame`; identity when the trajectory is empty.
    pub fn pose(&self, frame: usize) -> Result<RigidTransform> {
        if self.ego_trajectory.is_empty() && frame == 0 {
            return Ok(RigidTransform::identity());
        }
        self.ego_trajectory
            .get(frame)
            .map(EgoPose::transform)
            .ok_or_else(|| Error::invalid("frame", format!("scene has {} frames", self.num_frames())))
    }

    pub fn num_frames(&self) -> usize {
        self.ego_trajectory.len().max(1)
    }
}

/// Labels of the first frame; see [`rasterize_frame`].
pub fn rasterize_scene(spec: &SceneSpec, grid: &VoxelGridSpec) -> Array3<u8> {
    rasterize_frame(spec, grid, &spec.pose(0).expect("frame 0 always exists"))
}

/// Each ego-frame voxel takes the class of the last-listed primitive
/// containing its world-frame center, else free.
pub fn rasterize_frame(spec: &SceneSpec, grid: &VoxelGridSpec, ego_pose: &RigidTransform) -> Array3<u8> {
    let [nx, ny, nz] = grid.shape();
    let labels: Vec<u8> = (0..nx * ny * nz)
        .into_par_iter()
        .map(|i| {
            let idx = [i / (ny * nz), (i / nz) % ny, i % nz];
            let world = ego_pose.apply(&grid.voxel_center(idx));
            spec.primitives
                .iter()
                .rev()
                .find(|p| p.contains(&world))
                .map_or(FREE_LABEL, Primitive::class)
        })
        .collect();
    Array3::from_shape_vec((nx, ny, nz), labels).expect("length matches grid")
}

/// Per-camera z-depth (meters) and class images.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub depth: Array2<f64>,
    pub semantics: Array2<u8>,
}

impl RenderedView {
    pub fn hits(&self) -> usize {
        self.semantics.iter().filter(|&&l| l != MISS_LABEL).count()
    }
}

fn is_occupied(labels: &Array3<u8>, idx: [usize; 3]) -> bool {
    labels[idx] != FREE_LABEL
}

/// Marches every pixel-center ray through the labelled grid with step
/// `voxel_size / 2`; the first occupied sample gives the pixel's z-depth
/// and class. Misses get [`MISS_DEPTH`] / [`MISS_LABEL`].
pub fn render_views(labels: &Array3<u8>, grid: &VoxelGridSpec, rig: &[CameraModel]) -> Result<Vec<RenderedView>> {
    check_grid(labels, grid)?;
    rig.par_iter().map(|cam| Ok(render_view(labels, grid, cam))).collect()
}

fn check_grid(labels: &Array3<u8>, grid: &VoxelGridSpec) -> Result<()> {
    if <[usize; 3]>::from(labels.dim()) != grid.shape() {
        return Err(Error::DimensionMismatch(format!(
            "labels {:?} vs grid {:?}",
            labels.dim(),
            grid.shape()
        )));
    }
    Ok(())
}

fn render_view(labels: &Array3<u8>, grid: &VoxelGridSpec, cam: &CameraModel) -> RenderedView {
    let (h, w) = (cam.height(), cam.width());
    let pixels: Vec<(f64, u8)> = (0..h * w)
        .into_par_iter()
        .map(|i| {
            march(labels, grid, cam, (i % w) as f64, (i / w) as f64)
                .map_or((MISS_DEPTH, MISS_LABEL), |(t, idx)| (t, labels[idx]))
        })
        .collect();
    let (depth, sem): (Vec<f64>, Vec<u8>) = pixels.into_iter().unzip();
    RenderedView {
        depth: Array2::from_shape_vec((h, w), depth).expect("h·w pixels"),
        semantics: Array2::from_shape_vec((h, w), sem).expect("h·w pixels"),
    }
}

/// Camera visibility: the union of
///
/// * voxels whose center projects into some camera and whose center ray,
///   sampled every `voxel_size / 2`, reaches the voxel without first
///   entering another occupied voxel, and
/// * the first occupied voxel hit by each pixel ray (as in
///   [`render_views`]), so every rendered surface is visible even at
///   grazing angles.
pub fn visibility_mask(labels: &Array3<u8>, grid: &VoxelGridSpec, rig: &[CameraModel]) -> Result<Array3<bool>> {
    check_grid(labels, grid)?;
    let (nx, ny, nz) = labels.dim();
    let step = grid.voxel_size() / 2.0;
    let mask: Vec<bool> = (0..nx * ny * nz)
        .into_par_iter()
        .map(|i| {
            let target = [i / (ny * nz), (i / nz) % ny, i % nz];
            let p = grid.voxel_center(target);
            rig.iter().any(|cam| center_ray_reaches(labels, grid, cam, &p, target, step))
        })
        .collect();
    let mut mask = Array3::from_shape_vec((nx, ny, nz), mask).expect("length matches grid");
    for cam in rig {
        for idx in surface_hits(labels, grid, cam) {
            mask[idx] = true;
        }
    }
    Ok(mask)
}

fn center_ray_reaches(
    labels: &Array3<u8>,
    grid: &VoxelGridSpec,
    cam: &CameraModel,
    p: &Vec3,
    target: [usize; 3],
    step: f64,
) -> bool {
    let Some(proj) = cam.project_unbounded(p) else {
        return false;
    };
    if !cam.contains_pixel(proj.u, proj.v) {
        return false;
    }
    let origin = cam.center();
    let seg = p - origin;
    let dist = seg.norm();
    let n = (dist / step).ceil() as usize;
    for k in 1..n {
        let q = origin + seg * (k as f64 * step / dist);
        if let Some(idx) = grid.voxel_index(&q) {
            if idx == target {
                return true;
            }
            if is_occupied(labels, idx) {
                return false;
            }
        }
    }
    true
}

/// First occupied voxel along each pixel-center ray.
fn surface_hits(labels: &Array3<u8>, grid: &VoxelGridSpec, cam: &CameraModel) -> Vec<[usize; 3]> {
    let w = cam.width();
    (0..cam.height() * w)
        .into_par_iter()
        .filter_map(|i| march(labels, grid, cam, (i % w) as f64, (i / w) as f64).map(|(_, idx)| idx))
        .collect()
}

/// Ray march through pixel `(u, v)`: z-depth and voxel of the first
/// occupied sample.
fn march(labels: &Array3<u8>, grid: &VoxelGridSpec, cam: &CameraModel, u: f64, v: f64) -> Option<(f64, [usize; 3])> {
    let origin = cam.center();
    let dir = cam.ray_direction(u, v);
    let (t0, t1) = grid.ray_box(&origin, &dir)?;
    let step = grid.voxel_size() / 2.0 / dir.norm();
    let mut t = t0.max(0.0);
    while t <= t1 {
        if t > 0.0 {
            if let Some(idx) = grid.voxel_index(&(origin + dir * t)) {
                if is_occupied(labels, idx) {
                    return Some((t, idx));
                }
            }
        }
        t += step;
    }
    None
}

/// Rasterizes frame `frame` and attaches its visibility mask.
pub fn ground_truth(spec: &SceneSpec, grid: &VoxelGridSpec, frame: usize) -> Result<OccupancyGrid> {
    let labels = rasterize_frame(spec, grid, &spec.pose(frame)?);
    let mask = visibility_mask(&labels, grid, &spec.rig)?;
    OccupancyGrid::new(labels, mask)
}

/// Flat RGB colour per class in `[0, 1]`.
pub fn class_color(class: u8) -> [f64; 3] {
    if class as usize >= NUM_CLASSES {
        return [0.55, 0.7, 0.9];
    }
    // golden-angle hue walk keeps neighbouring ids distinct
    let hue = (class as f64 * 0.618_033_988_75).fract() * 2.0 * PI;
    [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0].map(|phase| 0.5 + 0.4 * (hue + phase).cos())
}

/// Shades a rendered view: class colour attenuated with depth, sky on miss.
/// Returns a `(3, H, W)` image.
pub fn shade(view: &RenderedView) -> RgbImage {
    let (h, w) = view.depth.dim();
    RgbImage(Array3::from_shape_fn((3, h, w), |(c, v, u)| {
        let l = view.semantics[(v, u)];
        let base = class_color(l);
        if l == MISS_LABEL {
            base[c]
        } else {
            base[c] / (1.0 + 0.05 * view.depth[(v, u)])
        }
    }))
}

/// Six horizontal cameras at 60° spacing, 1.5 m above the ego origin.
pub fn surround_rig(focal: f64, height: usize, width: usize) -> Result<Vec<CameraModel>> {
    (0..6)
        .map(|k| CameraModel::forward_facing(Vec3::new(0.0, 0.0, 1.5), k as f64 * PI / 3.0, focal, height, width))
        .collect()
}

/// Bundled street scene: a road with sidewalks, buildings, parked cars, a
/// pedestrian, a tree and a barrier; the ego drives 2 m forward per frame.
pub fn street_scene(rig: Vec<CameraModel>, frames: usize) -> Result<SceneSpec> {
    let id = |n: &str| class_id(n).expect("known class") as u8;
    let bx = |center: [f64; 3], yaw: f64, size: [f64; 3], class: &str| Primitive::Box {
        center,
        yaw,
        size,
        class: id(class),
    };
    let primitives = vec![
        Primitive::GroundPlane {
            top: -0.2,
            thickness: 0.8,
            class: id("terrain"),
        },
        bx([0.0, 0.0, -0.6], 0.0, [200.0, 12.0, 0.8], "driveable_surface"),
        bx([0.0, 8.0, -0.5], 0.0, [200.0, 4.0, 1.0], "sidewalk"),
        bx([0.0, -8.0, -0.5], 0.0, [200.0, 4.0, 1.0], "sidewalk"),
        bx([4.0, 13.0, 2.5], 0.0, [18.0, 6.0, 6.0], "manmade"),
        bx([-10.0, -13.0, 2.5], 0.0, [12.0, 6.0, 6.0], "manmade"),
        bx([7.0, 3.6, 0.6], 0.0, [4.4, 1.8, 1.6], "car"),
        bx([-6.0, -3.6, 0.6], 0.1, [4.6, 1.9, 1.6], "car"),
        bx([12.0, -3.0, 1.0], 0.3, [7.0, 2.4, 2.8], "truck"),
        bx([3.0, -6.6, 0.6], 0.0, [0.6, 0.6, 1.8], "pedestrian"),
        bx([-3.0, 7.0, 2.0], 0.0, [2.0, 2.0, 4.0], "vegetation"),
        bx([10.0, 6.0, 0.3], 0.0, [0.4, 3.0, 1.0], "barrier"),
        bx([1.0, 5.4, 0.1], 0.0, [0.4, 0.4, 0.6], "traffic_cone"),
    ];
    let trajectory = (0..frames.max(1))
        .map(|f| EgoPose {
            translation: [2.0 * f as f64, 0.0, 0.0],
            yaw: 0.0,
        })
        .collect();
    SceneSpec::new(primitives, rig, trajectory)
}
