//! Shared fixtures and hand-rolled reference computations for the
//! integration suites. Oracles deliberately avoid the library's own
//! projection and indexing helpers.
#![allow(dead_code)]

use fbocc_core::geometry::{CameraModel, Vec3, VoxelGridSpec};
use fbocc_core::occ_head::PredictionResult;
use fbocc_core::NUM_CLASSES;
use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Pinhole parameters read straight from the camera matrices.
pub struct Pinhole {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
    pub w: usize,
    pub h: usize,
}

impl Pinhole {
    pub fn of(cam: &CameraModel) -> Self {
        let k = cam.intrinsics();
        let rot = cam.cam_to_ego().rotation();
        let tr = cam.cam_to_ego().translation();
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = rot[(i, j)];
            }
        }
        Self {
            fx: k[(0, 0)],
            fy: k[(1, 1)],
            cx: k[(0, 2)],
            cy: k[(1, 2)],
            r,
            t: [tr.x, tr.y, tr.z],
            w: cam.width(),
            h: cam.height(),
        }
    }

    /// Ego point at z-depth `depth` through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let pc = [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth];
        let mut out = self.t;
        for i in 0..3 {
            for j in 0..3 {
                out[i] += self.r[i][j] * pc[j];
            }
        }
        out
    }

    /// `(u, v, depth)` with no bounds check; `None` at or behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let d = [p[0] - self.t[0], p[1] - self.t[1], p[2] - self.t[2]];
        let mut pc = [0.0; 3];
        for j in 0..3 {
            for i in 0..3 {
                pc[j] += self.r[i][j] * d[i];
            }
        }
        if pc[2] <= 0.0 {
            return None;
        }
        Some((self.fx * pc[0] / pc[2] + self.cx, self.fy * pc[1] / pc[2] + self.cy, pc[2]))
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.w as f64 && v < self.h as f64
    }
}

pub fn voxel_of(grid: &VoxelGridSpec, p: [f64; 3]) -> Option<[usize; 3]> {
    let lo = grid.min_corner();
    let hi = grid.max_corner();
    let shape = grid.shape();
    let mut idx = [0; 3];
    for a in 0..3 {
        if !(p[a] >= lo[a] && p[a] < hi[a]) {
            return None;
        }
        idx[a] = (((p[a] - lo[a]) / grid.voxel_size()).floor() as usize).min(shape[a] - 1);
    }
    Some(idx)
}

pub fn v3(p: [f64; 3]) -> Vec3 {
    Vec3::new(p[0], p[1], p[2])
}

/// Two slightly yawed forward cameras looking down +x.
pub fn pair_rig(focal: f64, h: usize, w: usize) -> Vec<CameraModel> {
    vec![
        CameraModel::forward_facing(Vec3::new(-0.7, 0.9, 1.3), -0.21, focal, h, w).unwrap(),
        CameraModel::forward_facing(Vec3::new(-0.4, -1.1, 0.7), 0.33, focal, h, w).unwrap(),
    ]
}

pub fn random_simplex(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> PredictionResult {
    let raw = Array4::from_shape_simple_fn((NUM_CLASSES, shape.0, shape.1, shape.2), || rng.random_range(1e-3..1.0));
    let sums = raw.sum_axis(Axis(0));
    let probs = Array4::from_shape_fn(raw.dim(), |(c, x, y, z)| raw[(c, x, y, z)] / sums[(x, y, z)]);
    PredictionResult { probs }
}

pub fn random_labels(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<u8> {
    Array3::from_shape_simple_fn(shape, || rng.random_range(0..NUM_CLASSES as u8))
}

pub fn random_mask(shape: (usize, usize, usize), rng: &mut ChaCha8Rng, p_visible: f64) -> Array3<bool> {
    Array3::from_shape_simple_fn(shape, || rng.random_bool(p_visible))
}

pub fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Quadruple loop over `(d, h, w, c)`: unproject the feature-cell center at
/// the bin-center depth and add the cell into its voxel. Returns the volume
/// and the total mass of in-grid cells.
pub fn splat_oracle(
    frustum: &Array4<f64>,
    stride: usize,
    cam: &Pinhole,
    min_depth: f64,
    bin_width: f64,
    grid: &VoxelGridSpec,
) -> (Array4<f64>, f64) {
    let (c, d, h, w) = frustum.dim();
    let [nx, ny, nz] = grid.shape();
    let mut vol = Array4::zeros((c, nx, ny, nz));
    let mut mass = 0.0;
    let half = (stride as f64 - 1.0) / 2.0;
    for di in 0..d {
        let depth = min_depth + (di as f64 + 0.5) * bin_width;
        for hi in 0..h {
            for wi in 0..w {
                let p = cam.unproject((wi * stride) as f64 + half, (hi * stride) as f64 + half, depth);
                let Some([x, y, z]) = voxel_of(grid, p) else { continue };
                for ci in 0..c {
                    vol[(ci, x, y, z)] += frustum[(ci, di, hi, wi)];
                    mass += frustum[(ci, di, hi, wi)];
                }
            }
        }
    }
    (vol, mass)
}

/// Four-neighbour bilinear sample on pixel centers; `None` outside
/// `[0, W−1] × [0, H−1]`.
pub fn bilinear_oracle(plane: ndarray::ArrayView2<f64>, u: f64, v: f64) -> Option<f64> {
    let (h, w) = plane.dim();
    if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
        return None;
    }
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (ax, ay) = (u - x0 as f64, v - y0 as f64);
    Some(
        plane[(y0, x0)] * (1.0 - ax) * (1.0 - ay)
            + plane[(y0, x1)] * ax * (1.0 - ay)
            + plane[(y1, x0)] * (1.0 - ax) * ay
            + plane[(y1, x1)] * ax * ay,
    )
}

pub struct OracleView {
    pub features: Array3<f64>,
    pub depth: Array3<f64>,
    pub stride: usize,
}

/// All-loops backward projection: cells × heights × cameras.
#[allow(clippy::too_many_arguments)]
pub fn backward_oracle(
    bev: &Array3<f64>,
    views: &[OracleView],
    cams: &[Pinhole],
    min_depth: f64,
    bin_width: f64,
    grid: &VoxelGridSpec,
    weight: &ndarray::Array2<f64>,
    bias: &ndarray::Array1<f64>,
    n_heights: usize,
) -> Array3<f64> {
    let (c, nx, ny) = bev.dim();
    let lo = grid.min_corner();
    let hi = grid.max_corner();
    let vs = grid.voxel_size();
    let mut out = bev.clone();
    for ix in 0..nx {
        for iy in 0..ny {
            let px = lo[0] + (ix as f64 + 0.5) * vs;
            let py = lo[1] + (iy as f64 + 0.5) * vs;
            let mut agg = vec![0.0; c];
            let mut hits = 0.0;
            let mut total = 0.0;
            for k in 0..n_heights {
                let pz = lo[2] + (k as f64 + 0.5) * (hi[2] - lo[2]) / n_heights as f64;
                for (view, cam) in views.iter().zip(cams) {
                    let Some((u, v, depth)) = cam.project([px, py, pz]) else { continue };
                    if !cam.in_image(u, v) {
                        continue;
                    }
                    let nb = view.depth.dim().0;
                    let rel = (depth - min_depth) / bin_width;
                    if rel < 0.0 || rel >= nb as f64 {
                        continue;
                    }
                    let b = rel.floor() as usize;
                    let half = (view.stride as f64 - 1.0) / 2.0;
                    let fu = (u - half) / view.stride as f64;
                    let fv = (v - half) / view.stride as f64;
                    let Some(prob) = bilinear_oracle(view.depth.index_axis(Axis(0), b), fu, fv) else {
                        continue;
                    };
                    hits += 1.0;
                    total += prob;
                    for (ch, a) in agg.iter_mut().enumerate() {
                        *a += prob * bilinear_oracle(view.features.index_axis(Axis(0), ch), fu, fv).unwrap();
                    }
                }
            }
            if hits == 0.0 || total == 0.0 {
                continue;
            }
            for o in 0..c {
                let mut acc = bias[o];
                for i in 0..c {
                    acc += weight[(o, i)] * agg[i] / hits;
                }
                out[(o, ix, iy)] += acc;
            }
        }
    }
    out
}

/// Per-class IoU rows (percent, classes 0–16 in label order) and the
/// published mean for two camera-only Occ3D-nuScenes baselines.
pub const MONOSCENE_ROW: [f64; 17] = [
    1.75, 7.23, 4.26, 4.93, 9.38, 5.67, 3.98, 3.01, 5.90, 4.45, 7.17, 14.91, 6.32, 7.92, 7.43, 1.01, 7.65,
];
pub const MONOSCENE_MIOU: f64 = 6.06;
pub const BEVDET_ROW: [f64; 17] = [
    2.09, 15.29, 0.0, 4.18, 12.97, 1.35, 0.0, 0.43, 0.13, 6.59, 6.66, 52.72, 19.04, 26.45, 21.78, 14.51, 15.26,
];
pub const BEVDET_MIOU: f64 = 11.73;

/// Feeds a 17-class row through `miou` with free space absent.
pub fn row_miou(row: &[f64; 17]) -> f64 {
    let mut per_class: Vec<Option<f64>> = row.iter().map(|&v| Some(v)).collect();
    per_class.push(None);
    fbocc_core::metrics::miou(&per_class, &fbocc_core::metrics::semantic_classes()).unwrap()
}

pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}
