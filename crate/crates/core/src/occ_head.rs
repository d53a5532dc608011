//! BEV expansion, voxel/BEV fusion, the occupancy head, decoding, and
//! ego-motion alignment of voxel features across timesteps.

use ndarray::{Array3, Array4, ArrayView4, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;

use crate::backward_vtm::BevFeatureMap;
use crate::error::{Error, Result};
use crate::forward_vtm::VoxelFeatureVolume;
use crate::geometry::{RigidTransform, Vec3, VoxelGridSpec};
use crate::nn::{relu_inplace, softmax_axis0, Conv3d, Linear};
use crate::{FREE_LABEL, NUM_CLASSES};

/// Per-voxel labels plus the camera visibility mask.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    labels: Array3<u8>,
    camera_mask: Array3<bool>,
}

impl OccupancyGrid {
    pub fn new(labels: Array3<u8>, camera_mask: Array3<bool>) -> Result<Self> {
        if labels.dim() != camera_mask.dim() {
            return Err(Error::DimensionMismatch(format!(
                "labels {:?} vs mask {:?}",
                labels.dim(),
                camera_mask.dim()
            )));
        }
        check_labels(&labels)?;
        Ok(Self { labels, camera_mask })
    }

    pub fn all_visible(labels: Array3<u8>) -> Result<Self> {
        let mask = Array3::from_elem(labels.dim(), true);
        Self::new(labels, mask)
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn camera_mask(&self) -> &Array3<bool> {
        &self.camera_mask
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    pub fn num_visible(&self) -> usize {
        self.camera_mask.iter().filter(|&&m| m).count()
    }
}

/// Rejects labels ≥ 18, reporting up to 16 offending voxel indices.
pub fn check_labels(labels: &Array3<u8>) -> Result<()> {
    let bad: Vec<[usize; 3]> = labels
        .indexed_iter()
        .filter(|(_, &l)| l as usize >= NUM_CLASSES)
        .map(|((x, y, z), _)| [x, y, z])
        .collect();
    if bad.is_empty() {
        return Ok(());
    }
    Err(Error::LabelOutOfRange {
        count: bad.len(),
        max: FREE_LABEL,
        first: bad.into_iter().take(16).collect(),
    })
}

/// Per-voxel class probabilities, `(18, X, Y, Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub probs: Array4<f64>,
}

impl PredictionResult {
    pub fn uniform(shape: [usize; 3]) -> Self {
        Self {
            probs: Array4::from_elem((NUM_CLASSES, shape[0], shape[1], shape[2]), 1.0 / NUM_CLASSES as f64),
        }
    }

    pub fn one_hot(labels: &Array3<u8>) -> Self {
        let (x, y, z) = labels.dim();
        Self {
            probs: Array4::from_shape_fn((NUM_CLASSES, x, y, z), |(c, i, j, k)| {
                if labels[(i, j, k)] as usize == c {
                    1.0
                } else {
                    0.0
                }
            }),
        }
    }

    pub fn spatial_dim(&self) -> (usize, usize, usize) {
        let (_, x, y, z) = self.probs.dim();
        (x, y, z)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.dim().0 != NUM_CLASSES {
            return Err(Error::DimensionMismatch(format!(
                "prediction has {} classes, expected {NUM_CLASSES}",
                self.probs.dim().0
            )));
        }
        if self.probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("prediction", "probability outside [0, 1]"));
        }
        if let Some(s) = self.probs.sum_axis(Axis(0)).iter().find(|s| (**s - 1.0).abs() > 1e-5) {
            return Err(Error::invalid("prediction", format!("voxel sums to {s}")));
        }
        Ok(())
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; NUM_CLASSES] {
        std::array::from_fn(|c| self.probs[(c, x, y, z)])
    }
}

/// Two 3×3×3 convolutions with a ReLU between, then a per-voxel classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub conv1: Conv3d,
    pub conv2: Conv3d,
    pub classifier: Linear,
}

impl HeadWeights {
    pub fn zeros(channels: usize) -> Self {
        Self {
            conv1: Conv3d::zeros(channels, channels),
            conv2: Conv3d::zeros(channels, channels),
            classifier: Linear::zeros(NUM_CLASSES, channels),
        }
    }

    pub fn random<R: Rng>(channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv3d::random(channels, channels, rng),
            conv2: Conv3d::random(channels, channels, rng),
            classifier: Linear::random(NUM_CLASSES, channels, rng),
        }
    }

    pub fn check(&self, channels: usize) -> Result<()> {
        self.conv1.check("head.conv1", channels, channels)?;
        self.conv2.check("head.conv2", channels, channels)?;
        self.classifier.check("head.classifier", NUM_CLASSES, channels)
    }
}

/// Broadcasts a BEV map along a new z axis of length `z`.
pub fn expand_bev_to_voxel(bev: &BevFeatureMap, z: usize, grid: VoxelGridSpec) -> Result<VoxelFeatureVolume> {
    let (c, nx, ny) = bev.values.dim();
    let [gx, gy, gz] = grid.shape();
    if (nx, ny, z) != (gx, gy, gz) {
        return Err(Error::DimensionMismatch(format!(
            "expanding {nx}×{ny}×{z} onto a {gx}×{gy}×{gz} grid"
        )));
    }
    let values = Array4::from_shape_fn((c, nx, ny, z), |(ch, x, y, _)| bev.values[(ch, x, y)]);
    Ok(VoxelFeatureVolume { values, grid })
}

/// Element-wise sum.
pub fn fuse(a: &VoxelFeatureVolume, b: &VoxelFeatureVolume) -> Result<VoxelFeatureVolume> {
    if a.values.dim() != b.values.dim() {
        return Err(Error::ShapeMismatch {
            tensor: "fusion input".into(),
            expected: a.values.shape().to_vec(),
            actual: b.values.shape().to_vec(),
        });
    }
    Ok(VoxelFeatureVolume {
        values: &a.values + &b.values,
        grid: a.grid,
    })
}

pub fn head_forward(vol: &VoxelFeatureVolume, weights: &HeadWeights) -> Result<PredictionResult> {
    weights.check(vol.channels())?;
    let mut x = weights.conv1.forward(vol.values.view());
    relu_inplace(&mut x);
    let x = weights.conv2.forward(x.view());
    let logits = weights.classifier.apply_volume(x.view());
    Ok(PredictionResult {
        probs: softmax_axis0(&logits),
    })
}

/// Per-voxel argmax; ties go to the smallest class id.
pub fn decode(pred: &PredictionResult) -> Array3<u8> {
    let (x, y, z) = pred.spatial_dim();
    Array3::from_shape_fn((x, y, z), |(i, j, k)| {
        let mut best = 0usize;
        let mut best_p = pred.probs[(0, i, j, k)];
        for c in 1..pred.probs.dim().0 {
            let p = pred.probs[(c, i, j, k)];
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        best as u8
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Out-of-grid taps contribute zero.
    Zero,
    /// Out-of-grid taps read the nearest edge voxel.
    Clamp,
}

const SNAP_EPS: f64 = 1e-9;

/// Trilinear sample of a `(C, X, Y, Z)` volume at ego point `p`, voxel
/// centers on integer coordinates. Fractions within 1e-9 of an integer are
/// snapped so integer-voxel shifts are exact.
pub fn sample_trilinear(values: ArrayView4<f64>, grid: &VoxelGridSpec, p: &Vec3, padding: Padding) -> Vec<f64> {
    let (c, nx, ny, nz) = values.dim();
    let dims = [nx, ny, nz];
    let f = grid.continuous_index(p);
    let mut base = [0isize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let r = f[a].round();
        let v = if (f[a] - r).abs() < SNAP_EPS { r } else { f[a] };
        base[a] = v.floor() as isize;
        frac[a] = v - v.floor();
    }
    let mut out = vec![0.0; c];
    for corner in 0..8 {
        let d = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            w *= if d[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            let i = base[a] + d[a] as isize;
            if i < 0 || i >= dims[a] as isize {
                inside = false;
                idx[a] = i.clamp(0, dims[a] as isize - 1) as usize;
            } else {
                idx[a] = i as usize;
            }
        }
        if w == 0.0 || (!inside && padding == Padding::Zero) {
            continue;
        }
        for (ch, o) in out.iter_mut().enumerate() {
            *o += w * values[(ch, idx[0], idx[1], idx[2])];
        }
    }
    out
}

/// Resamples the previous frame's volume onto the current grid.
/// `relative_pose` maps current-frame ego coordinates into the previous
/// frame; voxels sampling outside the previous grid read zero.
pub fn align_voxel_features(
    prev: &VoxelFeatureVolume,
    relative_pose: &RigidTransform,
    grid: &VoxelGridSpec,
) -> VoxelFeatureVolume {
    let [nx, ny, nz] = grid.shape();
    let c = prev.channels();
    let columns: Vec<Vec<f64>> = (0..nx * ny * nz)
        .into_par_iter()
        .map(|i| {
            let idx = [i / (ny * nz), (i / nz) % ny, i % nz];
            let q = relative_pose.apply(&grid.voxel_center(idx));
            sample_trilinear(prev.values.view(), &prev.grid, &q, Padding::Zero)
        })
        .collect();
    let mut out = Array4::zeros((c, nx, ny, nz));
    for (i, col) in columns.into_iter().enumerate() {
        let (x, y, z) = (i / (ny * nz), (i / nz) % ny, i % nz);
        for (ch, v) in col.into_iter().enumerate() {
            out[(ch, x, y, z)] = v;
        }
    }
    VoxelFeatureVolume { values: out, grid: *grid }
}

/// Sum of the current volume and every aligned history volume.
pub fn fuse_history(current: &VoxelFeatureVolume, aligned: &[VoxelFeatureVolume]) -> Result<VoxelFeatureVolume> {
    let mut out = current.clone();
    for h in aligned {
        if h.values.dim() != out.values.dim() {
            return Err(Error::DimensionMismatch("history volume shape differs".into()));
        }
        Zip::from(&mut out.values).and(&h.values).for_each(|o, &v| *o += v);
    }
    Ok(out)
}
