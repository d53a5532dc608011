//! Backward view transformation: BEV queries built from the forward voxel
//! volume, refined by depth-weighted sampling of image features.
//!
//! For every BEV cell, `n_heights` reference points are placed evenly over
//! the grid's z-range at the cell's horizontal center. Each point is
//! projected into each camera; a hit bilinearly samples the context
//! features and the probability plane of the depth bin containing the
//! projected depth. The cell update is
//!
//! ```text
//! agg  = Σ_hits p_depth · feature / n_hits
//! out  = bev + W·agg + b
//! ```
//!
//! and a cell whose hits carry zero total depth weight is passed through.

use ndarray::{Array3, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward_vtm::{image_to_feature, DepthBinSpec, EncoderOutput, ImageFeatureMap, VoxelFeatureVolume};
use crate::geometry::{CameraModel, Vec3, VoxelGridSpec};
use crate::nn::Linear;

/// `(C, X, Y)` map over the grid's horizontal extent.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    pub values: Array3<f64>,
}

impl BevFeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }
}

/// Post-aggregation linear map of the single refinement layer.
pub type BackwardLayerWeights = Linear;

pub const DEFAULT_N_HEIGHTS: usize = 4;

/// Mean over the z axis.
pub fn compress_voxel_to_bev(vol: &VoxelFeatureVolume) -> BevFeatureMap {
    let nz = vol.values.dim().3 as f64;
    BevFeatureMap {
        values: vol.values.sum_axis(Axis(3)) / nz,
    }
}

/// Bilinear sample at continuous feature coordinates (pixel centers on
/// integers). `None` outside `[0, W−1] × [0, H−1]`.
pub fn bilinear_sample(map: &ImageFeatureMap, u: f64, v: f64) -> Option<Vec<f64>> {
    sample_plane_weights(map.height(), map.width(), u, v).map(|taps| {
        (0..map.channels())
            .map(|c| taps.iter().map(|&(y, x, w)| w * map.values[(c, y, x)]).sum())
            .collect()
    })
}

/// The (row, col, weight) taps of a bilinear sample; zero-weight taps are
/// dropped so edge samples never index past the map.
fn sample_plane_weights(h: usize, w: usize, u: f64, v: f64) -> Option<Vec<(usize, usize, f64)>> {
    if h == 0 || w == 0 {
        return None;
    }
    if !(u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64) {
        return None;
    }
    let x0 = (u.floor() as usize).min(w - 1);
    let y0 = (v.floor() as usize).min(h - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let mut taps = Vec::with_capacity(4);
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let wt = wy * wx;
            if wt != 0.0 {
                taps.push((y0 + dy, x0 + dx, wt));
            }
        }
    }
    Some(taps)
}

/// z-coordinates of the reference points: centers of `n` equal slices of
/// the grid's vertical range.
pub fn reference_heights(grid: &VoxelGridSpec, n: usize) -> Vec<f64> {
    let (lo, hi) = (grid.min_corner()[2], grid.max_corner()[2]);
    let step = (hi - lo) / n as f64;
    (0..n).map(|k| lo + (k as f64 + 0.5) * step).collect()
}

/// One refinement layer of backward projection.
#[allow(clippy::too_many_arguments)]
pub fn backward_project(
    bev: &BevFeatureMap,
    views: &[EncoderOutput],
    rig: &[CameraModel],
    bins: &DepthBinSpec,
    grid: &VoxelGridSpec,
    weights: &BackwardLayerWeights,
    n_heights: usize,
) -> Result<BevFeatureMap> {
    let (c, nx, ny) = bev.values.dim();
    let [gx, gy, _] = grid.shape();
    if (nx, ny) != (gx, gy) {
        return Err(Error::DimensionMismatch(format!(
            "BEV is {nx}×{ny} but grid is {gx}×{gy}"
        )));
    }
    if views.len() != rig.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} views for {} cameras",
            views.len(),
            rig.len()
        )));
    }
    if n_heights == 0 {
        return Err(Error::invalid("backward projection", "n_heights must be ≥ 1"));
    }
    weights.check("backward.proj", c, c)?;
    for (i, v) in views.iter().enumerate() {
        if v.features.channels() != c {
            return Err(Error::DimensionMismatch(format!(
                "view {i} has {} channels, BEV has {c}",
                v.features.channels()
            )));
        }
        if v.depth.num_bins() != bins.num_bins()
            || v.depth.probs.dim().1 != v.features.height()
            || v.depth.probs.dim().2 != v.features.width()
        {
            return Err(Error::DimensionMismatch(format!(
                "view {i}: depth distribution does not match features or bins"
            )));
        }
    }

    let heights = reference_heights(grid, n_heights);
    let cells: Vec<Vec<f64>> = (0..nx * ny)
        .into_par_iter()
        .map(|cell| {
            let (ix, iy) = (cell / ny, cell % ny);
            let center = grid.voxel_center([ix, iy, 0]);
            let mut agg = vec![0.0; c];
            let mut hits = 0usize;
            let mut total_weight = 0.0;
            for &z in &heights {
                let p = Vec3::new(center.x, center.y, z);
                for (view, cam) in views.iter().zip(rig) {
                    let Some(proj) = cam.project_unbounded(&p) else {
                        continue;
                    };
                    if !cam.contains_pixel(proj.u, proj.v) {
                        continue;
                    }
                    let Some(bin) = bins.bin_of(proj.depth) else {
                        continue;
                    };
                    let stride = view.features.stride;
                    let fu = image_to_feature(proj.u, stride);
                    let fv = image_to_feature(proj.v, stride);
                    let Some(taps) = sample_plane_weights(view.features.height(), view.features.width(), fu, fv)
                    else {
                        continue;
                    };
                    let prob: f64 = taps.iter().map(|&(y, x, w)| w * view.depth.probs[(bin, y, x)]).sum();
                    hits += 1;
                    total_weight += prob;
                    for (ch, slot) in agg.iter_mut().enumerate() {
                        let f: f64 = taps.iter().map(|&(y, x, w)| w * view.features.values[(ch, y, x)]).sum();
                        *slot += prob * f;
                    }
                }
            }
            let input: Vec<f64> = (0..c).map(|ch| bev.values[(ch, ix, iy)]).collect();
            if hits == 0 || total_weight == 0.0 {
                return input;
            }
            let mean: Vec<f64> = agg.iter().map(|a| a / hits as f64).collect();
            let delta = weights.apply_vec(&mean);
            input.iter().zip(delta).map(|(b, d)| b + d).collect()
        })
        .collect();

    let mut out = Array3::zeros((c, nx, ny));
    for (cell, vals) in cells.into_iter().enumerate() {
        let (ix, iy) = (cell / ny, cell % ny);
        for (ch, v) in vals.into_iter().enumerate() {
            out[(ch, ix, iy)] = v;
        }
    }
    Ok(BevFeatureMap { values: out })
}
