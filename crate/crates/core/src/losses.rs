//! Forward-only occupancy and 2D supervision losses.
//!
//! Voxel losses only see camera-visible voxels and sum in row-major
//! `(x, y, z)` order. Probabilities entering a logarithm are clamped to
//! `[EPS, 1]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_vtm::{DepthBinSpec, DepthDistribution, SemanticLogits2D};
use crate::geometry::VoxelGridSpec;
use crate::occ_head::{OccupancyGrid, PredictionResult};
use crate::{FREE_LABEL, NUM_CLASSES};

pub const EPS: f64 = 1e-6;
pub const FOCAL_GAMMA: f64 = 2.0;

fn check_shapes(pred: &PredictionResult, gt: &OccupancyGrid) -> Result<()> {
    if pred.spatial_dim() != gt.dim() || pred.probs.dim().0 != NUM_CLASSES {
        return Err(Error::DimensionMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.probs.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Visible voxels as `(x, y, z, label)` in row-major order.
fn visible(gt: &OccupancyGrid) -> Vec<(usize, usize, usize, usize)> {
    gt.labels()
        .indexed_iter()
        .filter(|(idx, _)| gt.camera_mask()[*idx])
        .map(|((x, y, z), &l)| (x, y, z, l as usize))
        .collect()
}

fn nll(p: f64) -> f64 {
    -p.clamp(EPS, 1.0).ln()
}

/// Distance weight `0.5 + d / d_max`, `d` the horizontal distance of the
/// voxel center from the ego origin.
pub fn distance_weight(grid: &VoxelGridSpec, idx: [usize; 3]) -> f64 {
    let c = grid.voxel_center(idx);
    0.5 + c.x.hypot(c.y) / grid.max_horizontal_distance()
}

/// Mean of `w(d)·(1 − p_t)^γ·(−ln p_t)` over visible voxels.
pub fn distance_aware_focal(pred: &PredictionResult, gt: &OccupancyGrid, grid: &VoxelGridSpec) -> Result<f64> {
    check_shapes(pred, gt)?;
    if grid.shape() != <[usize; 3]>::from(gt.dim()) {
        return Err(Error::DimensionMismatch("grid does not match ground truth".into()));
    }
    let vis = visible(gt);
    if vis.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &(x, y, z, l) in &vis {
        let pt = pred.probs[(l, x, y, z)].clamp(EPS, 1.0);
        sum += distance_weight(grid, [x, y, z]) * (1.0 - pt).powf(FOCAL_GAMMA) * -pt.ln();
    }
    Ok(sum / vis.len() as f64)
}

/// Soft Dice averaged over classes present in the visible ground truth.
pub fn dice_loss(pred: &PredictionResult, gt: &OccupancyGrid) -> Result<f64> {
    check_shapes(pred, gt)?;
    let vis = visible(gt);
    let mut sum_p = [0.0; NUM_CLASSES];
    let mut sum_g = [0.0; NUM_CLASSES];
    let mut sum_pg = [0.0; NUM_CLASSES];
    for &(x, y, z, l) in &vis {
        for c in 0..NUM_CLASSES {
            let p = pred.probs[(c, x, y, z)];
            sum_p[c] += p;
            if c == l {
                sum_g[c] += 1.0;
                sum_pg[c] += p;
            }
        }
    }
    let losses: Vec<f64> = (0..NUM_CLASSES)
        .filter(|&c| sum_g[c] > 0.0)
        .map(|c| 1.0 - (2.0 * sum_pg[c] + EPS) / (sum_p[c] + sum_g[c] + EPS))
        .collect();
    Ok(mean_or_zero(&losses))
}

fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Soft precision / recall / specificity terms for one binary problem.
/// Undefined ratios (zero denominator) are skipped; returns the mean of the
/// defined `−ln` terms, or `None` when none is defined.
fn affinity_terms(probs: &[f64], targets: &[bool]) -> Option<f64> {
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    let mut spec_num = 0.0;
    let mut spec_den = 0.0;
    for (&p, &t) in probs.iter().zip(targets) {
        sum_p += p;
        if t {
            inter += p;
            sum_t += 1.0;
        } else {
            spec_num += 1.0 - p;
            spec_den += 1.0;
        }
    }
    let mut terms = Vec::with_capacity(3);
    if sum_p > 0.0 {
        terms.push(nll(inter / sum_p));
    }
    if sum_t > 0.0 {
        terms.push(nll(inter / sum_t));
    }
    if spec_den > 0.0 {
        terms.push(nll(spec_num / spec_den));
    }
    (!terms.is_empty()).then(|| mean_or_zero(&terms))
}

/// Geometry affinity: occupied (classes 0–16) versus free.
pub fn scal_geo(pred: &PredictionResult, gt: &OccupancyGrid) -> Result<f64> {
    check_shapes(pred, gt)?;
    let vis = visible(gt);
    let probs: Vec<f64> = vis
        .iter()
        .map(|&(x, y, z, _)| 1.0 - pred.probs[(FREE_LABEL as usize, x, y, z)])
        .collect();
    let targets: Vec<bool> = vis.iter().map(|&(.., l)| l != FREE_LABEL as usize).collect();
    Ok(affinity_terms(&probs, &targets).unwrap_or(0.0))
}

/// Semantic affinity averaged over classes present in the visible ground truth.
pub fn scal_sem(pred: &PredictionResult, gt: &OccupancyGrid) -> Result<f64> {
    check_shapes(pred, gt)?;
    let vis = visible(gt);
    let mut losses = Vec::new();
    for c in 0..NUM_CLASSES {
        let targets: Vec<bool> = vis.iter().map(|&(.., l)| l == c).collect();
        if !targets.iter().any(|&t| t) {
            continue;
        }
        let probs: Vec<f64> = vis.iter().map(|&(x, y, z, _)| pred.probs[(c, x, y, z)]).collect();
        if let Some(l) = affinity_terms(&probs, &targets) {
            losses.push(l);
        }
    }
    Ok(mean_or_zero(&losses))
}

/// Lovász extension of the Jaccard loss for one class.
pub fn lovasz_class(errors: &[f64], foreground: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let gts: f64 = foreground.iter().filter(|&&f| f).count() as f64;
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev_jaccard = 0.0;
    let mut loss = 0.0;
    for &i in &order {
        if foreground[i] {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let intersection = gts - cum_fg;
        let union = gts + cum_bg;
        let jaccard = 1.0 - intersection / union;
        loss += errors[i] * (jaccard - prev_jaccard);
        prev_jaccard = jaccard;
    }
    loss
}

/// Lovász-softmax over visible voxels, averaged over present classes.
pub fn lovasz_softmax(pred: &PredictionResult, gt: &OccupancyGrid) -> Result<f64> {
    check_shapes(pred, gt)?;
    let vis = visible(gt);
    let mut losses = Vec::new();
    for c in 0..NUM_CLASSES {
        let fg: Vec<bool> = vis.iter().map(|&(.., l)| l == c).collect();
        if !fg.iter().any(|&f| f) {
            continue;
        }
        let errors: Vec<f64> = vis
            .iter()
            .zip(&fg)
            .map(|(&(x, y, z, _), &f)| {
                let p = pred.probs[(c, x, y, z)];
                if f {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        losses.push(lovasz_class(&errors, &fg));
    }
    Ok(mean_or_zero(&losses))
}

/// Sparse supervision keyed by feature pixel `(row, col)`.
pub type SparseDepth = BTreeMap<(usize, usize), f64>;
pub type SparseLabels = BTreeMap<(usize, usize), u8>;

/// Cross-entropy against the one-hot bin of each supervised pixel; pixels
/// outside the bin range are skipped.
pub fn depth_ce(depth: &DepthDistribution, gt: &SparseDepth, bins: &DepthBinSpec) -> Result<f64> {
    let (d, h, w) = depth.probs.dim();
    if d != bins.num_bins() {
        return Err(Error::DimensionMismatch(format!(
            "distribution has {d} bins, spec has {}",
            bins.num_bins()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&(r, c), &meters) in gt {
        if r >= h || c >= w {
            return Err(Error::DimensionMismatch(format!("depth pixel ({r}, {c}) outside {h}×{w}")));
        }
        let Some(b) = bins.bin_of(meters) else {
            continue;
        };
        sum += nll(depth.probs[(b, r, c)]);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Softmax cross-entropy over labelled pixels.
pub fn semantic2d_ce(logits: &SemanticLogits2D, gt: &SparseLabels) -> Result<f64> {
    let (k, h, w) = logits.logits.dim();
    let mut sum = 0.0;
    for (&(r, c), &label) in gt {
        if r >= h || c >= w || label as usize >= k {
            return Err(Error::DimensionMismatch(format!(
                "label {label} at ({r}, {c}) outside {k}×{h}×{w}"
            )));
        }
        let max = (0..k).map(|i| logits.logits[(i, r, c)]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..k).map(|i| (logits.logits[(i, r, c)] - max).exp()).sum::<f64>().ln();
        sum += lse - logits.logits[(label as usize, r, c)];
    }
    Ok(if gt.is_empty() { 0.0 } else { sum / gt.len() as f64 })
}

/// One value per loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossTerms {
    pub focal: f64,
    pub dice: f64,
    pub scal_geo: f64,
    pub scal_sem: f64,
    pub lovasz: f64,
    pub depth: f64,
    pub semantic2d: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 7] = ["focal", "dice", "scal_geo", "scal_sem", "lovasz", "depth", "semantic2d"];

    pub fn splat(v: f64) -> Self {
        Self {
            focal: v,
            dice: v,
            scal_geo: v,
            scal_sem: v,
            lovasz: v,
            depth: v,
            semantic2d: v,
        }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.focal,
            self.dice,
            self.scal_geo,
            self.scal_sem,
            self.lovasz,
            self.depth,
            self.semantic2d,
        ]
    }
}

/// Nonnegative combination weights, all 1 by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossTerms", into = "LossTerms")]
pub struct LossWeights(LossTerms);

impl TryFrom<LossTerms> for LossWeights {
    type Error = Error;
    fn try_from(t: LossTerms) -> Result<Self> {
        LossWeights::new(t)
    }
}

impl From<LossWeights> for LossTerms {
    fn from(w: LossWeights) -> Self {
        w.0
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self(LossTerms::splat(1.0))
    }
}

impl LossWeights {
    pub fn new(terms: LossTerms) -> Result<Self> {
        if terms.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights", "every weight must be finite and ≥ 0"));
        }
        Ok(Self(terms))
    }

    pub fn terms(&self) -> &LossTerms {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Raw term values.
    pub terms: BTreeMap<String, f64>,
    /// `weight · term` per term.
    pub weighted: BTreeMap<String, f64>,
    pub total: f64,
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> LossBreakdown {
    let mut raw = BTreeMap::new();
    let mut weighted = BTreeMap::new();
    let mut total = 0.0;
    for ((name, v), w) in LossTerms::NAMES
        .iter()
        .zip(terms.as_array())
        .zip(weights.0.as_array())
    {
        let wv = w * v;
        raw.insert(name.to_string(), v);
        weighted.insert(name.to_string(), wv);
        total += wv;
    }
    LossBreakdown {
        terms: raw,
        weighted,
        total,
    }
}

/// The five voxel terms; the 2D terms are left at zero.
pub fn voxel_losses(pred: &PredictionResult, gt: &OccupancyGrid, grid: &VoxelGridSpec) -> Result<LossTerms> {
    Ok(LossTerms {
        focal: distance_aware_focal(pred, gt, grid)?,
        dice: dice_loss(pred, gt)?,
        scal_geo: scal_geo(pred, gt)?,
        scal_sem: scal_sem(pred, gt)?,
        lovasz: lovasz_softmax(pred, gt)?,
        depth: 0.0,
        semantic2d: 0.0,
    })
}
