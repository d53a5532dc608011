//! Test-time augmentation and ensembling of occupancy predictions.

use std::collections::BTreeMap;

use ndarray::{s, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, VoxelGridSpec};
use crate::metrics::{miou, semantic_classes, ConfusionMatrix};
use crate::occ_head::{decode, sample_trilinear, OccupancyGrid, Padding, PredictionResult};
use crate::{class_id, CLASS_NAMES, NUM_CLASSES};

/// One test-time augmentation: horizontal image flip and mirrors of the
/// ego x / y axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Flip {
    pub image_h: bool,
    pub x: bool,
    pub y: bool,
}

impl Flip {
    /// All eight combinations, identity first.
    pub fn all() -> [Flip; 8] {
        std::array::from_fn(|i| Flip {
            image_h: i & 4 != 0,
            x: i & 2 != 0,
            y: i & 1 != 0,
        })
    }
}

/// Mirrors the spatial x / y axes (axes 1 and 2) of a `(C, X, Y, Z)` array.
/// Self-inverse.
pub fn flip_volume(values: &Array4<f64>, x: bool, y: bool) -> Array4<f64> {
    match (x, y) {
        (false, false) => values.clone(),
        (true, false) => values.slice(s![.., ..;-1, .., ..]).to_owned(),
        (false, true) => values.slice(s![.., .., ..;-1, ..]).to_owned(),
        (true, true) => values.slice(s![.., ..;-1, ..;-1, ..]).to_owned(),
    }
}

pub fn flip_prediction(pred: &PredictionResult, flip: Flip) -> PredictionResult {
    PredictionResult {
        probs: flip_volume(&pred.probs, flip.x, flip.y),
    }
}

/// Eight-way flip TTA. `model(flip)` must run on inputs transformed by
/// `flip` and return its prediction in the flipped 3D frame; each result is
/// mapped back and the eight are averaged in [`Flip::all`] order.
pub fn tta_flips<F>(model: F) -> Result<PredictionResult>
where
    F: Fn(Flip) -> Result<PredictionResult> + Sync,
{
    let branches: Vec<PredictionResult> = Flip::all()
        .par_iter()
        .map(|&f| model(f).map(|p| flip_prediction(&p, f)))
        .collect::<Result<_>>()?;
    let mut iter = branches.into_iter();
    let mut acc = iter.next().expect("eight branches").probs;
    for b in iter {
        if b.probs.dim() != acc.dim() {
            return Err(Error::DimensionMismatch("TTA branches disagree in shape".into()));
        }
        acc += &b.probs;
    }
    acc /= 8.0;
    Ok(PredictionResult { probs: acc })
}

/// A past prediction and its ego pose (frame → world).
#[derive(Debug, Clone)]
pub struct TemporalRecord {
    pub prediction: PredictionResult,
    pub ego_pose: RigidTransform,
}

/// Road, flat ground, buildings, vegetation and barriers.
pub fn default_static_classes() -> Vec<usize> {
    [
        "driveable_surface",
        "other_flat",
        "sidewalk",
        "terrain",
        "manmade",
        "vegetation",
        "barrier",
    ]
    .iter()
    .map(|n| class_id(n).expect("known class"))
    .collect()
}

pub const DEFAULT_NEAR_RADIUS: f64 = 8.0;

/// Replaces static-class voxels with the co-located prediction from the
/// most recent history frame in which the voxel lay within `near_radius`
/// (horizontal distance) of that frame's ego position and inside its grid.
/// `history` is ordered oldest first and must share the current grid.
pub fn temporal_tta(
    current: &PredictionResult,
    history: &[TemporalRecord],
    current_pose: &RigidTransform,
    grid: &VoxelGridSpec,
    static_classes: &[usize],
    near_radius: f64,
) -> Result<PredictionResult> {
    if !(near_radius > 0.0) {
        return Err(Error::invalid("temporal TTA", "near_radius must be positive"));
    }
    if history.is_empty() {
        return Ok(current.clone());
    }
    let dim = current.spatial_dim();
    if <[usize; 3]>::from(dim) != grid.shape() {
        return Err(Error::DimensionMismatch("prediction does not match grid".into()));
    }
    if history.iter().any(|h| h.prediction.spatial_dim() != dim) {
        return Err(Error::DimensionMismatch("history prediction shape differs".into()));
    }
    let mut is_static = [false; NUM_CLASSES];
    for &c in static_classes {
        if c < NUM_CLASSES {
            is_static[c] = true;
        }
    }
    let labels = decode(current);
    let to_local: Vec<RigidTransform> = history
        .iter()
        .map(|h| h.ego_pose.inverse().compose(current_pose))
        .collect();
    let (nx, ny, nz) = dim;

    let replacements: Vec<Option<Vec<f64>>> = (0..nx * ny * nz)
        .into_par_iter()
        .map(|i| {
            let idx = [i / (ny * nz), (i / nz) % ny, i % nz];
            if !is_static[labels[idx] as usize] {
                return None;
            }
            let center = grid.voxel_center(idx);
            for (record, pose) in history.iter().zip(&to_local).rev() {
                let q = pose.apply(&center);
                if q.x.hypot(q.y) <= near_radius && grid.contains(&q) {
                    return Some(sample_trilinear(record.prediction.probs.view(), grid, &q, Padding::Clamp));
                }
            }
            None
        })
        .collect();

    let mut out = current.clone();
    for (i, rep) in replacements.into_iter().enumerate() {
        if let Some(v) = rep {
            let (x, y, z) = (i / (ny * nz), (i / nz) % ny, i % nz);
            for (c, p) in v.into_iter().enumerate() {
                out.probs[(c, x, y, z)] = p;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub prediction: PredictionResult,
    pub model_miou: f64,
    pub class_ious: [f64; NUM_CLASSES],
}

impl EnsembleMember {
    pub fn new(prediction: PredictionResult, model_miou: f64, class_ious: [f64; NUM_CLASSES]) -> Result<Self> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(model_miou) || !class_ious.iter().all(|&v| in_unit(v)) {
            return Err(Error::invalid("ensemble member", "scores must lie in [0, 1]"));
        }
        Ok(Self {
            prediction,
            model_miou,
            class_ious,
        })
    }
}

/// Per-member model weight and per-class weight.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleWeights {
    pub model: Vec<f64>,
    pub class: Vec<[f64; NUM_CLASSES]>,
}

impl EnsembleWeights {
    pub fn from_members(members: &[EnsembleMember]) -> Self {
        Self {
            model: members.iter().map(|m| m.model_miou).collect(),
            class: members.iter().map(|m| m.class_ious).collect(),
        }
    }

    /// Selects member `m` alone.
    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            model: (0..n).map(|i| if i == m { 1.0 } else { 0.0 }).collect(),
            class: (0..n)
                .map(|i| if i == m { [1.0; NUM_CLASSES] } else { [0.0; NUM_CLASSES] })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.model.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model.is_empty()
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.model.len() != n || self.class.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "weight table covers {} members, ensemble has {n}",
                self.model.len()
            )));
        }
        let ok = |v: &f64| v.is_finite() && *v >= 0.0;
        if !self.model.iter().all(ok) || !self.class.iter().flatten().all(ok) {
            return Err(Error::invalid("ensemble weights", "weights must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// Two-factor weighted mean of member probabilities.
///
/// For class `c`: `Σ_m w_m·v_mc·p_mc / Σ_m w_m·v_mc`, falling back to the
/// plain mean when the denominator is zero; each voxel is then renormalized.
pub fn ensemble(members: &[EnsembleMember], weights: Option<&EnsembleWeights>) -> Result<PredictionResult> {
    if members.is_empty() {
        return Err(Error::Empty("ensemble members"));
    }
    let default;
    let weights = match weights {
        Some(w) => w,
        None => {
            default = EnsembleWeights::from_members(members);
            &default
        }
    };
    weights.validate(members.len())?;
    let preds: Vec<&PredictionResult> = members.iter().map(|m| &m.prediction).collect();
    combine(&preds, weights)
}

fn combine(preds: &[&PredictionResult], weights: &EnsembleWeights) -> Result<PredictionResult> {
    let dim = preds[0].probs.dim();
    if preds.iter().any(|p| p.probs.dim() != dim) {
        return Err(Error::DimensionMismatch("ensemble members differ in shape".into()));
    }
    let (k, nx, ny, nz) = dim;
    let factors: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            (0..preds.len())
                .map(|m| weights.model[m] * weights.class[m].get(c).copied().unwrap_or(0.0))
                .collect()
        })
        .collect();
    let nm = preds.len() as f64;

    let columns: Vec<Vec<f64>> = (0..nx * ny * nz)
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = (i / (ny * nz), (i / nz) % ny, i % nz);
            let mut out = vec![0.0; k];
            for (c, slot) in out.iter_mut().enumerate() {
                let f = &factors[c];
                let contributing: Vec<usize> = (0..preds.len()).filter(|&m| f[m] > 0.0).collect();
                *slot = match contributing.as_slice() {
                    [] => preds.iter().map(|p| p.probs[(c, x, y, z)]).sum::<f64>() / nm,
                    [m] => preds[*m].probs[(c, x, y, z)],
                    ms => {
                        let num: f64 = ms.iter().map(|&m| f[m] * preds[m].probs[(c, x, y, z)]).sum();
                        let den: f64 = ms.iter().map(|&m| f[m]).sum();
                        num / den
                    }
                };
            }
            let s: f64 = out.iter().sum();
            if s <= 0.0 {
                for (c, slot) in out.iter_mut().enumerate() {
                    *slot = preds.iter().map(|p| p.probs[(c, x, y, z)]).sum::<f64>() / nm;
                }
            } else if (s - 1.0).abs() > 1e-12 {
                out.iter_mut().for_each(|v| *v /= s);
            }
            out
        })
        .collect();

    let mut probs = Array4::zeros(dim);
    for (i, col) in columns.into_iter().enumerate() {
        let (x, y, z) = (i / (ny * nz), (i / nz) % ny, i % nz);
        probs.slice_mut(s![.., x, y, z]).assign(&ndarray::Array1::from(col));
    }
    Ok(PredictionResult { probs })
}

/// Validation mIoU and per-class IoU (absent classes as 0) of one model.
pub fn score_predictions(preds: &[PredictionResult], gts: &[OccupancyGrid]) -> Result<(f64, [f64; NUM_CLASSES])> {
    let cm = confusion(preds.iter(), gts)?;
    let ious = cm.iou_per_class();
    let class = std::array::from_fn(|c| ious[c].unwrap_or(0.0));
    Ok((miou(&ious, &semantic_classes()).unwrap_or(0.0), class))
}

fn confusion<'a>(preds: impl Iterator<Item = &'a PredictionResult>, gts: &[OccupancyGrid]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    let mut n = 0;
    for (p, gt) in preds.zip(gts) {
        cm.accumulate(&decode(p), gt, true)?;
        n += 1;
    }
    if n != gts.len() {
        return Err(Error::DimensionMismatch("fewer predictions than ground-truth frames".into()));
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub weights: EnsembleWeights,
    pub miou: f64,
    pub trials: usize,
}

const COORDINATE_LEVELS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Seeded weight search maximizing validation mIoU.
///
/// `member_preds[m][f]` is member `m`'s prediction for validation frame `f`.
/// Trials, in order: each member alone, the default two-factor weighting,
/// `budget` uniform random class-weight tables, then one coordinate-ascent
/// pass over every (member, class) weight. Only strict improvements replace
/// the incumbent, so ties resolve to the earliest trial.
pub fn search_weights(
    member_preds: &[Vec<PredictionResult>],
    gts: &[OccupancyGrid],
    budget: usize,
    seed: u64,
) -> Result<SearchResult> {
    if member_preds.is_empty() {
        return Err(Error::Empty("ensemble members"));
    }
    if gts.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if budget == 0 {
        return Err(Error::invalid("weight search", "budget must be ≥ 1"));
    }
    if member_preds.iter().any(|p| p.len() != gts.len()) {
        return Err(Error::DimensionMismatch("every member needs one prediction per validation frame".into()));
    }
    let n = member_preds.len();
    let evaluate = |w: &EnsembleWeights| -> Result<f64> {
        let mut cm = ConfusionMatrix::default();
        for (f, gt) in gts.iter().enumerate() {
            let frame: Vec<&PredictionResult> = member_preds.iter().map(|m| &m[f]).collect();
            let combined = combine(&frame, w)?;
            cm.accumulate(&decode(&combined), gt, true)?;
        }
        Ok(miou(&cm.iou_per_class(), &semantic_classes()).unwrap_or(0.0))
    };

    let mut best: Option<(EnsembleWeights, f64)> = None;
    let mut trials = 0usize;
    let mut consider = |w: EnsembleWeights, best: &mut Option<(EnsembleWeights, f64)>| -> Result<()> {
        let score = evaluate(&w)?;
        trials += 1;
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            *best = Some((w, score));
        }
        Ok(())
    };

    for m in 0..n {
        consider(EnsembleWeights::identity(n, m), &mut best)?;
    }
    let mut members = Vec::with_capacity(n);
    for preds in member_preds {
        let (mi, ci) = score_predictions(preds, gts)?;
        members.push((mi, ci));
    }
    consider(
        EnsembleWeights {
            model: members.iter().map(|m| m.0).collect(),
            class: members.iter().map(|m| m.1).collect(),
        },
        &mut best,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..budget {
        let class = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
            .collect();
        consider(EnsembleWeights { model: vec![1.0; n], class }, &mut best)?;
    }

    for m in 0..n {
        for c in 0..NUM_CLASSES {
            for &level in &COORDINATE_LEVELS {
                let (incumbent, _) = best.as_ref().expect("at least one trial");
                if incumbent.class[m][c] == level {
                    continue;
                }
                let mut cand = incumbent.clone();
                cand.class[m][c] = level;
                if cand.model[m] == 0.0 {
                    cand.model[m] = 1.0;
                }
                consider(cand, &mut best)?;
            }
        }
    }

    let (weights, miou) = best.expect("at least one trial");
    Ok(SearchResult { weights, miou, trials })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemberWeightsJson {
    id: String,
    model_weight: f64,
    class_weights: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightTableJson {
    members: Vec<MemberWeightsJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    miou: Option<f64>,
}

/// Serializes a weight table keyed by member id and class name.
pub fn weights_to_json(weights: &EnsembleWeights, ids: &[String], miou: Option<f64>) -> Result<String> {
    if ids.len() != weights.len() {
        return Err(Error::DimensionMismatch("one id per member required".into()));
    }
    let members = ids
        .iter()
        .enumerate()
        .map(|(m, id)| MemberWeightsJson {
            id: id.clone(),
            model_weight: weights.model[m],
            class_weights: CLASS_NAMES
                .iter()
                .zip(weights.class[m])
                .map(|(n, v)| (n.to_string(), v))
                .collect(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&WeightTableJson { members, miou })?)
}

/// Parses a weight table; returns member ids in file order. Missing classes
/// are an error.
pub fn weights_from_json(json: &str) -> Result<(Vec<String>, EnsembleWeights)> {
    let table: WeightTableJson = serde_json::from_str(json)?;
    let mut ids = Vec::new();
    let mut w = EnsembleWeights {
        model: Vec::new(),
        class: Vec::new(),
    };
    for m in table.members {
        if ids.contains(&m.id) {
            return Err(Error::invalid("weight table", format!("duplicate member id `{}`", m.id)));
        }
        let mut class = [0.0; NUM_CLASSES];
        for (name, v) in &m.class_weights {
            let c = class_id(name).ok_or_else(|| Error::invalid("weight table", format!("unknown class `{name}`")))?;
            class[c] = *v;
        }
        if m.class_weights.len() != NUM_CLASSES {
            return Err(Error::invalid(
                "weight table",
                format!("member `{}` lists {} classes, expected {NUM_CLASSES}", m.id, m.class_weights.len()),
            ));
        }
        ids.push(m.id);
        w.model.push(m.model_weight);
        w.class.push(class);
    }
    w.validate(ids.len())?;
    Ok((ids, w))
}

/// Per-voxel class-probability sums, useful for checking the simplex invariant.
pub fn voxel_sums(pred: &PredictionResult) -> ndarray::Array3<f64> {
    pred.probs.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn random_pred(shape: (usize, usize, usize), seed: u64) -> PredictionResult {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array4::from_shape_simple_fn((NUM_CLASSES, shape.0, shape.1, shape.2), || rng.random_range(0.01..1.0));
        let sums = raw.sum_axis(Axis(0));
        let probs = Array4::from_shape_fn(raw.dim(), |(c, x, y, z)| raw[(c, x, y, z)] / sums[(x, y, z)]);
        PredictionResult { probs }
    }

    #[test]
    fn flips_enumerate_eight_distinct() {
        let all = Flip::all();
        assert_eq!(all[0], Flip::default());
        let set: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), 8);
    }

    #[test]
    fn flip_volume_is_involution() {
        let p = random_pred((3, 4, 2), 1);
        for f in Flip::all() {
            assert_eq!(flip_prediction(&flip_prediction(&p, f), f), p);
        }
    }

    #[test]
    fn constant_model_tta() {
        let p = PredictionResult::uniform([2, 3, 2]);
        let out = tta_flips(|_| Ok(p.clone())).unwrap();
        assert!(out.probs.iter().zip(p.probs.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn flip_dependent_one_hots() {
        // 2×2×1 grid; in the flipped frame the model always marks voxel (0,0)
        // with class (flip index) and everything else free.
        let model = |f: Flip| {
            let idx = Flip::all().iter().position(|g| *g == f).unwrap();
            let mut labels = Array3::from_elem((2, 2, 1), 17u8);
            labels[(0, 0, 0)] = idx as u8;
            Ok(PredictionResult::one_hot(&labels))
        };
        let out = tta_flips(model).unwrap();
        // hand enumeration: flip i maps flipped-frame (0,0) back to
        // (x ? 1 : 0, y ? 1 : 0); each of the 4 cells receives 2 of the 8 flips
        let mut expected = Array4::<f64>::zeros((18, 2, 2, 1));
        for (i, f) in Flip::all().iter().enumerate() {
            let (x, y) = (usize::from(f.x), usize::from(f.y));
            for cx in 0..2 {
                for cy in 0..2 {
                    let c = if (cx, cy) == (x, y) { i } else { 17 };
                    expected[(c, cx, cy, 0)] += 1.0 / 8.0;
                }
            }
        }
        assert_eq!(out.probs, expected);
        out.validate().unwrap();
    }

    #[test]
    fn ensemble_basics() {
        let p = random_pred((2, 2, 2), 3);
        let class = [0.5; NUM_CLASSES];
        let m = EnsembleMember::new(p.clone(), 0.4, class).unwrap();
        let single = ensemble(std::slice::from_ref(&m), None).unwrap();
        assert!(single.probs.iter().zip(p.probs.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
        let twin = ensemble(&[m.clone(), m.clone()], None).unwrap();
        assert!(twin.probs.iter().zip(p.probs.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(ensemble(&[], None).is_err());
        assert!(EnsembleMember::new(p, 1.5, class).is_err());
    }

    #[test]
    fn two_member_closed_form() {
        let mut a = Array4::zeros((18, 1, 1, 1));
        let mut b = Array4::zeros((18, 1, 1, 1));
        a[(0, 0, 0, 0)] = 0.8;
        a[(1, 0, 0, 0)] = 0.2;
        b[(0, 0, 0, 0)] = 0.3;
        b[(1, 0, 0, 0)] = 0.7;
        let mut ca = [0.0; 18];
        let mut cb = [0.0; 18];
        ca[0] = 0.5;
        ca[1] = 0.2;
        cb[0] = 0.25;
        cb[1] = 0.6;
        let ma = EnsembleMember::new(PredictionResult { probs: a }, 0.6, ca).unwrap();
        let mb = EnsembleMember::new(PredictionResult { probs: b }, 0.4, cb).unwrap();
        let out = ensemble(&[ma, mb], None).unwrap();
        // class 0: (0.6·0.5·0.8 + 0.4·0.25·0.3)/(0.3 + 0.1) = 0.27/0.4 = 0.675
        // class 1: (0.6·0.2·0.2 + 0.4·0.6·0.7)/(0.12 + 0.24) = 0.192/0.36 = 0.5333…
        // classes 2..17: zero denominator → plain mean of zeros
        let (c0, c1) = (0.675, 0.192 / 0.36);
        let s = c0 + c1;
        assert!((out.probs[(0, 0, 0, 0)] - c0 / s).abs() < 1e-12);
        assert!((out.probs[(1, 0, 0, 0)] - c1 / s).abs() < 1e-12);
        out.validate().unwrap();
    }

    #[test]
    fn weight_table_json_round_trip() {
        let w = EnsembleWeights {
            model: vec![0.3, 1.0],
            class: vec![[0.25; NUM_CLASSES], [1.0; NUM_CLASSES]],
        };
        let ids = vec!["alpha".to_string(), "beta".to_string()];
        let json = weights_to_json(&w, &ids, Some(0.5)).unwrap();
        let (ids2, w2) = weights_from_json(&json).unwrap();
        assert_eq!(ids2, ids);
        assert_eq!(w2, w);
        assert!(weights_from_json("{\"members\":[{\"id\":\"a\",\"model_weight\":1,\"class_weights\":{}}]}").is_err());
    }

    #[test]
    fn temporal_empty_history_is_identity() {
        let grid = VoxelGridSpec::new([-20.0, -20.0, -4.0], [20.0, 20.0, 4.0], 4.0).unwrap();
        let p = random_pred((10, 10, 2), 5);
        let out = temporal_tta(&p, &[], &RigidTransform::identity(), &grid, &default_static_classes(), 8.0).unwrap();
        assert_eq!(out, p);
    }
}
