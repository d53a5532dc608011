//! Losses and metrics against independent reference implementations.

mod common;

use common::*;
use fbocc_core::forward_vtm::{DepthBinSpec, DepthDistribution, SemanticLogits2D};
use fbocc_core::geometry::VoxelGridSpec;
use fbocc_core::losses::{
    depth_ce, dice_loss, distance_aware_focal, lovasz_class, lovasz_softmax, scal_geo, scal_sem, semantic2d_ce,
    total_loss, voxel_losses, LossTerms, LossWeights, SparseDepth, SparseLabels, EPS,
};
use fbocc_core::metrics::{accumulate, miou, semantic_classes, ConfusionMatrix, EvalReport};
use fbocc_core::occ_head::{OccupancyGrid, PredictionResult};
use fbocc_core::{FREE_LABEL, NUM_CLASSES};
use ndarray::{Array3, Axis};
use rand::Rng;

const SHAPE: (usize, usize, usize) = (6, 5, 3);

fn fixture(seed: u64) -> (PredictionResult, OccupancyGrid) {
    let mut r = rng(seed);
    let pred = random_simplex(SHAPE, &mut r);
    let gt = OccupancyGrid::new(random_labels(SHAPE, &mut r), random_mask(SHAPE, &mut r, 0.7)).unwrap();
    (pred, gt)
}

fn visible_list(gt: &OccupancyGrid) -> Vec<([usize; 3], usize)> {
    let (nx, ny, nz) = gt.dim();
    let mut out = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if gt.camera_mask()[(x, y, z)] {
                    out.push(([x, y, z], gt.labels()[(x, y, z)] as usize));
                }
            }
        }
    }
    out
}

#[test]
fn focal_matches_weighted_mean() {
    let grid = VoxelGridSpec::new([-3.0, -2.0, -1.0], [3.0, 3.0, 2.0], 1.0).unwrap();
    let (pred, gt) = fixture(1);
    // farthest horizontal corner is (±3, 3)
    let d_max = 18f64.sqrt();
    let vis = visible_list(&gt);
    let mut sum = 0.0;
    for ([x, y, z], l) in &vis {
        let cx = -3.0 + *x as f64 + 0.5;
        let cy = -2.0 + *y as f64 + 0.5;
        let w = 0.5 + (cx * cx + cy * cy).sqrt() / d_max;
        let p = pred.probs[(*l, *x, *y, *z)].max(EPS);
        sum += w * (1.0 - p) * (1.0 - p) * -p.ln();
    }
    let expected = sum / vis.len() as f64;
    let got = distance_aware_focal(&pred, &gt, &grid).unwrap();
    assert!((got - expected).abs() < 1e-12 * expected.max(1.0));
}

#[test]
fn dice_uniform_closed_form() {
    let mut r = rng(2);
    let gt = OccupancyGrid::new(random_labels(SHAPE, &mut r), random_mask(SHAPE, &mut r, 0.6)).unwrap();
    let pred = PredictionResult::uniform([SHAPE.0, SHAPE.1, SHAPE.2]);
    let vis = visible_list(&gt);
    let n = vis.len() as f64;
    let k = NUM_CLASSES as f64;
    let mut per_class = Vec::new();
    for c in 0..NUM_CLASSES {
        let nc = vis.iter().filter(|(_, l)| *l == c).count() as f64;
        if nc > 0.0 {
            per_class.push(1.0 - (2.0 * nc / k + EPS) / (n / k + nc + EPS));
        }
    }
    let expected = per_class.iter().sum::<f64>() / per_class.len() as f64;
    assert!((dice_loss(&pred, &gt).unwrap() - expected).abs() < 1e-9);

    let perfect = PredictionResult::one_hot(gt.labels());
    assert!(dice_loss(&perfect, &gt).unwrap().abs() < 1e-6);
}

/// Precision, recall and specificity written out longhand.
fn scal_reference(p: &[f64], t: &[bool]) -> Option<f64> {
    let tp: f64 = p.iter().zip(t).filter(|(_, &t)| t).map(|(p, _)| p).sum();
    let predicted: f64 = p.iter().sum();
    let positives = t.iter().filter(|&&t| t).count() as f64;
    let negatives = t.len() as f64 - positives;
    let tn: f64 = p.iter().zip(t).filter(|(_, &t)| !t).map(|(p, _)| 1.0 - p).sum();
    let mut terms = vec![];
    if predicted > 0.0 {
        terms.push(-(tp / predicted).max(EPS).ln());
    }
    if positives > 0.0 {
        terms.push(-(tp / positives).max(EPS).ln());
    }
    if negatives > 0.0 {
        terms.push(-(tn / negatives).max(EPS).ln());
    }
    (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
}

#[test]
fn scal_matches_three_ratio_reference() {
    for seed in 0..5 {
        let (pred, gt) = fixture(10 + seed);
        let vis = visible_list(&gt);
        let occ: Vec<f64> = vis
            .iter()
            .map(|([x, y, z], _)| 1.0 - pred.probs[(FREE_LABEL as usize, *x, *y, *z)])
            .collect();
        let t: Vec<bool> = vis.iter().map(|(_, l)| *l != FREE_LABEL as usize).collect();
        let geo = scal_reference(&occ, &t).unwrap();
        assert!((scal_geo(&pred, &gt).unwrap() - geo).abs() < 1e-12);

        let mut sem = vec![];
        for c in 0..NUM_CLASSES {
            let t: Vec<bool> = vis.iter().map(|(_, l)| *l == c).collect();
            if !t.contains(&true) {
                continue;
            }
            let p: Vec<f64> = vis.iter().map(|([x, y, z], _)| pred.probs[(c, *x, *y, *z)]).collect();
            sem.push(scal_reference(&p, &t).unwrap());
        }
        let sem = sem.iter().sum::<f64>() / sem.len() as f64;
        assert!((scal_sem(&pred, &gt).unwrap() - sem).abs() < 1e-12);
    }
}

fn blend(pred: &PredictionResult, gt: &OccupancyGrid, lambda: f64) -> PredictionResult {
    let target = PredictionResult::one_hot(gt.labels());
    PredictionResult {
        probs: &pred.probs * (1.0 - lambda) + &target.probs * lambda,
    }
}

#[test]
fn losses_decrease_towards_ground_truth() {
    let grid = VoxelGridSpec::new([-3.0, -2.0, -1.0], [3.0, 3.0, 2.0], 1.0).unwrap();
    let (pred, gt) = fixture(20);
    let mut prev: Option<[f64; 7]> = None;
    for step in 0..=10 {
        let p = blend(&pred, &gt, step as f64 / 10.0);
        let terms = voxel_losses(&p, &gt, &grid).unwrap().as_array();
        if let Some(prev) = prev {
            for i in 0..5 {
                assert!(terms[i] <= prev[i] + 1e-12, "{} increased at step {step}", LossTerms::NAMES[i]);
            }
        }
        prev = Some(terms);
    }
    let at_gt = prev.unwrap();
    assert!(at_gt[..5].iter().all(|&v| v.abs() < 1e-5), "{at_gt:?}");
}

/// `∫₀^∞ Δ({i : eᵢ ≥ t}) dt` with `Δ(M) = 1 − |F∖M| / |F ∪ M|`.
fn jaccard_integral(errors: &[f64], fg: &[bool]) -> f64 {
    let delta = |t: f64| {
        let m: Vec<bool> = errors.iter().map(|&e| e >= t).collect();
        let inter = fg.iter().zip(&m).filter(|(&f, &m)| f && !m).count() as f64;
        let union = fg.iter().zip(&m).filter(|(&f, &m)| f || m).count() as f64;
        if union == 0.0 {
            0.0
        } else {
            1.0 - inter / union
        }
    };
    let mut levels: Vec<f64> = errors.to_vec();
    levels.push(0.0);
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    levels.windows(2).map(|w| (w[1] - w[0]) * delta(w[1])).sum()
}

#[test]
fn lovasz_matches_threshold_integral() {
    let mut r = rng(30);
    for _ in 0..200 {
        let errors: Vec<f64> = (0..5).map(|_| r.random_range(0.0..1.0)).collect();
        let mut fg: Vec<bool> = (0..5).map(|_| r.random_bool(0.5)).collect();
        fg[0] = true;
        let got = lovasz_class(&errors, &fg);
        let expected = jaccard_integral(&errors, &fg);
        assert!((got - expected).abs() < 1e-12, "{errors:?} {fg:?}: {got} vs {expected}");
    }
    // ties
    let errors = [0.5, 0.5, 0.2, 0.2, 0.9];
    let fg = [true, false, true, false, false];
    assert!((lovasz_class(&errors, &fg) - jaccard_integral(&errors, &fg)).abs() < 1e-12);
}

#[test]
fn lovasz_softmax_averages_present_classes() {
    let (pred, gt) = fixture(31);
    let vis = visible_list(&gt);
    let mut per = vec![];
    for c in 0..NUM_CLASSES {
        let fg: Vec<bool> = vis.iter().map(|(_, l)| *l == c).collect();
        if !fg.contains(&true) {
            continue;
        }
        let e: Vec<f64> = vis
            .iter()
            .map(|([x, y, z], l)| {
                let p = pred.probs[(c, *x, *y, *z)];
                if *l == c {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        per.push(jaccard_integral(&e, &fg));
    }
    let expected = per.iter().sum::<f64>() / per.len() as f64;
    assert!((lovasz_softmax(&pred, &gt).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn depth_ce_matches_naive() {
    let bins = DepthBinSpec::new(10, 2.0, 12.0).unwrap();
    let mut r = rng(40);
    let raw: Array3<f64> = Array3::from_shape_simple_fn((10, 4, 5), || r.random_range(0.0..1.0));
    let probs = &raw / &raw.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut gt = SparseDepth::new();
    let mut sum = 0.0;
    let mut n = 0;
    for _ in 0..12 {
        let (row, col) = (r.random_range(0..4), r.random_range(0..5));
        let meters: f64 = r.random_range(0.0..14.0);
        gt.insert((row, col), meters);
    }
    for (&(row, col), &m) in &gt {
        if (2.0..12.0).contains(&m) {
            let b = (m - 2.0).floor() as usize;
            sum -= f64::max(probs[(b, row, col)], EPS).ln();
            n += 1;
        }
    }
    let got = depth_ce(&DepthDistribution { probs }, &gt, &bins).unwrap();
    assert!((got - sum / n as f64).abs() < 1e-12);
}

#[test]
fn semantic_ce_matches_log_softmax() {
    let mut r = rng(41);
    let logits: Array3<f64> = Array3::from_shape_simple_fn((18, 3, 4), || r.random_range(-3.0..3.0));
    let mut gt = SparseLabels::new();
    for row in 0..3 {
        for col in 0..4 {
            if r.random_bool(0.6) {
                gt.insert((row, col), r.random_range(0..18));
            }
        }
    }
    let mut sum = 0.0;
    for (&(row, col), &l) in &gt {
        let z: f64 = (0..18).map(|k| logits[(k, row, col)].exp()).sum();
        sum -= (logits[(l as usize, row, col)].exp() / z).ln();
    }
    let got = semantic2d_ce(&SemanticLogits2D { logits }, &gt).unwrap();
    assert!((got - sum / gt.len() as f64).abs() < 1e-12);
}

#[test]
fn total_is_dot_product() {
    let mut r = rng(42);
    let mut draw = || LossTerms {
        focal: r.random_range(0.0..2.0),
        dice: r.random_range(0.0..2.0),
        scal_geo: r.random_range(0.0..2.0),
        scal_sem: r.random_range(0.0..2.0),
        lovasz: r.random_range(0.0..2.0),
        depth: r.random_range(0.0..2.0),
        semantic2d: r.random_range(0.0..2.0),
    };
    let terms = draw();
    let w = LossWeights::new(draw()).unwrap();
    let expected: f64 = terms.as_array().iter().zip(w.terms().as_array()).map(|(a, b)| a * b).sum();
    let b = total_loss(&terms, &w);
    assert!((b.total - expected).abs() < 1e-12);
    assert!((b.weighted.values().sum::<f64>() - expected).abs() < 1e-12);
    assert_eq!(b.terms["lovasz"], terms.lovasz);
    let unit = total_loss(&terms, &LossWeights::default());
    assert!((unit.total - terms.as_array().iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn accumulate_matches_triple_loop() {
    let mut r = rng(50);
    let shape = (7, 6, 4);
    let pred = random_labels(shape, &mut r);
    let gt = OccupancyGrid::new(random_labels(shape, &mut r), random_mask(shape, &mut r, 0.5)).unwrap();
    for use_mask in [true, false] {
        let cm = accumulate(&pred, &gt, use_mask).unwrap();
        let mut counts = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for x in 0..7 {
            for y in 0..6 {
                for z in 0..4 {
                    if use_mask && !gt.camera_mask()[(x, y, z)] {
                        continue;
                    }
                    counts[gt.labels()[(x, y, z)] as usize][pred[(x, y, z)] as usize] += 1;
                }
            }
        }
        for g in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                assert_eq!(cm.get(g, p), counts[g][p]);
            }
        }
    }
}

#[test]
fn iou_matches_set_definition() {
    let mut r = rng(51);
    let mut cm = ConfusionMatrix::default();
    for g in 0..NUM_CLASSES {
        for p in 0..NUM_CLASSES {
            if r.random_bool(0.3) {
                cm.add(g, p, r.random_range(1..20));
            }
        }
    }
    let ious = cm.iou_per_class();
    let mut expected_present = vec![];
    for (c, iou) in ious.iter().enumerate() {
        let row: u64 = (0..NUM_CLASSES).map(|p| cm.get(c, p)).sum();
        let col: u64 = (0..NUM_CLASSES).map(|g| cm.get(g, c)).sum();
        let union = row + col - cm.get(c, c);
        if union == 0 {
            assert!(iou.is_none());
        } else {
            let e = cm.get(c, c) as f64 / union as f64;
            assert!((iou.unwrap() - e).abs() < 1e-15);
            if c != FREE_LABEL as usize {
                expected_present.push(e);
            }
        }
    }
    let m = miou(&ious, &semantic_classes()).unwrap();
    assert!((m - expected_present.iter().sum::<f64>() / expected_present.len() as f64).abs() < 1e-12);
    assert_eq!(EvalReport::from_confusion(&cm).miou, Some(m));
}

#[test]
fn perfect_prediction_scores_one() {
    let mut r = rng(52);
    let gt = OccupancyGrid::new(random_labels(SHAPE, &mut r), random_mask(SHAPE, &mut r, 0.8)).unwrap();
    let cm = accumulate(gt.labels(), &gt, true).unwrap();
    let report = EvalReport::from_confusion(&cm);
    assert_eq!(report.miou, Some(1.0));
    assert_eq!(report.evaluated_voxels, gt.num_visible() as u64);
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = vec![];
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

#[test]
fn losses_invariant_under_every_relabeling_of_a_2x2x1_grid() {
    let grid = VoxelGridSpec::new([-1.0, -1.0, 0.0], [1.0, 1.0, 1.0], 1.0).unwrap();
    let classes = [1usize, 4, 10, 13];
    let labels = Array3::from_shape_vec((2, 2, 1), classes.iter().map(|&c| c as u8).collect()).unwrap();
    let gt = OccupancyGrid::all_visible(labels.clone()).unwrap();
    let pred = random_simplex((2, 2, 1), &mut rng(60));
    let base = voxel_losses(&pred, &gt, &grid).unwrap().as_array();
    let perms = permutations(&classes);
    assert_eq!(perms.len(), 24);
    for p in perms {
        let mut map: Vec<usize> = (0..NUM_CLASSES).collect();
        for (from, to) in classes.iter().zip(&p) {
            map[*from] = *to;
        }
        let gt_p = OccupancyGrid::all_visible(labels.mapv(|l| map[l as usize] as u8)).unwrap();
        let mut probs = pred.probs.clone();
        for c in 0..NUM_CLASSES {
            probs.index_axis_mut(Axis(0), map[c]).assign(&pred.probs.index_axis(Axis(0), c));
        }
        let got = voxel_losses(&PredictionResult { probs }, &gt_p, &grid).unwrap().as_array();
        for i in 0..5 {
            assert!((got[i] - base[i]).abs() < 1e-12, "{} under {p:?}", LossTerms::NAMES[i]);
        }
    }
}
