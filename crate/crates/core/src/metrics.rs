//! Confusion matrices and mean IoU.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::occ_head::{check_labels, OccupancyGrid};
use crate::{CLASS_NAMES, FREE_LABEL, NUM_CLASSES};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new(NUM_CLASSES)
    }
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize, count: u64) {
        self.counts[gt * self.n + pred] += count;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|c| self.get(c, c)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n, other.n, "merging confusion matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Adds one frame. With `use_mask`, camera-invisible voxels are skipped.
    pub fn accumulate(&mut self, pred_labels: &Array3<u8>, gt: &OccupancyGrid, use_mask: bool) -> Result<()> {
        if pred_labels.dim() != gt.dim() {
            return Err(Error::DimensionMismatch(format!(
                "prediction {:?} vs ground truth {:?}",
                pred_labels.dim(),
                gt.dim()
            )));
        }
        check_labels(pred_labels)?;
        for ((idx, &g), &p) in gt.labels().indexed_iter().zip(pred_labels.iter()) {
            if use_mask && !gt.camera_mask()[idx] {
                continue;
            }
            self.add(g as usize, p as usize, 1);
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class, `None` when the denominator is zero.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.n).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let fp: u64 = (0..self.n).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

pub fn accumulate(pred_labels: &Array3<u8>, gt: &OccupancyGrid, use_mask: bool) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    cm.accumulate(pred_labels, gt, use_mask)?;
    Ok(cm)
}

/// The 17 semantic classes; free space is excluded.
pub fn semantic_classes() -> Vec<usize> {
    (0..NUM_CLASSES).filter(|&c| c != FREE_LABEL as usize).collect()
}

/// Mean over `classes` of the present IoUs; absent classes are skipped.
/// `None` when no listed class is present.
pub fn miou(per_class: &[Option<f64>], classes: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = classes
        .iter()
        .filter_map(|&c| per_class.get(c).copied().flatten())
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Evaluation summary with stable key names.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Class name → IoU (`null` when the class never occurs).
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    pub miou: Option<f64>,
    pub evaluated_voxels: u64,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let ious = cm.iou_per_class();
        let per_class_iou = CLASS_NAMES
            .iter()
            .zip(&ious)
            .map(|(n, v)| (n.to_string(), *v))
            .collect();
        Self {
            per_class_iou,
            miou: miou(&ious, &semantic_classes()),
            evaluated_voxels: cm.total(),
        }
    }
}
