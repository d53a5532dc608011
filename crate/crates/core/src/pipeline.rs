//! End-to-end driver: synthetic frames → encoder → forward / backward view
//! transformation → fusion → head → optional TTA → losses and metrics.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backward_vtm::{backward_project, compress_voxel_to_bev, DEFAULT_N_HEIGHTS};
use crate::error::{Error, Result};
use crate::forward_vtm::{
    predict_depth_and_context, splat_views, DepthBinSpec, EncoderConfig, EncoderOutput, RgbImage, VoxelFeatureVolume,
};
use crate::geometry::{CameraModel, RigidTransform, VoxelGridSpec};
use crate::io::ModelWeights;
use crate::losses::{depth_ce, semantic2d_ce, total_loss, voxel_losses, LossTerms, LossWeights, SparseDepth, SparseLabels};
use crate::metrics::{miou, semantic_classes, ConfusionMatrix, EvalReport};
use crate::nn::hash_f64;
use crate::occ_head::{
    align_voxel_features, decode, expand_bev_to_voxel, fuse, fuse_history, head_forward, OccupancyGrid, PredictionResult,
};
use crate::postprocess::{flip_volume, tta_flips, temporal_tta, Flip, TemporalRecord, DEFAULT_NEAR_RADIUS};
use crate::scene::{ground_truth, render_views, shade, street_scene, surround_rig, RenderedView, SceneSpec, MISS_LABEL};
use crate::{class_id, CLASS_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: VoxelGridSpec,
    pub bins: DepthBinSpec,
    pub encoder: EncoderConfig,
    /// Image size and focal length of the bundled surround rig.
    pub image_height: usize,
    pub image_width: usize,
    pub focal: f64,
    pub n_heights: usize,
    /// Previous frames whose aligned voxel features are fused before the head.
    pub history_frames: usize,
    pub flip_tta: bool,
    pub temporal_tta: bool,
    pub near_radius: f64,
    pub static_classes: Vec<String>,
}

impl Default for PipelineConfig {
    /// Desk scale: 40×40×8 voxels of 0.8 m, 16 channels, 96×160 images.
    fn default() -> Self {
        Self {
            grid: VoxelGridSpec::new([-16.0, -16.0, -1.0], [16.0, 16.0, 5.4], 0.8).expect("valid desk grid"),
            bins: DepthBinSpec::default(),
            encoder: EncoderConfig {
                hidden_channels: 16,
                context_channels: 16,
                num_bins: 80,
                stride: 16,
            },
            image_height: 96,
            image_width: 160,
            focal: 120.0,
            n_heights: DEFAULT_N_HEIGHTS,
            history_frames: 1,
            flip_tta: false,
            temporal_tta: false,
            near_radius: DEFAULT_NEAR_RADIUS,
            static_classes: crate::postprocess::default_static_classes()
                .into_iter()
                .map(|c| CLASS_NAMES[c].to_string())
                .collect(),
        }
    }
}

impl PipelineConfig {
    /// Full-size grid (200×200×16 at 0.4 m) and 32 context channels.
    pub fn full_scale() -> Self {
        Self {
            grid: VoxelGridSpec::occ3d(),
            encoder: EncoderConfig::default(),
            image_height: 256,
            image_width: 704,
            focal: 400.0,
            ..Self::default()
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.num_bins != self.bins.num_bins() {
            return Err(Error::invalid(
                "config",
                format!("encoder.num_bins {} ≠ bins.num_bins {}", self.encoder.num_bins, self.bins.num_bins()),
            ));
        }
        let s = self.encoder.stride;
        if s == 0 || self.image_height == 0 || self.image_width == 0 || self.image_height % s != 0 || self.image_width % s != 0
        {
            return Err(Error::invalid("config", "image size must be a positive multiple of the stride"));
        }
        if !(self.focal > 0.0) {
            return Err(Error::invalid("config", "focal must be positive"));
        }
        if self.n_heights == 0 {
            return Err(Error::invalid("config", "n_heights must be ≥ 1"));
        }
        if !(self.near_radius > 0.0) {
            return Err(Error::invalid("config", "near_radius must be positive"));
        }
        self.static_class_ids()?;
        if self.flip_tta {
            let (lo, hi) = (self.grid.min_corner(), self.grid.max_corner());
            if (0..2).any(|a| (lo[a] + hi[a]).abs() > 1e-9) {
                return Err(Error::invalid("config", "flip TTA needs a grid symmetric in x and y"));
            }
        }
        Ok(())
    }

    pub fn static_class_ids(&self) -> Result<Vec<usize>> {
        self.static_classes
            .iter()
            .map(|n| class_id(n).ok_or_else(|| Error::invalid("config", format!("unknown class `{n}`"))))
            .collect()
    }

    pub fn rig(&self) -> Result<Vec<CameraModel>> {
        surround_rig(self.focal, self.image_height, self.image_width)
    }
}

/// Street scene with the config's surround rig.
pub fn bundled_scene(cfg: &PipelineConfig, frames: usize) -> Result<SceneSpec> {
    street_scene(cfg.rig()?, frames)
}

/// Ground truth, rendered views and shaded camera images of one frame.
#[derive(Debug, Clone)]
pub struct FrameInputs {
    pub gt: OccupancyGrid,
    pub views: Vec<RenderedView>,
    pub images: Vec<RgbImage>,
    pub ego_pose: RigidTransform,
}

pub fn frame_inputs(scene: &SceneSpec, grid: &VoxelGridSpec, frame: usize) -> Result<FrameInputs> {
    let gt = ground_truth(scene, grid, frame)?;
    let views = render_views(gt.labels(), grid, &scene.rig)?;
    let images = views.iter().map(shade).collect();
    Ok(FrameInputs {
        gt,
        views,
        images,
        ego_pose: scene.pose(frame)?,
    })
}

/// Sparse depth / class supervision at feature resolution: each feature
/// pixel reads the rendered pixel nearest its center.
pub fn sparse_targets(view: &RenderedView, stride: usize) -> (SparseDepth, SparseLabels) {
    let (h, w) = view.depth.dim();
    let mut depth = SparseDepth::new();
    let mut labels = SparseLabels::new();
    for r in 0..h / stride {
        for c in 0..w / stride {
            let px = (r * stride + stride / 2, c * stride + stride / 2);
            let l = view.semantics[px];
            if l != MISS_LABEL {
                depth.insert((r, c), view.depth[px]);
                labels.insert((r, c), l);
            }
        }
    }
    (depth, labels)
}

/// Runs the encoder per camera. With `flip_image`, each image is mirrored
/// before encoding and the outputs are mirrored back.
pub fn encode_views(images: &[RgbImage], weights: &ModelWeights, cfg: &EncoderConfig, flip_image: bool) -> Result<Vec<EncoderOutput>> {
    images
        .par_iter()
        .map(|img| {
            if flip_image {
                predict_depth_and_context(&img.flip_horizontal(), &weights.encoder, cfg).map(|o| o.flip_horizontal())
            } else {
                predict_depth_and_context(img, &weights.encoder, cfg)
            }
        })
        .collect()
}

/// Forward volume plus the expanded, backward-refined BEV.
pub fn fused_volume(
    views: &[EncoderOutput],
    rig: &[CameraModel],
    weights: &ModelWeights,
    cfg: &PipelineConfig,
) -> Result<VoxelFeatureVolume> {
    forward_and_backward(views, rig, weights, cfg, &mut |_| {})
}

fn forward_and_backward(
    views: &[EncoderOutput],
    rig: &[CameraModel],
    weights: &ModelWeights,
    cfg: &PipelineConfig,
    lap: &mut dyn FnMut(&'static str),
) -> Result<VoxelFeatureVolume> {
    let volume = splat_views(views, rig, &cfg.bins, &cfg.grid)?;
    lap("forward_vtm");
    let bev = compress_voxel_to_bev(&volume);
    let refined = backward_project(&bev, views, rig, &cfg.bins, &cfg.grid, &weights.backward, cfg.n_heights)?;
    let expanded = expand_bev_to_voxel(&refined, cfg.grid.shape()[2], cfg.grid)?;
    let fused = fuse(&volume, &expanded)?;
    lap("backward_vtm");
    Ok(fused)
}

/// Head on a (possibly x/y-mirrored) fused volume; the prediction stays in
/// the mirrored frame.
fn head_in_frame(volume: &VoxelFeatureVolume, weights: &ModelWeights, flip: Flip) -> Result<PredictionResult> {
    if flip.x || flip.y {
        let mirrored = VoxelFeatureVolume {
            values: flip_volume(&volume.values, flip.x, flip.y),
            grid: volume.grid,
        };
        head_forward(&mirrored, &weights.head)
    } else {
        head_forward(volume, &weights.head)
    }
}

/// Deterministic metrics report; timings are kept separately so the report
/// is byte-identical across runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub mode: &'static str,
    pub frames: usize,
    pub flip_tta: bool,
    pub temporal_tta: bool,
    pub metrics: EvalReport,
    pub per_frame_miou: Vec<Option<f64>>,
    /// Frame-averaged loss terms.
    pub losses: BTreeMap<String, f64>,
    pub total_loss: f64,
    /// SHA-256 of every frame's probabilities (f64 little-endian).
    pub prediction_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: &'static str,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
}

impl TimingReport {
    pub fn stage_sum(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }
}

pub const STAGES: [&str; 9] = [
    "scene",
    "encoder",
    "forward_vtm",
    "backward_vtm",
    "head",
    "flip_tta",
    "temporal_tta",
    "losses",
    "metrics",
];

/// Chained checkpoints: each lap charges the time since the previous lap,
/// so the stages partition the wall-clock total.
struct Stopwatch {
    start: Instant,
    last: Instant,
    spent: BTreeMap<&'static str, Duration>,
}

impl Stopwatch {
    fn new() -> Self {
        let now = Instant::now();
        Self {
            start: now,
            last: now,
            spent: BTreeMap::new(),
        }
    }

    fn lap(&mut self, stage: &'static str) {
        let now = Instant::now();
        *self.spent.entry(stage).or_default() += now - self.last;
        self.last = now;
    }

    fn finish(self) -> TimingReport {
        let total = self.start.elapsed();
        TimingReport {
            stages: STAGES
                .iter()
                .map(|&stage| StageTiming {
                    stage,
                    seconds: self.spent.get(stage).map_or(0.0, Duration::as_secs_f64),
                })
                .collect(),
            total_seconds: total.as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub predictions: Vec<PredictionResult>,
    pub ground_truth: Vec<OccupancyGrid>,
    pub report: PipelineReport,
    pub timings: TimingReport,
}

/// Runs every frame of `scene`. With `oracle`, the model is replaced by
/// one-hot ground truth.
pub fn run_pipeline(scene: &SceneSpec, weights: &ModelWeights, cfg: &PipelineConfig, oracle: bool) -> Result<PipelineOutput> {
    cfg.validate()?;
    if !oracle {
        weights.check(&cfg.encoder)?;
    }
    let static_classes = cfg.static_class_ids()?;
    let grid = &cfg.grid;
    let mut sw = Stopwatch::new();

    let mut cm = ConfusionMatrix::default();
    let mut predictions = Vec::new();
    let mut gts = Vec::new();
    let mut per_frame_miou = Vec::new();
    let mut loss_sum = [0.0; 7];
    let mut history_volumes: Vec<(VoxelFeatureVolume, RigidTransform)> = Vec::new();
    let mut history_preds: Vec<TemporalRecord> = Vec::new();

    for frame in 0..scene.num_frames() {
        let inputs = frame_inputs(scene, grid, frame)?;
        sw.lap("scene");

        let (mut pred, views) = if oracle {
            (PredictionResult::one_hot(inputs.gt.labels()), None)
        } else {
            let views = encode_views(&inputs.images, weights, &cfg.encoder, false)?;
            sw.lap("encoder");
            let current = forward_and_backward(&views, &scene.rig, weights, cfg, &mut |s| sw.lap(s))?;
            let aligned: Vec<VoxelFeatureVolume> = history_volumes
                .iter()
                .rev()
                .take(cfg.history_frames)
                .map(|(vol, pose)| align_voxel_features(vol, &pose.inverse().compose(&inputs.ego_pose), grid))
                .collect();
            let with_history = fuse_history(&current, &aligned)?;
            let plain = head_in_frame(&with_history, weights, Flip::default())?;
            sw.lap("head");

            let pred = if cfg.flip_tta {
                let out = tta_flips(|flip| {
                    let vol = if flip.image_h {
                        let flipped = encode_views(&inputs.images, weights, &cfg.encoder, true)?;
                        fuse_history(&fused_volume(&flipped, &scene.rig, weights, cfg)?, &aligned)?
                    } else {
                        with_history.clone()
                    };
                    head_in_frame(&vol, weights, flip)
                })?;
                sw.lap("flip_tta");
                out
            } else {
                plain
            };
            history_volumes.push((current, inputs.ego_pose));
            (pred, Some(views))
        };

        if cfg.temporal_tta {
            let refined = temporal_tta(&pred, &history_preds, &inputs.ego_pose, grid, &static_classes, cfg.near_radius)?;
            history_preds.push(TemporalRecord {
                prediction: pred,
                ego_pose: inputs.ego_pose,
            });
            pred = refined;
            sw.lap("temporal_tta");
        }

        let mut terms = voxel_losses(&pred, &inputs.gt, grid)?;
        if let Some(views) = &views {
            let (mut d, mut s) = (0.0, 0.0);
            for (out, rendered) in views.iter().zip(&inputs.views) {
                let (depth_gt, label_gt) = sparse_targets(rendered, cfg.encoder.stride);
                d += depth_ce(&out.depth, &depth_gt, &cfg.bins)?;
                s += semantic2d_ce(&out.semantics, &label_gt)?;
            }
            terms.depth = d / views.len() as f64;
            terms.semantic2d = s / views.len() as f64;
        }
        for (acc, v) in loss_sum.iter_mut().zip(terms.as_array()) {
            *acc += v;
        }
        sw.lap("losses");

        let labels = decode(&pred);
        let mut frame_cm = ConfusionMatrix::default();
        frame_cm.accumulate(&labels, &inputs.gt, true)?;
        per_frame_miou.push(miou(&frame_cm.iou_per_class(), &semantic_classes()));
        cm.merge(&frame_cm);
        predictions.push(pred);
        gts.push(inputs.gt);
        sw.lap("metrics");
    }

    let n = predictions.len() as f64;
    let mean = loss_sum.map(|v| v / n);
    let terms = LossTerms {
        focal: mean[0],
        dice: mean[1],
        scal_geo: mean[2],
        scal_sem: mean[3],
        lovasz: mean[4],
        depth: mean[5],
        semantic2d: mean[6],
    };
    let breakdown = total_loss(&terms, &LossWeights::default());
    let report = PipelineReport {
        mode: if oracle { "oracle" } else { "model" },
        frames: predictions.len(),
        flip_tta: cfg.flip_tta && !oracle,
        temporal_tta: cfg.temporal_tta,
        metrics: EvalReport::from_confusion(&cm),
        per_frame_miou,
        losses: breakdown.terms,
        total_loss: breakdown.total,
        prediction_sha256: hash_f64(predictions.iter().flat_map(|p| p.probs.iter())),
    };
    sw.lap("metrics");
    Ok(PipelineOutput {
        predictions,
        ground_truth: gts,
        report,
        timings: sw.finish(),
    })
}

pub fn report_json(report: &PipelineReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}
