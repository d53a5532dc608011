//! Forward view transformation: per-pixel depth distributions, lift to
//! frustum features and sum-splat into an ego-frame voxel volume.

use ndarray::{s, Array3, Array4, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, VoxelGridSpec};
use crate::nn::{relu_inplace, softmax_axis0, Conv2d, Linear};
use crate::NUM_CLASSES;

/// Uniform metric depth bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BinsJson", into = "BinsJson")]
pub struct DepthBinSpec {
    num_bins: usize,
    min_depth: f64,
    max_depth: f64,
}

#[derive(Serialize, Deserialize)]
struct BinsJson {
    num_bins: usize,
    min_depth: f64,
    max_depth: f64,
}

impl TryFrom<BinsJson> for DepthBinSpec {
    type Error = Error;
    fn try_from(b: BinsJson) -> Result<Self> {
        DepthBinSpec::new(b.num_bins, b.min_depth, b.max_depth)
    }
}

impl From<DepthBinSpec> for BinsJson {
    fn from(b: DepthBinSpec) -> Self {
        BinsJson {
            num_bins: b.num_bins,
            min_depth: b.min_depth,
            max_depth: b.max_depth,
        }
    }
}

impl Default for DepthBinSpec {
    /// 80 bins covering 2–42 m.
    fn default() -> Self {
        Self {
            num_bins: 80,
            min_depth: 2.0,
            max_depth: 42.0,
        }
    }
}

impl DepthBinSpec {
    pub fn new(num_bins: usize, min_depth: f64, max_depth: f64) -> Result<Self> {
        if num_bins < 2 {
            return Err(Error::invalid("depth bins", "need at least 2 bins"));
        }
        if !(min_depth.is_finite() && max_depth.is_finite() && max_depth > min_depth && min_depth >= 0.0) {
            return Err(Error::invalid("depth bins", "need finite 0 ≤ min_depth < max_depth"));
        }
        Ok(Self {
            num_bins,
            min_depth,
            max_depth,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn min_depth(&self) -> f64 {
        self.min_depth
    }

    pub fn max_depth(&self) -> f64 {
        self.max_depth
    }

    pub fn width(&self) -> f64 {
        (self.max_depth - self.min_depth) / self.num_bins as f64
    }

    /// `num_bins + 1` ascending edges; the last edge is exactly `max_depth`.
    pub fn edges(&self) -> Vec<f64> {
        (0..=self.num_bins)
            .map(|i| {
                if i == self.num_bins {
                    self.max_depth
                } else {
                    self.min_depth + i as f64 * self.width()
                }
            })
            .collect()
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.min_depth + (bin as f64 + 0.5) * self.width()
    }

    /// Half-open bin containing `depth`, `None` outside `[min, max)`.
    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        if !(depth >= self.min_depth && depth < self.max_depth) {
            return None;
        }
        let b = ((depth - self.min_depth) / self.width()).floor() as usize;
        Some(b.min(self.num_bins - 1))
    }
}

/// RGB image, `(3, H, W)`, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage(pub Array3<f64>);

impl RgbImage {
    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn flip_horizontal(&self) -> Self {
        RgbImage(self.0.slice(s![.., .., ..;-1]).to_owned())
    }
}

/// Downsampled features `(C, Hf, Wf)`; feature pixel `(h, w)` covers image
/// pixels `[h·stride, (h+1)·stride) × [w·stride, (w+1)·stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureMap {
    pub values: Array3<f64>,
    pub stride: usize,
}

impl ImageFeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }
}

/// Image-pixel coordinate of the center of feature cell `i`.
pub fn feature_to_image(i: usize, stride: usize) -> f64 {
    (i * stride) as f64 + (stride as f64 - 1.0) / 2.0
}

/// Inverse of [`feature_to_image`] on continuous coordinates.
pub fn image_to_feature(p: f64, stride: usize) -> f64 {
    (p - (stride as f64 - 1.0) / 2.0) / stride as f64
}

/// Per-pixel categorical over depth bins, `(D, Hf, Wf)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution {
    pub probs: Array3<f64>,
}

impl DepthDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("depth distribution", "probability outside [0, 1]"));
        }
        for s in self.probs.sum_axis(Axis(0)) {
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::invalid("depth distribution", format!("pixel sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.probs.dim().0
    }
}

/// Per-pixel semantic logits, `(18, Hf, Wf)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLogits2D {
    pub logits: Array3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_channels: usize,
    pub context_channels: usize,
    pub num_bins: usize,
    pub stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            context_channels: 32,
            num_bins: 80,
            stride: 16,
        }
    }
}

/// Stub image encoder: stride average pooling, three 3×3 conv + ReLU layers,
/// then 1×1 heads for context features, depth logits and semantic logits.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub convs: [Conv2d; 3],
    pub context: Linear,
    pub depth: Linear,
    pub semantic: Linear,
}

pub const ENCODER_CONVS: [&str; 3] = ["encoder.conv0", "encoder.conv1", "encoder.conv2"];

impl EncoderWeights {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let e = cfg.hidden_channels;
        Self {
            convs: [Conv2d::zeros(e, 3), Conv2d::zeros(e, e), Conv2d::zeros(e, e)],
            context: Linear::zeros(cfg.context_channels, e),
            depth: Linear::zeros(cfg.num_bins, e),
            semantic: Linear::zeros(NUM_CLASSES, e),
        }
    }

    pub fn random<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let e = cfg.hidden_channels;
        let convs = [
            Conv2d::random(e, 3, rng),
            Conv2d::random(e, e, rng),
            Conv2d::random(e, e, rng),
        ];
        Self {
            convs,
            context: Linear::random(cfg.context_channels, e, rng),
            depth: Linear::random(cfg.num_bins, e, rng),
            semantic: Linear::random(NUM_CLASSES, e, rng),
        }
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let e = cfg.hidden_channels;
        self.convs[0].check(ENCODER_CONVS[0], e, 3)?;
        self.convs[1].check(ENCODER_CONVS[1], e, e)?;
        self.convs[2].check(ENCODER_CONVS[2], e, e)?;
        self.context.check("encoder.context", cfg.context_channels, e)?;
        self.depth.check("encoder.depth", cfg.num_bins, e)?;
        self.semantic.check("encoder.semantic", NUM_CLASSES, e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub features: ImageFeatureMap,
    pub depth: DepthDistribution,
    pub semantics: SemanticLogits2D,
}

impl EncoderOutput {
    /// Mirrors every output along the feature-map width.
    pub fn flip_horizontal(&self) -> Self {
        let f = |a: &Array3<f64>| a.slice(s![.., .., ..;-1]).to_owned();
        Self {
            features: ImageFeatureMap {
                values: f(&self.features.values),
                stride: self.features.stride,
            },
            depth: DepthDistribution {
                probs: f(&self.depth.probs),
            },
            semantics: SemanticLogits2D {
                logits: f(&self.semantics.logits),
            },
        }
    }
}

fn average_pool(image: &RgbImage, stride: usize) -> Array3<f64> {
    let (c, h, w) = image.0.dim();
    let (hf, wf) = (h / stride, w / stride);
    let norm = 1.0 / (stride * stride) as f64;
    Array3::from_shape_fn((c, hf, wf), |(ch, y, x)| {
        image
            .0
            .slice(s![ch, y * stride..(y + 1) * stride, x * stride..(x + 1) * stride])
            .sum()
            * norm
    })
}

/// Deterministic encoder forward pass.
pub fn predict_depth_and_context(
    image: &RgbImage,
    weights: &EncoderWeights,
    cfg: &EncoderConfig,
) -> Result<EncoderOutput> {
    weights.check(cfg)?;
    let (c, h, w) = image.0.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch {
            tensor: "image".into(),
            expected: vec![3, h, w],
            actual: vec![c, h, w],
        });
    }
    if cfg.stride == 0 || h % cfg.stride != 0 || w % cfg.stride != 0 || h == 0 || w == 0 {
        return Err(Error::DimensionMismatch(format!(
            "image {h}×{w} is not a positive multiple of stride {}",
            cfg.stride
        )));
    }
    let mut x = average_pool(image, cfg.stride);
    for conv in &weights.convs {
        x = conv.forward(x.view());
        relu_inplace(&mut x);
    }
    let context = weights.context.apply_map(x.view());
    let depth_logits = weights.depth.apply_map(x.view());
    let semantics = weights.semantic.apply_map(x.view());
    Ok(EncoderOutput {
        features: ImageFeatureMap {
            values: context,
            stride: cfg.stride,
        },
        depth: DepthDistribution {
            probs: softmax_axis0(&depth_logits),
        },
        semantics: SemanticLogits2D { logits: semantics },
    })
}

/// Outer product of features and depth probabilities, `(C, D, Hf, Wf)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumFeatures {
    pub values: Array4<f64>,
    pub stride: usize,
}

pub fn lift(features: &ImageFeatureMap, depth: &DepthDistribution) -> Result<FrustumFeatures> {
    let (c, h, w) = features.values.dim();
    let (d, dh, dw) = depth.probs.dim();
    if (h, w) != (dh, dw) {
        return Err(Error::DimensionMismatch(format!(
            "features are {h}×{w} but depth distribution is {dh}×{dw}"
        )));
    }
    let values = Array4::from_shape_fn((c, d, h, w), |(ci, di, y, x)| {
        features.values[(ci, y, x)] * depth.probs[(di, y, x)]
    });
    Ok(FrustumFeatures {
        values,
        stride: features.stride,
    })
}

/// `(C, X, Y, Z)` feature volume aligned to a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatureVolume {
    pub values: Array4<f64>,
    pub grid: VoxelGridSpec,
}

impl VoxelFeatureVolume {
    pub fn zeros(channels: usize, grid: VoxelGridSpec) -> Self {
        let [x, y, z] = grid.shape();
        Self {
            values: Array4::zeros((channels, x, y, z)),
            grid,
        }
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn total(&self) -> f64 {
        self.values.sum()
    }
}

/// Sum-pools every frustum cell into the voxel containing its bin-center
/// unprojection. Cells are visited in `(d, h, w)` row-major order.
pub fn splat(
    frustum: &FrustumFeatures,
    cam: &CameraModel,
    bins: &DepthBinSpec,
    grid: &VoxelGridSpec,
) -> VoxelFeatureVolume {
    let (c, d, h, w) = frustum.values.dim();
    let mut vol = VoxelFeatureVolume::zeros(c, *grid);
    for di in 0..d {
        let depth = bins.center(di);
        for y in 0..h {
            let v = feature_to_image(y, frustum.stride);
            for x in 0..w {
                let u = feature_to_image(x, frustum.stride);
                let p = cam.unproject(u, v, depth);
                let Some([ix, iy, iz]) = grid.voxel_index(&p) else {
                    continue;
                };
                for ci in 0..c {
                    vol.values[(ci, ix, iy, iz)] += frustum.values[(ci, di, y, x)];
                }
            }
        }
    }
    vol
}

/// Splats per-camera encoder outputs and sums the volumes in rig order.
pub fn splat_views(
    views: &[EncoderOutput],
    rig: &[CameraModel],
    bins: &DepthBinSpec,
    grid: &VoxelGridSpec,
) -> Result<VoxelFeatureVolume> {
    if rig.is_empty() {
        return Err(Error::Empty("camera rig"));
    }
    if views.len() != rig.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} views for {} cameras",
            views.len(),
            rig.len()
        )));
    }
    let partials: Vec<VoxelFeatureVolume> = views
        .par_iter()
        .zip(rig.par_iter())
        .map(|(view, cam)| {
            let frustum = lift(&view.features, &view.depth)?;
            Ok(splat(&frustum, cam, bins, grid))
        })
        .collect::<Result<_>>()?;
    let mut iter = partials.into_iter();
    let mut total = iter.next().expect("non-empty rig");
    for p in iter {
        total.values += &p.values;
    }
    Ok(total)
}

/// Encoder, lift and splat for every camera; volumes summed in rig order.
pub fn multi_camera_forward(
    images: &[RgbImage],
    rig: &[CameraModel],
    weights: &EncoderWeights,
    cfg: &EncoderConfig,
    bins: &DepthBinSpec,
    grid: &VoxelGridSpec,
) -> Result<VoxelFeatureVolume> {
    if rig.is_empty() {
        return Err(Error::Empty("camera rig"));
    }
    if images.len() != rig.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} images for {} cameras",
            images.len(),
            rig.len()
        )));
    }
    let views: Vec<EncoderOutput> = images
        .par_iter()
        .map(|img| predict_depth_and_context(img, weights, cfg))
        .collect::<Result<_>>()?;
    splat_views(&views, rig, bins, grid)
}
