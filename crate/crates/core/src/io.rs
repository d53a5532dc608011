//! Model weights, ground truth and predictions as tensor containers.
//!
//! Weight tensors are stored as f64 under `<layer>.weight` / `<layer>.bias`.
//! Ground truth uses the Occ3D layout: `semantics` and `mask_camera`, both
//! u8 `(X, Y, Z)`. Predictions store `probs` as f64 `(18, X, Y, Z)`.

use ndarray::{Array, Array3, Array4, Dimension, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backward_vtm::BackwardLayerWeights;
use crate::container::{Tensor, TensorContainer, TensorData};
use crate::error::{Error, Result};
use crate::forward_vtm::{EncoderConfig, EncoderWeights, ENCODER_CONVS};
use crate::nn::{Conv2d, Conv3d, Linear};
use crate::occ_head::{HeadWeights, OccupancyGrid, PredictionResult};
use crate::NUM_CLASSES;

/// Every learned parameter of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub encoder: EncoderWeights,
    pub backward: BackwardLayerWeights,
    pub head: HeadWeights,
}

impl ModelWeights {
    /// Seeded initialization; encoder, backward layer and head are drawn in
    /// that order from one ChaCha8 stream.
    pub fn random(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.context_channels;
        let encoder = EncoderWeights::random(cfg, &mut rng);
        let backward = Linear::random(c, c, &mut rng);
        let head = HeadWeights::random(c, &mut rng);
        Self { encoder, backward, head }
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let c = cfg.context_channels;
        self.encoder.check(cfg)?;
        self.backward.check("backward.proj", c, c)?;
        self.head.check(c)
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut out = TensorContainer::new();
        for (conv, name) in self.encoder.convs.iter().zip(ENCODER_CONVS) {
            put_conv2d(&mut out, name, conv);
        }
        put_linear(&mut out, "encoder.context", &self.encoder.context);
        put_linear(&mut out, "encoder.depth", &self.encoder.depth);
        put_linear(&mut out, "encoder.semantic", &self.encoder.semantic);
        put_linear(&mut out, "backward.proj", &self.backward);
        put_conv3d(&mut out, "head.conv1", &self.head.conv1);
        put_conv3d(&mut out, "head.conv2", &self.head.conv2);
        put_linear(&mut out, "head.classifier", &self.head.classifier);
        out
    }

    /// Loads and shape-checks against `cfg`; errors name the tensor.
    pub fn from_container(c: &TensorContainer, cfg: &EncoderConfig) -> Result<Self> {
        let e = cfg.hidden_channels;
        let ch = cfg.context_channels;
        let conv_in = [3, e, e];
        let mut convs = Vec::with_capacity(3);
        for (name, inp) in ENCODER_CONVS.iter().zip(conv_in) {
            convs.push(Conv2d {
                weight: get_array(c, &format!("{name}.weight"), &[e, inp, 3, 3])?,
                bias: get_array(c, &format!("{name}.bias"), &[e])?,
            });
        }
        let convs: [Conv2d; 3] = convs.try_into().expect("three layers");
        let encoder = EncoderWeights {
            convs,
            context: get_linear(c, "encoder.context", ch, e)?,
            depth: get_linear(c, "encoder.depth", cfg.num_bins, e)?,
            semantic: get_linear(c, "encoder.semantic", NUM_CLASSES, e)?,
        };
        let conv3 = |name: &str| -> Result<Conv3d> {
            Ok(Conv3d {
                weight: get_array(c, &format!("{name}.weight"), &[ch, ch, 3, 3, 3])?,
                bias: get_array(c, &format!("{name}.bias"), &[ch])?,
            })
        };
        let head = HeadWeights {
            conv1: conv3("head.conv1")?,
            conv2: conv3("head.conv2")?,
            classifier: get_linear(c, "head.classifier", NUM_CLASSES, ch)?,
        };
        Ok(Self {
            encoder,
            backward: get_linear(c, "backward.proj", ch, ch)?,
            head,
        })
    }
}

fn put_f64<D: Dimension>(out: &mut TensorContainer, name: &str, a: &Array<f64, D>) {
    let t = Tensor::new(name, a.shape().to_vec(), TensorData::F64(a.iter().copied().collect()))
        .expect("array shape matches its data");
    out.insert(t);
}

fn put_linear(out: &mut TensorContainer, name: &str, l: &Linear) {
    put_f64(out, &format!("{name}.weight"), &l.weight);
    put_f64(out, &format!("{name}.bias"), &l.bias);
}

fn put_conv2d(out: &mut TensorContainer, name: &str, l: &Conv2d) {
    put_f64(out, &format!("{name}.weight"), &l.weight);
    put_f64(out, &format!("{name}.bias"), &l.bias);
}

fn put_conv3d(out: &mut TensorContainer, name: &str, l: &Conv3d) {
    put_f64(out, &format!("{name}.weight"), &l.weight);
    put_f64(out, &format!("{name}.bias"), &l.bias);
}

fn get_tensor<'a>(c: &'a TensorContainer, name: &str) -> Result<&'a Tensor> {
    c.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
}

/// Reads a tensor as f64 with the exact `expected` shape.
fn get_array<D: Dimension>(c: &TensorContainer, name: &str, expected: &[usize]) -> Result<Array<f64, D>> {
    let t = get_tensor(c, name)?;
    if t.shape != expected {
        return Err(Error::ShapeMismatch {
            tensor: name.to_string(),
            expected: expected.to_vec(),
            actual: t.shape.clone(),
        });
    }
    let values = t.data.to_f64();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("weights", format!("`{name}` contains non-finite values")));
    }
    Array::from_shape_vec(IxDyn(expected), values)
        .expect("shape checked")
        .into_dimensionality::<D>()
        .map_err(|_| Error::DimensionMismatch(format!("`{name}` has the wrong rank")))
}

fn get_linear(c: &TensorContainer, name: &str, out: usize, inp: usize) -> Result<Linear> {
    Ok(Linear {
        weight: get_array(c, &format!("{name}.weight"), &[out, inp])?,
        bias: get_array(c, &format!("{name}.bias"), &[out])?,
    })
}

fn u8_volume(c: &TensorContainer, name: &str) -> Result<Array3<u8>> {
    let t = get_tensor(c, name)?;
    let TensorData::U8(data) = &t.data else {
        return Err(Error::invalid("ground truth", format!("`{name}` must be u8, found {:?}", t.data.dtype())));
    };
    let &[x, y, z] = t.shape.as_slice() else {
        return Err(Error::DimensionMismatch(format!("`{name}` must be rank 3, shape {:?}", t.shape)));
    };
    Ok(Array3::from_shape_vec((x, y, z), data.clone()).expect("container validated element count"))
}

/// Reads Occ3D-style ground truth; labels are validated against [0, 17]
/// and mask values must be 0 or 1.
pub fn read_occ_gt(c: &TensorContainer) -> Result<OccupancyGrid> {
    let labels = u8_volume(c, "semantics")?;
    let mask = u8_volume(c, "mask_camera")?;
    if let Some(v) = mask.iter().find(|&&m| m > 1) {
        return Err(Error::invalid("ground truth", format!("mask_camera holds {v}, expected 0 or 1")));
    }
    OccupancyGrid::new(labels, mask.mapv(|m| m == 1))
}

pub fn occ_gt_to_container(gt: &OccupancyGrid) -> TensorContainer {
    let shape = gt.labels().shape().to_vec();
    let mut out = TensorContainer::new();
    let labels = gt.labels().iter().copied().collect();
    let mask = gt.camera_mask().iter().map(|&m| u8::from(m)).collect();
    out.insert(Tensor::new("semantics", shape.clone(), TensorData::U8(labels)).expect("shape matches"));
    out.insert(Tensor::new("mask_camera", shape, TensorData::U8(mask)).expect("shape matches"));
    out
}

/// Stores `probs` and, for convenience, the decoded `labels`.
pub fn prediction_to_container(pred: &PredictionResult) -> TensorContainer {
    let mut out = TensorContainer::new();
    put_f64(&mut out, "probs", &pred.probs);
    let labels = crate::occ_head::decode(pred);
    out.insert(
        Tensor::new("labels", labels.shape().to_vec(), TensorData::U8(labels.iter().copied().collect()))
            .expect("shape matches"),
    );
    out
}

/// Reads `probs` and checks the per-voxel simplex invariant.
pub fn prediction_from_container(c: &TensorContainer) -> Result<PredictionResult> {
    let t = get_tensor(c, "probs")?;
    if t.shape.len() != 4 || t.shape[0] != NUM_CLASSES {
        return Err(Error::ShapeMismatch {
            tensor: "probs".into(),
            expected: vec![NUM_CLASSES, 0, 0, 0],
            actual: t.shape.clone(),
        });
    }
    let probs: Array4<f64> = get_array(c, "probs", &t.shape.clone())?;
    let pred = PredictionResult { probs };
    pred.validate()?;
    Ok(pred)
}
