//! Dense building blocks shared by the encoder and the occupancy head.
//!
//! Every kernel evaluates in a fixed order so outputs are bit-identical
//! regardless of the rayon pool size; parallelism is only ever across
//! independent output channels.

use ndarray::{s, Array1, Array2, Array3, Array4, Array5, ArrayView3, ArrayView4, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) fn check_shape(tensor: &str, expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            tensor: tensor.to_string(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}

/// Per-position linear map over the leading channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: Array2::eye(n),
            bias: Array1::zeros(n),
        }
    }

    pub fn random<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        let a = 1.0 / (inp as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((out, inp), || rng.random_range(-a..a)),
            bias: Array1::from_shape_simple_fn(out, || rng.random_range(-a..a)),
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn check(&self, name: &str, out: usize, inp: usize) -> Result<()> {
        check_shape(&format!("{name}.weight"), &[out, inp], self.weight.shape())?;
        check_shape(&format!("{name}.bias"), &[out], self.bias.shape())
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_features())
            .map(|o| {
                let mut acc = self.bias[o];
                for (i, xi) in x.iter().enumerate() {
                    acc += self.weight[(o, i)] * xi;
                }
                acc
            })
            .collect()
    }

    /// `(Cin, H, W) -> (Cout, H, W)`.
    pub fn apply_map(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let planes: Vec<Array2<f64>> = (0..self.out_features())
            .into_par_iter()
            .map(|o| {
                let mut plane = Array2::from_elem((h, w), self.bias[o]);
                for i in 0..self.in_features() {
                    plane.scaled_add(self.weight[(o, i)], &x.index_axis(Axis(0), i));
                }
                plane
            })
            .collect();
        stack_planes(&planes, (h, w))
    }

    /// `(Cin, X, Y, Z) -> (Cout, X, Y, Z)`.
    pub fn apply_volume(&self, x: ArrayView4<f64>) -> Array4<f64> {
        let (_, nx, ny, nz) = x.dim();
        let mut out = Array4::zeros((self.out_features(), nx, ny, nz));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(o, mut plane)| {
                plane.fill(self.bias[o]);
                for i in 0..self.in_features() {
                    plane.scaled_add(self.weight[(o, i)], &x.index_axis(Axis(0), i));
                }
            });
        out
    }
}

fn stack_planes(planes: &[Array2<f64>], (h, w): (usize, usize)) -> Array3<f64> {
    let mut out = Array3::zeros((planes.len(), h, w));
    for (o, p) in planes.iter().enumerate() {
        out.index_axis_mut(Axis(0), o).assign(p);
    }
    out
}

/// 3×3 convolution with zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(Cout, Cin, 3, 3)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array4::zeros((out, inp, 3, 3)),
            bias: Array1::zeros(out),
        }
    }

    pub fn random<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        let a = 1.0 / ((inp * 9) as f64).sqrt();
        Self {
            weight: Array4::from_shape_simple_fn((out, inp, 3, 3), || rng.random_range(-a..a)),
            bias: Array1::from_shape_simple_fn(out, || rng.random_range(-a..a)),
        }
    }

    pub fn check(&self, name: &str, out: usize, inp: usize) -> Result<()> {
        check_shape(&format!("{name}.weight"), &[out, inp, 3, 3], self.weight.shape())?;
        check_shape(&format!("{name}.bias"), &[out], self.bias.shape())
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        let cout = self.weight.dim().0;
        let planes: Vec<Array2<f64>> = (0..cout)
            .into_par_iter()
            .map(|o| {
                let mut plane = Array2::from_elem((h, w), self.bias[o]);
                for i in 0..cin {
                    let src = x.index_axis(Axis(0), i);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wt = self.weight[(o, i, ky, kx)];
                            if wt == 0.0 {
                                continue;
                            }
                            let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                            let (oy, sy) = shifted_ranges(h, dy);
                            let (ox, sx) = shifted_ranges(w, dx);
                            if oy.is_empty() || ox.is_empty() {
                                continue;
                            }
                            plane
                                .slice_mut(s![oy, ox])
                                .scaled_add(wt, &src.slice(s![sy, sx]));
                        }
                    }
                }
                plane
            })
            .collect();
        stack_planes(&planes, (h, w))
    }
}

/// 3×3×3 convolution with zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    /// `(Cout, Cin, 3, 3, 3)`
    pub weight: Array5<f64>,
    pub bias: Array1<f64>,
}

impl Conv3d {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array5::zeros((out, inp, 3, 3, 3)),
            bias: Array1::zeros(out),
        }
    }

    pub fn random<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        let a = 1.0 / ((inp * 27) as f64).sqrt();
        Self {
            weight: Array5::from_shape_simple_fn((out, inp, 3, 3, 3), || rng.random_range(-a..a)),
            bias: Array1::from_shape_simple_fn(out, || rng.random_range(-a..a)),
        }
    }

    pub fn check(&self, name: &str, out: usize, inp: usize) -> Result<()> {
        check_shape(&format!("{name}.weight"), &[out, inp, 3, 3, 3], self.weight.shape())?;
        check_shape(&format!("{name}.bias"), &[out], self.bias.shape())
    }

    /// Channels-last, zero-padded copy of the input so each output voxel is
    /// 27 contiguous `Cout × Cin` dot products.
    pub fn forward(&self, x: ArrayView4<f64>) -> Array4<f64> {
        let (cin, nx, ny, nz) = x.dim();
        let cout = self.weight.dim().0;
        let (py, pz) = (ny + 2, nz + 2);
        let mut padded = vec![0.0; (nx + 2) * py * pz * cin];
        for ((i, ix, iy, iz), &v) in x.indexed_iter() {
            padded[(((ix + 1) * py + iy + 1) * pz + iz + 1) * cin + i] = v;
        }
        // (tap, out, in)
        let mut taps = vec![0.0; 27 * cout * cin];
        for ((o, i, kx, ky, kz), &w) in self.weight.indexed_iter() {
            taps[((kx * 9 + ky * 3 + kz) * cout + o) * cin + i] = w;
        }
        let slabs: Vec<Vec<f64>> = (0..nx)
            .into_par_iter()
            .map(|ix| {
                let mut slab = vec![0.0; ny * nz * cout];
                for iy in 0..ny {
                    for iz in 0..nz {
                        let acc = &mut slab[(iy * nz + iz) * cout..][..cout];
                        acc.iter_mut().zip(&self.bias).for_each(|(a, b)| *a = *b);
                        for kx in 0..3 {
                            for ky in 0..3 {
                                for kz in 0..3 {
                                    let base = (((ix + kx) * py + iy + ky) * pz + iz + kz) * cin;
                                    let src = &padded[base..base + cin];
                                    let w = &taps[(kx * 9 + ky * 3 + kz) * cout * cin..][..cout * cin];
                                    for (a, row) in acc.iter_mut().zip(w.chunks_exact(cin)) {
                                        *a += row.iter().zip(src).map(|(w, s)| w * s).sum::<f64>();
                                    }
                                }
                            }
                        }
                    }
                }
                slab
            })
            .collect();
        let mut out = Array4::zeros((cout, nx, ny, nz));
        for (ix, slab) in slabs.into_iter().enumerate() {
            for iy in 0..ny {
                for iz in 0..nz {
                    for o in 0..cout {
                        out[(o, ix, iy, iz)] = slab[(iy * nz + iz) * cout + o];
                    }
                }
            }
        }
        out
    }
}

/// Output and source ranges for a tap at offset `d` along an axis of length `n`.
fn shifted_ranges(n: usize, d: isize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let n = n as isize;
    let lo = (-d).max(0);
    let hi = (n - d).min(n);
    if hi <= lo {
        return (0..0, 0..0);
    }
    (lo as usize..hi as usize, (lo + d) as usize..(hi + d) as usize)
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Numerically stable softmax over axis 0.
pub fn softmax_axis0<D: ndarray::Dimension + ndarray::RemoveAxis>(
    logits: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let max = logits.fold_axis(Axis(0), f64::NEG_INFINITY, |&m, &v| m.max(v));
    let mut out = logits.clone();
    for mut lane in out.axis_iter_mut(Axis(0)) {
        Zip::from(&mut lane).and(&max).for_each(|v, &m| *v = (*v - m).exp());
    }
    let sum = out.sum_axis(Axis(0));
    for mut lane in out.axis_iter_mut(Axis(0)) {
        Zip::from(&mut lane).and(&sum).for_each(|v, &s| *v /= s);
    }
    out
}

/// SHA-256 over the little-endian bytes of every value, in iteration order.
pub fn hash_f64<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
