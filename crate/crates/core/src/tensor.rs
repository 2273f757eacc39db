//! Dense containers shared by every stage of the pipeline.
//!
//! [`FeatureMap`] stores an `(H, W, C)` activation in row-major HWC order, so
//! the channel vector of a pixel is contiguous. Images are feature maps with
//! three channels. [`Tensor`] is the flat parameter container used for
//! everything that is trained or persisted.

use serde::{Deserialize, Serialize};

use crate::error::{CoralError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// An RGB image: a feature map with exactly three channels.
pub type ImageRgb = FeatureMap;

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(CoralError::ShapeMismatch(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.width + j) * self.channels + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[self.idx(i, j, c)]
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.width + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let start = (i * self.width + j) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> FeatureMap {
        if factor == 1 {
            return self.clone();
        }
        let mut out = FeatureMap::zeros(self.height * factor, self.width * factor, self.channels);
        for i in 0..out.height {
            for j in 0..out.width {
                let src = self.pixel(i / factor, j / factor);
                out.pixel_mut(i, j).copy_from_slice(src);
            }
        }
        out
    }

    /// Adjoint of [`upsample_nearest`](Self::upsample_nearest): sums each
    /// `factor x factor` block.
    pub fn upsample_nearest_adjoint(&self, factor: usize) -> FeatureMap {
        if factor == 1 {
            return self.clone();
        }
        let mut out = FeatureMap::zeros(self.height / factor, self.width / factor, self.channels);
        for i in 0..self.height {
            for j in 0..self.width {
                let src = self.pixel(i, j);
                let dst = out.pixel_mut(i / factor, j / factor);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
        out
    }
}

/// Flat `f64` tensor with an explicit row-major shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoralError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    /// Rounds every entry to the nearest `f32`, the precision of persisted
    /// blobs.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named access to every tensor of a parameter container, in a fixed order.
///
/// The order is part of the persistence format and of the optimizer state
/// layout; implementations must never reorder.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.round_to_f32();
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// `dst += scale * src`, tensor by tensor. Both must share a layout.
pub fn axpy_params<P: ParamTensors + ?Sized>(dst: &mut P, src: &P, scale: f64) {
    for (d, (_, s)) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        debug_assert_eq!(d.shape, s.shape);
        for (a, b) in d.data.iter_mut().zip(&s.data) {
            *a += scale * b;
        }
    }
}
