//! Minimal dense numeric layer.
//!
//! Everything runs in `f64`. Feature maps are rank-3 tensors laid out as
//! `(channels, height, width)` in row-major order.

mod conv;
mod gemm;
pub mod gradcheck;
mod ops;
mod optim;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvLayer};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport, TensorCheck};
pub use ops::{
    downsample2x, relu, relu_backward, resize_bilinear, resize_bilinear_backward, sigmoid,
    sigmoid_backward, silu, silu_backward,
};
pub use optim::{clip_gradients, sgd_step, GradStore, Parameterized};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidInput(format!(
                "tensor shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Wraps a single-channel `h x w` map as a `(1, h, w)` tensor.
    pub fn from_map(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![1, h, w], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::InvalidInput(format!(
                "expected a (channels, height, width) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Concatenates rank-3 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let (_, h, w) = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("nothing to concatenate".into()))?
            .dims3()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for part in parts {
            let (c, ph, pw) = part.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::InvalidInput(format!(
                    "cannot concatenate {ph}x{pw} features with {h}x{w} features"
                )));
            }
            channels += c;
            data.extend_from_slice(&part.data);
        }
        Tensor::new(vec![channels, h, w], data)
    }

    /// Splits a rank-3 tensor along the channel axis into pieces of the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Tensor>> {
        let (c, h, w) = self.dims3()?;
        if widths.iter().sum::<usize>() != c {
            return Err(Error::InvalidInput(format!(
                "channel split {widths:?} does not cover {c} channels"
            )));
        }
        let plane = h * w;
        let mut offset = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &wc in widths {
            let data = self.data[offset * plane..(offset + wc) * plane].to_vec();
            out.push(Tensor::new(vec![wc, h, w], data)?);
            offset += wc;
        }
        Ok(out)
    }

    fn ensure_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::InvalidInput(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn concat_then_split_recovers_parts() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[3, 2, 2]);
        let parts = cat.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(&[1, 2, 2]);
        let b = Tensor::zeros(&[1, 3, 2]);
        assert!(Tensor::concat_channels(&[&a, &b]).is_err());
    }
}
