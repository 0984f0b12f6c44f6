//! Gradient buffers, plain SGD and global-norm gradient clipping.

use super::Tensor;
use crate::error::{Error, Result};

/// Anything that exposes a fixed, ordered list of learnable tensors.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Human-readable names, one per entry of [`Self::parameters`].
    fn parameter_names(&self) -> Vec<String> {
        (0..self.parameters().len())
            .map(|i| format!("param{i}"))
            .collect()
    }
}

/// One gradient buffer per learnable tensor, in [`Parameterized::parameters`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn zeros_like<P: Parameterized + ?Sized>(params: &P) -> Self {
        Self {
            grads: params
                .parameters()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
        }
    }

    pub fn from_tensors(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.grads[index]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    /// Adds `grad` into buffer `index`.
    pub fn accumulate(&mut self, index: usize, grad: &Tensor) -> Result<()> {
        self.grads[index].add_scaled(1.0, grad)
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// L2 norm over all buffers taken together.
    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.scale(factor);
        }
    }

    /// Checks that every buffer has the shape of the matching parameter.
    pub fn ensure_matches<P: Parameterized + ?Sized>(&self, params: &P) -> Result<()> {
        let ps = params.parameters();
        if ps.len() != self.grads.len() {
            return Err(Error::InvalidInput(format!(
                "{} gradient buffers for {} parameters",
                self.grads.len(),
                ps.len()
            )));
        }
        for (i, (p, g)) in ps.iter().zip(&self.grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::InvalidInput(format!(
                    "gradient {i} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}

/// `p <- p - lr * g` for every parameter, then clears the gradients.
///
/// Nothing is written if any gradient is non-finite.
pub fn sgd_step<P: Parameterized + ?Sized>(
    params: &mut P,
    grads: &mut GradStore,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    grads.ensure_matches(params)?;
    if let Some(i) = grads.grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "gradient buffer {i} contains non-finite values"
        )));
    }
    for (p, g) in params.parameters_mut().into_iter().zip(&grads.grads) {
        p.add_scaled(-lr, g)?;
    }
    grads.zero();
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
///
/// Returns the norm measured before clipping.
pub fn clip_gradients(grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0 && max_norm.is_finite()) {
        return Err(Error::Config(format!(
            "clip norm must be positive, got {max_norm}"
        )));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}
