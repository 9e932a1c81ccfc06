//! Dense row-major f64 tensors — the substrate every module computes on.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A dense n-dimensional array of 64-bit floats with an optional gradient.
///
/// `data` is flat row-major; `grad`, when present, always has the same
/// number of elements as `data`. Tensors are plain values: the autodiff
/// tape snapshots them on registration and writes gradients back after
/// `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Build from flat data; fails if the element count does not match.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::from_vec",
                detail: alloc::format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A 0-d style scalar, stored as shape `[1]`.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init with the given standard deviation, drawn from `rng`.
    pub fn randn(shape: &[usize], std_dev: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std_dev).expect("std_dev must be finite and non-negative");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. The shape is fixed at construction.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    /// Builder-style `requires_grad` toggle for init code.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Install a gradient; must match the tensor's element count.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::set_grad",
                detail: alloc::format!(
                    "gradient has {} elements, tensor has {}",
                    grad.len(),
                    self.data.len()
                ),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// True iff every value is finite (the required steady state).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error out with the supplied op name if any value is non-finite.
    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }
}
