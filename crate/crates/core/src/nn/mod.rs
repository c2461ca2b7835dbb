//! Minimal CPU neural-network stack with explicit forward/backward passes.
//!
//! Everything runs in `f64` single-threaded so that runs are bit-reproducible
//! given a seed and analytic gradients can be validated against central finite
//! differences at tight tolerances. Convolutions go through im2col and the
//! matrixmultiply-backed `ndarray::dot`.

use ndarray::ArrayD;
use thiserror::Error;

pub mod adam;
pub mod checkpoint;
pub mod init;
pub mod layers;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d, Module, ParallelConcat,
    ReLU, Sequential,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named tensor state: parameters plus non-trainable buffers (BN running stats).
/// Used for checkpointing and best-epoch snapshots.
pub trait StateVisitor {
    fn visit(&mut self, name: &str, tensor: &mut ArrayD<f64>);
}

impl<F: FnMut(&str, &mut ArrayD<f64>)> StateVisitor for F {
    fn visit(&mut self, name: &str, tensor: &mut ArrayD<f64>) {
        self(name, tensor)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
