//! Dense row-major tensors, a define-by-run reverse-mode tape, and Adam.
//!
//! Everything here runs in `f64`. The tape ([`Graph`]) is rebuilt on every
//! forward pass; parameters live in a [`ParamStore`] that outlives the tape and
//! receives gradients when [`Graph::backward`] runs.

mod gradcheck;
mod graph;
mod kernels;
mod store;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use graph::{Graph, LstmWeights, NodeId};
pub use kernels::{conv2d, conv_output_len, lstm_step, softmax, softmax_cross_entropy};
pub use store::{adam_step, AdamConfig, ParamId, ParamStore};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, found: impl ToString) -> TensorError {
    TensorError::Shape {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(shape_err("tensor", "positive dimensions", format!("{shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err("tensor", len, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}
