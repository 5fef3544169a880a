//! Small reverse-mode differentiation engine over `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse. Trainable values live in a [`ParamStore`] and are bound
//! onto a tape per pass.

mod checkpoint;
pub mod gradcheck;
pub mod nn;
mod optim;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use optim::{sgd_step, ParamId, ParamStore, Parameter, SgdConfig};
pub use tape::{sigmoid, Gradients, Message, Tape, Var, PROB_EPS};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("attention head {head} of layer {layer} has zero norm")]
    ZeroNormHead { layer: usize, head: usize },
    #[error("label {0} is outside [0, 1]")]
    LabelOutOfRange(f64),
    #[error("parameter {0:?} has no gradient")]
    MissingGradient(String),
    #[error("empty input")]
    EmptyInput,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self, AutodiffError> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(mismatch(
                "tensor",
                format!("dims {dims:?} need {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: &[usize], v: f64) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![v; dims.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }

    /// Row-major matrix from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(mismatch("from_rows", "ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    /// Uniform values in `[-limit, limit]`.
    pub fn uniform(dims: &[usize], limit: f64, rng: &mut impl Rng) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-limit..=limit)).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    /// Rows and columns of a rank-2 tensor.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.dims[self.dims.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }
}
