//! Dense tensors with a tape-based reverse-mode autodiff graph.
//!
//! Every trainable piece of the pipeline is written against [`Graph`]: a
//! forward pass appends nodes, [`Graph::backward`] walks them in reverse and
//! [`ParamStore::accumulate`] moves parameter gradients into the store where
//! the [`Adam`] optimizer picks them up.
//!
//! Tensors are row-major. Most operations treat a tensor as a matrix whose
//! column count is the last dimension and whose row count is the product of
//! the leading dimensions. The only broadcasting is along that leading row
//! dimension ([`Graph::add_row`], [`Graph::mul_col`]); anything else must be
//! reshaped explicitly.

mod gradcheck;
mod graph;
mod optim;
mod params;

pub use gradcheck::{grad_check, GradCheck};
pub use graph::{Gradients, Graph, Precision, Var};
pub use optim::{Adam, AdamState};
pub use params::{Checkpoint, Param, ParamId, ParamStore};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape must be a nonempty list of positive sizes, got {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a matrix; panics on a size mismatch, which is a programming error.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "matrix {rows}x{cols} from {} values",
            data.len()
        );
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::matrix(1, 1, vec![v])
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::matrix(1, n, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
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

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("nonempty shape")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
