//! Minimal differentiable numerics.
//!
//! Values live in [`Tensor`]s (row-major `f64`). Differentiable computation is
//! recorded on a [`Graph`] tape and differentiated in reverse with
//! [`Graph::backward`]. Every op on the tape can be checked against central
//! finite differences with [`check_gradients`].

mod gradcheck;
mod graph;
pub mod nn;

pub use gradcheck::{check_gradients, GradReport};
pub use graph::{BackwardFn, Grads, Graph, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    Shape { shape: Vec<usize>, len: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

/// A dense row-major tensor of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || expected != data.len() {
            return Err(TensorError::Shape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: shape must have positive dims")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: shape must have positive dims")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            if r.len() != d {
                return Err(TensorError::Dimension {
                    op: "from_rows",
                    axis: 1,
                    expected: d,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(&[n, d], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    /// Leading dimension when viewed as a matrix (`1` for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape, self.data.clone()).map(|t| t.with_requires_grad(self.requires_grad))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Geometric RoPE frequencies for `pairs_per_axis` rotation pairs.
pub fn rope_frequencies(pairs_per_axis: usize) -> Vec<f64> {
    (0..pairs_per_axis)
        .map(|i| 10000f64.powf(-(i as f64) / pairs_per_axis as f64))
        .collect()
}

/// Apply 2D rotary encoding to each row of `x` (no tape).
///
/// The first half of the rotation pairs turns with the x-coordinate, the
/// second half with the y-coordinate.
pub fn rope2d(x: &Tensor, pos: &[[f64; 2]]) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.rope2d(v, pos)?;
    Ok(g.value(out).clone())
}
