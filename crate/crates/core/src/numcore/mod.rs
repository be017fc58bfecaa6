//! Dense matrices, a recording tape for reverse-mode gradients, and a
//! finite-difference checker.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::{concat_rows, elementwise, matmul, relu, softmax_cols, Elementwise, Matrix};
pub use tape::{Gradients, NodeId, Tape};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch between {left_rows}x{left_cols} and {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("ragged rows: expected {expected} columns, found {found}")]
    RaggedRows { expected: usize, found: usize },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("backward needs a 1x1 output, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("row {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("sequence of length {len} is too short, need at least 2")]
    TooShort { len: usize },
    #[error("finite-difference step must be positive, got {0}")]
    StepSize(f64),
}

impl NumError {
    pub(crate) fn shape(op: &'static str, a: &Matrix, b: &Matrix) -> Self {
        NumError::Shape {
            op,
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        }
    }
}
