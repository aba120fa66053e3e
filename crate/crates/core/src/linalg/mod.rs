//! Deterministic dense kernels: row-major matrices, Cholesky factorization
//! with rank-one downdates, and conjugate gradient.

mod cg;
mod cholesky;
mod matrix;

pub use cg::{conjugate_gradient_solve, CgSolution};
pub use cholesky::{CholeskyFactor, SYMMETRY_TOLERANCE};
pub use matrix::{axpy, dot, norm2, DenseMatrix};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("non-finite value in factorization input")]
    NonFiniteInput,
    #[error("matrix asymmetry {asymmetry:e} exceeds tolerance")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("factor is not lower triangular: nonzero at ({row}, {col})")]
    NotLowerTriangular { row: usize, col: usize },
    #[error("rank-one downdate loses positive definiteness at index {index}")]
    DowndateBreaksPD { index: usize },
    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {relative_residual:e})")]
    NotConverged {
        iterations: usize,
        relative_residual: f64,
        best_iterate: Vec<f64>,
    },
}
