//! Numerical primitives shared by the rest of the crate.

mod matrix;
mod quadrature;
mod rng;

pub use matrix::{solve_linear, DenseMatrix, SINGULAR_PIVOT_RTOL};
pub use quadrature::{gauss_laguerre, QuadratureRule, MAX_LAGUERRE_ORDER};
pub use rng::{rng_substream, RngStream};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite matrix entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("singular matrix (smallest pivot {pivot:e})")]
    Singular { pivot: f64 },
    #[error("quadrature order {0} outside 1..=512")]
    QuadratureOrder(usize),
    #[error("no convergence: {0}")]
    Convergence(String),
}
