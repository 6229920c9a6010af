//! Numeric kernel: dense SPD algebra, normal distribution functions,
//! empirical quantiles and reproducible random streams.

mod linalg;
mod normal;
mod quantile;
mod rng;

use thiserror::Error;

pub use linalg::{cholesky, dot, Cholesky, Matrix, SpdMatrix, PIVOT_TOL, SYMMETRY_TOL};
pub use normal::{norm_cdf, norm_pdf, norm_quantile};
pub use quantile::{empirical_quantile, quantile_sorted};
pub use rng::{mvnormal_draw, normal_draw, RandomStream};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric")]
    NotSymmetric,

    #[error("matrix is not positive semi-definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveSemiDefinite { index: usize, pivot: f64 },

    #[error("matrix is singular")]
    Singular,

    #[error("matrix has non-finite entries")]
    NonFinite,

    #[error("empty sample")]
    EmptySample,

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
