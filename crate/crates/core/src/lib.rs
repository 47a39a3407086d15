//! Sparse high-dimensional portfolio estimation.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers that do not need the choice.

pub mod backtest;
pub mod cli;
pub mod data;
pub mod error;
pub mod factors;
pub mod linalg;
pub mod precision;
pub mod scalar;
pub mod simulate;
pub mod solver;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ReturnsPanel = data::ReturnsPanel<f64>;
pub type PrecisionEstimate = precision::PrecisionEstimate<f64>;
pub type WeightVector = weights::WeightVector<f64>;
pub type LassoFit = solver::LassoFit<f64>;
pub type FactorDecomposition = factors::FactorDecomposition<f64>;

pub type ReturnsPanelF32 = data::ReturnsPanel<f32>;
pub type PrecisionEstimateF32 = precision::PrecisionEstimate<f32>;
pub type WeightVectorF32 = weights::WeightVector<f32>;
