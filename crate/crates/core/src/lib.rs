//! Location-encoder fusion models for geographically induced subpopulation
//! shift: coordinate featurizers with a residual embedding head, an
//! auxiliary domain-prediction loss, four fusion heads, group-robust
//! evaluation and embedding cluster maps.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod locenc;
pub mod math;
pub mod training;

pub use error::{Error, Result};
