//! Vine-copula models for multivariate event times under informative
//! censoring.

pub mod copulas;
pub mod data;
pub mod error;
pub mod estimation;
pub mod likelihood;
pub mod marginals;
pub mod numeric;
pub mod optim;
pub mod simulation;
pub mod study;
pub mod vine;

pub use error::{MeticError, Result};
