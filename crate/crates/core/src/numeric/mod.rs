//! Numerical building blocks: special functions, quadrature rules and the
//! scalar type used for forward-mode differentiation.

pub mod real;
pub mod special;

pub use real::{gradient, log_add_exp, seed, Grad, Real};

/// Probabilities fed to copula densities are kept this far from 0 and 1.
pub const CLIP_EPS: f64 = 1e-10;

pub fn clip_prob(u: f64) -> f64 {
    u.clamp(CLIP_EPS, 1.0 - CLIP_EPS)
}
