//! Gaussian copula with correlation `r`, `C(u, v) = Φ₂(Φ⁻¹(u), Φ⁻¹(v); r)`.

use crate::numeric::{special, Real};

pub fn log_cdf<T: Real>(u: T, v: T, rho: T) -> T {
    T::bvn_cdf(u.norm_quantile(), v.norm_quantile(), rho).ln()
}

pub fn log_h<T: Real>(u: T, v: T, rho: T) -> T {
    let x = u.norm_quantile();
    let y = v.norm_quantile();
    let s = (-(rho * rho) + 1.0).sqrt();
    ((x - rho * y) / s).ln_norm_cdf()
}

pub fn log_density<T: Real>(u: T, v: T, rho: T) -> T {
    let x = u.norm_quantile();
    let y = v.norm_quantile();
    let s2 = -(rho * rho) + 1.0;
    let q = rho * rho * (x * x + y * y) - rho * x * y * 2.0;
    -(s2.ln() * 0.5) - q / (s2 * 2.0)
}

pub fn h_inverse(p: f64, v: f64, rho: f64) -> f64 {
    let y = special::norm_quantile(v);
    special::norm_cdf(special::norm_quantile(p) * (1.0 - rho * rho).sqrt() + rho * y)
}

pub fn tau(rho: f64) -> f64 {
    std::f64::consts::FRAC_2_PI * rho.asin()
}

pub fn alpha_from_tau(tau: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 * tau).sin()
}
