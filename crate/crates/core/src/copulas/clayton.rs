//! Clayton copula, `C(u, v) = (u^-a + v^-a - 1)^(-1/a)` for `a > 0`.

use crate::numeric::Real;

/// `ln(u^-a + v^-a - 1)` from `ln u`, `ln v`.
fn log_s<T: Real>(lu: T, lv: T, alpha: T) -> T {
    let a = -(alpha * lu);
    let b = -(alpha * lv);
    let m = if a.re() > b.re() { a } else { b };
    if m.re() > 1.0 {
        m + ((a - m).exp() + (b - m).exp() - (-m).exp()).ln()
    } else {
        (a.exp_m1() + b.exp_m1()).ln_1p()
    }
}

pub fn log_cdf<T: Real>(u: T, v: T, alpha: T) -> T {
    -(log_s(u.ln(), v.ln(), alpha) / alpha)
}

/// `ln ∂C/∂v`.
pub fn log_h<T: Real>(u: T, v: T, alpha: T) -> T {
    let lv = v.ln();
    let ls = log_s(u.ln(), lv, alpha);
    -(lv * (alpha + 1.0)) - ls * (alpha.recip() + 1.0)
}

pub fn log_density<T: Real>(u: T, v: T, alpha: T) -> T {
    let (lu, lv) = (u.ln(), v.ln());
    let ls = log_s(lu, lv, alpha);
    alpha.ln_1p() - (lu + lv) * (alpha + 1.0) - ls * (alpha.recip() + 2.0)
}

pub fn h_inverse(p: f64, v: f64, alpha: f64) -> f64 {
    let lv = v.ln();
    let l = p.ln() + (alpha + 1.0) * lv;
    let s = (-alpha / (alpha + 1.0) * l).exp() - (-alpha * lv).exp_m1();
    (-s.ln() / alpha).exp()
}

pub fn tau(alpha: f64) -> f64 {
    alpha / (alpha + 2.0)
}

pub fn alpha_from_tau(tau: f64) -> f64 {
    2.0 * tau / (1.0 - tau)
}
