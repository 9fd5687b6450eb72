//! Gumbel copula, `C(u, v) = exp(-((-ln u)^a + (-ln v)^a)^(1/a))` for `a >= 1`.

use crate::numeric::{log_add_exp, Real};

struct Parts<T> {
    lu: T,
    lv: T,
    /// `ln((-ln u)^a + (-ln v)^a)`
    ls: T,
}

fn parts<T: Real>(u: T, v: T, alpha: T) -> Parts<T> {
    let lu = -u.ln();
    let lv = -v.ln();
    let ls = log_add_exp(lu.ln() * alpha, lv.ln() * alpha);
    Parts { lu, lv, ls }
}

pub fn log_cdf<T: Real>(u: T, v: T, alpha: T) -> T {
    let p = parts(u, v, alpha);
    -(p.ls / alpha).exp()
}

pub fn log_h<T: Real>(u: T, v: T, alpha: T) -> T {
    let p = parts(u, v, alpha);
    let log_c = -(p.ls / alpha).exp();
    log_c + p.ls * (alpha.recip() - 1.0) + p.lv.ln() * (alpha - 1.0) + p.lv
}

pub fn log_density<T: Real>(u: T, v: T, alpha: T) -> T {
    let p = parts(u, v, alpha);
    let a = (p.ls / alpha).exp();
    -a + p.lu
        + p.lv
        + p.ls * (alpha.recip() * 2.0 - 2.0)
        + (p.lu.ln() + p.lv.ln()) * (alpha - 1.0)
        + ((alpha - 1.0) / a).ln_1p()
}

pub fn tau(alpha: f64) -> f64 {
    1.0 - 1.0 / alpha
}

pub fn alpha_from_tau(tau: f64) -> f64 {
    1.0 / (1.0 - tau)
}
