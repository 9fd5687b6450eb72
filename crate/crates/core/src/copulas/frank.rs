//! Frank copula, `C(u, v) = -ln(1 + (e^-au - 1)(e^-av - 1)/(e^-a - 1))/a`.
//!
//! Near `a = 0` the generator has a removable singularity; there the
//! first-order expansion `uv[1 + a(1-u)(1-v)/2]` is used instead.

use crate::numeric::{special, Real};

const SERIES_BELOW: f64 = 1e-6;

fn small<T: Real>(alpha: T) -> bool {
    alpha.re().abs() < SERIES_BELOW
}

/// `(a, b, d, q)` with `a = e^-au - 1`, `b = e^-av - 1`, `d = e^-a - 1` and
/// `q = d + ab`. When `e^-au`, `e^-av` are small next to `ab` and `d` (strong
/// dependence, upper corner) `q` is summed from the exponentials directly,
/// which avoids cancelling two terms of size one.
fn parts<T: Real>(u: T, v: T, alpha: T) -> (T, T, T, T) {
    let a = (-(alpha * u)).exp_m1();
    let b = (-(alpha * v)).exp_m1();
    let d = (-alpha).exp_m1();
    let x = a + 1.0;
    let y = b + 1.0;
    let ab = a * b;
    let q = if x.re().max(y.re()) < ab.re().abs().max(d.re().abs()) {
        (x * y + (-alpha).exp()) - (x + y)
    } else {
        d + ab
    };
    (a, b, d, q)
}

pub fn log_cdf<T: Real>(u: T, v: T, alpha: T) -> T {
    if small(alpha) {
        return u.ln() + v.ln() + (alpha * (-u + 1.0) * (-v + 1.0) * 0.5).ln_1p();
    }
    let (a, b, d, q) = parts(u, v, alpha);
    let r = a * b / d;
    let l = if r.re().abs() < 0.5 { r.ln_1p() } else { (q / d).ln() };
    (-(l / alpha)).ln()
}

pub fn log_h<T: Real>(u: T, v: T, alpha: T) -> T {
    if small(alpha) {
        return u.ln() + (alpha * (-u + 1.0) * (-(v * 2.0) + 1.0) * 0.5).ln_1p();
    }
    let (a, _, _, q) = parts(u, v, alpha);
    -(alpha * v) + (a / q).ln()
}

pub fn log_density<T: Real>(u: T, v: T, alpha: T) -> T {
    if small(alpha) {
        return (alpha * (-(u * 2.0) + 1.0) * (-(v * 2.0) + 1.0) * 0.5).ln_1p();
    }
    let (_, _, d, q) = parts(u, v, alpha);
    let q = if q.re() < 0.0 { -q } else { q };
    (-(alpha * d)).ln() - alpha * (u + v) - q.ln() * 2.0
}

pub fn h_inverse(p: f64, v: f64, alpha: f64) -> f64 {
    let b = (-alpha * v).exp_m1();
    let d = (-alpha).exp_m1();
    let ev = (-alpha * v).exp();
    let a = p * d / (ev - p * b);
    if a.abs() < 0.5 {
        return -a.ln_1p() / alpha;
    }
    // e^-au = ((1-p)e^-av + p e^-a) / ((1-p)e^-av + p), free of cancellation
    let q = 1.0 - p;
    -((q * ev + p * (-alpha).exp()).ln() - (q * ev + p).ln()) / alpha
}

pub fn tau(alpha: f64) -> f64 {
    if alpha.abs() < 1e-4 {
        return alpha / 9.0 - alpha.powi(3) / 900.0;
    }
    1.0 - 4.0 / alpha * (1.0 - special::debye1(alpha))
}

/// Inverse of [`tau`] by bisection; `tau(-a) = -tau(a)` reduces it to `a > 0`.
pub fn alpha_from_tau(target: f64) -> f64 {
    if target == 0.0 {
        return 0.0;
    }
    let t = target.abs();
    let mut hi = 8.0 / (1.0 - t) + 10.0;
    while tau(hi) < t {
        hi *= 2.0;
    }
    let (a, _) = special::bisect_increasing(tau, t, 0.0, hi, 1e-14 * hi, 1e-14);
    a.copysign(target)
}
