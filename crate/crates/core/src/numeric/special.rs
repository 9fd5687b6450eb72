//! Special functions and scalar numerics used across the crate.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use libm::erfc;
use statrs::function::erf::erfc_inv;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn ln_norm_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.918_938_533_204_672_8
}

pub fn ln_norm_cdf(x: f64) -> f64 {
    if x > 3.0 {
        (-0.5 * erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else if x > -30.0 {
        (0.5 * erfc(-x * FRAC_1_SQRT_2)).ln()
    } else {
        let z2 = 1.0 / (x * x);
        ln_norm_pdf(x) - (-x).ln() + (1.0 - z2 + 3.0 * z2 * z2 - 15.0 * z2 * z2 * z2).ln()
    }
}

pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    // Two Halley steps polish the starting value to full precision.
    for _ in 0..2 {
        let e = if x > 0.0 {
            (1.0 - p) - 0.5 * erfc(x * FRAC_1_SQRT_2)
        } else {
            norm_cdf(x) - p
        };
        let u = e / norm_pdf(x);
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

/// Bivariate standard normal CDF `P(X <= x, Y <= y)` with correlation `rho`.
pub fn bvn_cdf(x: f64, y: f64, rho: f64) -> f64 {
    mv_norm::bvnd(-x, -y, rho).clamp(0.0, 1.0)
}

/// Bivariate standard normal density.
pub fn bvn_pdf(x: f64, y: f64, rho: f64) -> f64 {
    let s = 1.0 - rho * rho;
    (-(x * x - 2.0 * rho * x * y + y * y) / (2.0 * s)).exp() / (2.0 * PI * s.sqrt())
}

/// `ln(exp(a) + exp(b))` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Adaptive Gauss-Legendre quadrature on `[a, b]`: an interval is accepted
/// when its 10-point and split 10-point estimates agree to `rel_tol`.
pub fn adaptive_quad(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    fn gl10(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        const X: [f64; 5] = [
            0.148_874_338_981_631_2,
            0.433_395_394_129_247_2,
            0.679_409_568_299_024_4,
            0.865_063_366_688_984_5,
            0.973_906_528_517_171_7,
        ];
        const W: [f64; 5] = [
            0.295_524_224_714_752_9,
            0.269_266_719_309_996_4,
            0.219_086_362_515_982_0,
            0.149_451_349_150_580_6,
            0.066_671_344_308_688_1,
        ];
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let mut s = 0.0;
        for k in 0..5 {
            s += W[k] * (f(c - h * X[k]) + f(c + h * X[k]));
        }
        s * h
    }

    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let left = gl10(f, a, m);
        let right = gl10(f, m, b);
        let split = left + right;
        if depth == 0 || (split - whole).abs() <= tol.max(64.0 * f64::EPSILON * split.abs()) {
            return split;
        }
        recurse(f, a, m, left, 0.5 * tol, depth - 1) + recurse(f, m, b, right, 0.5 * tol, depth - 1)
    }

    if a == b {
        return 0.0;
    }
    let whole = gl10(f, a, b);
    recurse(f, a, b, whole, rel_tol * whole.abs(), 30)
}

/// First Debye function `D1(x) = (1/x) ∫_0^x t / (e^t - 1) dt`.
pub fn debye1(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    let integrand = |t: f64| {
        if t.abs() < 1e-12 {
            1.0 - 0.5 * t
        } else {
            t / t.exp_m1()
        }
    };
    adaptive_quad(&integrand, 0.0, x, 1e-12) / x
}

/// Root of an increasing function on `[lo, hi]` by bisection; stops when
/// the bracket shrinks below `x_tol` or the residual drops below `f_tol`.
pub fn bisect_increasing(
    f: impl Fn(f64) -> f64,
    target: f64,
    mut lo: f64,
    mut hi: f64,
    x_tol: f64,
    f_tol: f64,
) -> (f64, f64) {
    let mut mid = 0.5 * (lo + hi);
    let mut resid = f(mid) - target;
    for _ in 0..400 {
        if resid.abs() <= f_tol || (hi - lo) <= x_tol {
            break;
        }
        if resid > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        mid = 0.5 * (lo + hi);
        resid = f(mid) - target;
    }
    (mid, resid)
}

/// Gauss-Legendre nodes and weights mapped to `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let degree = std::num::NonZeroUsize::new(n.max(1)).expect("nonzero degree");
    gauss_quad::legendre::GaussLegendre::new(degree)
        .iter()
        .map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w))
        .collect()
}
