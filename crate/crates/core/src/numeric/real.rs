//! Scalar abstraction shared by plain `f64` evaluation and forward-mode
//! dual numbers.
//!
//! Likelihood code is written once against [`Real`]; instantiating it with
//! [`Grad<N>`] yields exact first derivatives with respect to up to `N`
//! seeded inputs.

use num_dual::{DualNum, DualSVec64, DualVec};

use super::special;

/// Dual number carrying a gradient with respect to `N` inputs.
pub type Grad<const N: usize> = DualSVec64<N>;

pub trait Real: DualNum<Primitive = f64> + Copy {
    fn cst(v: f64) -> Self {
        Self::from(v)
    }

    fn val(&self) -> f64 {
        self.re()
    }

    fn norm_cdf(self) -> Self;

    /// `ln Φ(x)`, accurate far into the lower tail.
    fn ln_norm_cdf(self) -> Self;

    fn norm_quantile(self) -> Self;

    /// `P(X <= x, Y <= y)` for standard normals with correlation `rho`.
    fn bvn_cdf(x: Self, y: Self, rho: Self) -> Self;
}

impl Real for f64 {
    fn norm_cdf(self) -> Self {
        special::norm_cdf(self)
    }

    fn ln_norm_cdf(self) -> Self {
        special::ln_norm_cdf(self)
    }

    fn norm_quantile(self) -> Self {
        special::norm_quantile(self)
    }

    fn bvn_cdf(x: Self, y: Self, rho: Self) -> Self {
        special::bvn_cdf(x, y, rho)
    }
}

impl<const N: usize> Real for Grad<N> {
    fn norm_cdf(self) -> Self {
        let x = self.re;
        DualVec::new(special::norm_cdf(x), &self.eps * special::norm_pdf(x))
    }

    fn ln_norm_cdf(self) -> Self {
        let x = self.re;
        let v = special::ln_norm_cdf(x);
        let ratio = (special::ln_norm_pdf(x) - v).exp();
        DualVec::new(v, &self.eps * ratio)
    }

    fn norm_quantile(self) -> Self {
        let q = special::norm_quantile(self.re);
        DualVec::new(q, &self.eps * (1.0 / special::norm_pdf(q)))
    }

    fn bvn_cdf(x: Self, y: Self, rho: Self) -> Self {
        let (a, b, r) = (x.re, y.re, rho.re);
        let value = special::bvn_cdf(a, b, r);
        let s = (1.0 - r * r).sqrt();
        let da = special::norm_pdf(a) * special::norm_cdf((b - r * a) / s);
        let db = special::norm_pdf(b) * special::norm_cdf((a - r * b) / s);
        let dr = special::bvn_pdf(a, b, r);
        DualVec::new(value, &x.eps * da + &y.eps * db + &rho.eps * dr)
    }
}

/// `ln(exp(a) + exp(b))` for any scalar type.
pub fn log_add_exp<T: Real>(a: T, b: T) -> T {
    let (m, o) = if a.re() >= b.re() { (a, b) } else { (b, a) };
    if o.re() == f64::NEG_INFINITY {
        return m;
    }
    m + (o - m).exp().ln_1p()
}

/// Seed variable `index` of an `N`-input gradient at value `v`.
pub fn seed<const N: usize>(v: f64, index: usize) -> Grad<N> {
    Grad::<N>::from_re(v).derivative(index)
}

/// Gradient part of a dual number as a plain array.
pub fn gradient<const N: usize>(x: &Grad<N>) -> [f64; N] {
    let mut out = [0.0; N];
    if let Some(m) = x.eps.0.as_ref() {
        for (o, v) in out.iter_mut().zip(m.iter()) {
            *o = *v;
        }
    }
    out
}
