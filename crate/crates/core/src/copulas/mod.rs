//! Bivariate survival copulas: Clayton, Gumbel, Frank and Gaussian.
//!
//! Two layers are exposed. The validated public operations
//! ([`copula_cdf`], [`copula_density`], [`h_function`], [`h_inverse`], ...)
//! take plain `f64` and handle the boundary of the unit square exactly. The
//! generic evaluators on [`CopulaFamily`] work in log space on interior
//! points and accept any [`Real`], so likelihood code can differentiate
//! through them.
//!
//! Throughout, `h(u1 | u2) = ∂C(u1, u2)/∂u2`. All four families are
//! exchangeable, so `∂C/∂u1` is `h(u2 | u1)`.

pub mod clayton;
pub mod frank;
pub mod gaussian;
pub mod gumbel;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MeticError, Result};
use crate::numeric::Real;

/// Frank parameters closer to zero than this are the independence copula.
pub const FRANK_ZERO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopulaFamily {
    Clayton,
    Gumbel,
    Frank,
    Gaussian,
}

impl fmt::Display for CopulaFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CopulaFamily {
    type Err = MeticError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clayton" => Ok(Self::Clayton),
            "gumbel" => Ok(Self::Gumbel),
            "frank" => Ok(Self::Frank),
            "gaussian" | "normal" => Ok(Self::Gaussian),
            other => Err(MeticError::Config(format!("unknown copula family '{other}'"))),
        }
    }
}

impl CopulaFamily {
    pub const ALL: [CopulaFamily; 4] = [Self::Clayton, Self::Gumbel, Self::Frank, Self::Gaussian];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Clayton => "clayton",
            Self::Gumbel => "gumbel",
            Self::Frank => "frank",
            Self::Gaussian => "gaussian",
        }
    }

    pub fn domain(&self) -> &'static str {
        match self {
            Self::Clayton => "(0, inf)",
            Self::Gumbel => "[1, inf)",
            Self::Frank => "(-inf, inf)",
            Self::Gaussian => "(-1, 1)",
        }
    }

    pub fn check_alpha(&self, alpha: f64) -> Result<()> {
        let ok = alpha.is_finite()
            && match self {
                Self::Clayton => alpha > 0.0,
                Self::Gumbel => alpha >= 1.0,
                Self::Frank => true,
                Self::Gaussian => alpha.abs() < 1.0,
            };
        if ok {
            Ok(())
        } else {
            Err(MeticError::ParameterDomain {
                family: *self,
                alpha,
                domain: self.domain(),
            })
        }
    }

    /// Whether `alpha` gives exactly the independence copula.
    pub fn is_independence(&self, alpha: f64) -> bool {
        match self {
            Self::Clayton => false,
            Self::Gumbel => alpha == 1.0,
            Self::Frank => alpha.abs() < FRANK_ZERO,
            Self::Gaussian => alpha == 0.0,
        }
    }

    /// Canonical link mapping a linear predictor into the parameter domain.
    pub fn link<T: Real>(&self, x: T) -> T {
        match self {
            Self::Clayton => x.exp(),
            Self::Gumbel => x.exp() + 1.0,
            Self::Frank => x,
            Self::Gaussian => x.tanh(),
        }
    }

    pub fn link_derivative(&self, x: f64) -> f64 {
        match self {
            Self::Clayton | Self::Gumbel => x.exp(),
            Self::Frank => 1.0,
            Self::Gaussian => 1.0 - x.tanh().powi(2),
        }
    }

    pub fn link_inverse(&self, alpha: f64) -> Result<f64> {
        let out = match self {
            Self::Clayton => alpha.ln(),
            Self::Gumbel => (alpha - 1.0).ln(),
            Self::Frank => alpha,
            Self::Gaussian => alpha.atanh(),
        };
        if out.is_finite() {
            Ok(out)
        } else {
            Err(MeticError::ParameterDomain {
                family: *self,
                alpha,
                domain: self.domain(),
            })
        }
    }

    /// `ln C(u, v)` at interior points.
    pub fn log_cdf<T: Real>(&self, u: T, v: T, alpha: T) -> T {
        match self {
            Self::Clayton => clayton::log_cdf(u, v, alpha),
            Self::Gumbel => gumbel::log_cdf(u, v, alpha),
            Self::Frank => frank::log_cdf(u, v, alpha),
            Self::Gaussian => gaussian::log_cdf(u, v, alpha),
        }
    }

    /// `ln h(u | v)` at interior points.
    pub fn log_h<T: Real>(&self, u: T, v: T, alpha: T) -> T {
        match self {
            Self::Clayton => clayton::log_h(u, v, alpha),
            Self::Gumbel => gumbel::log_h(u, v, alpha),
            Self::Frank => frank::log_h(u, v, alpha),
            Self::Gaussian => gaussian::log_h(u, v, alpha),
        }
    }

    /// `h(u | v)` at interior points, clamped to `[0, 1]`.
    pub fn h<T: Real>(&self, u: T, v: T, alpha: T) -> T {
        let h = self.log_h(u, v, alpha).exp();
        if h.re() > 1.0 {
            T::from(1.0)
        } else {
            h
        }
    }

    /// `ln c(u, v)` at interior points.
    pub fn log_density<T: Real>(&self, u: T, v: T, alpha: T) -> T {
        match self {
            Self::Clayton => clayton::log_density(u, v, alpha),
            Self::Gumbel => gumbel::log_density(u, v, alpha),
            Self::Frank => frank::log_density(u, v, alpha),
            Self::Gaussian => gaussian::log_density(u, v, alpha),
        }
    }

    /// Solves `h(u | v) = p` for `u` without validating inputs.
    pub fn h_inverse_raw(&self, p: f64, v: f64, alpha: f64) -> Result<f64> {
        if self.is_independence(alpha) {
            return Ok(p);
        }
        let u = match self {
            Self::Clayton => clayton::h_inverse(p, v, alpha),
            Self::Frank => frank::h_inverse(p, v, alpha),
            Self::Gaussian => gaussian::h_inverse(p, v, alpha),
            Self::Gumbel => return invert_h_numeric(*self, p, v, alpha),
        };
        Ok(u.clamp(0.0, 1.0))
    }

    pub fn tau(&self, alpha: f64) -> f64 {
        match self {
            Self::Clayton => clayton::tau(alpha),
            Self::Gumbel => gumbel::tau(alpha),
            Self::Frank => frank::tau(alpha),
            Self::Gaussian => gaussian::tau(alpha),
        }
    }
}

/// Safeguarded Newton iteration on `x = ln u` for `h(e^x | v) = p`.
fn invert_h_numeric(family: CopulaFamily, p: f64, v: f64, alpha: f64) -> Result<f64> {
    let h = |x: f64| family.log_h(x.exp(), v, alpha).exp();
    let mut hi = 0.0;
    let mut lo = -1.0;
    while h(lo) > p {
        hi = lo;
        lo *= 2.0;
        if lo < -740.0 {
            return Ok(0.0);
        }
    }
    let mut x = 0.5 * (lo + hi);
    let mut r = h(x) - p;
    for _ in 0..200 {
        if r == 0.0 {
            break;
        }
        if r > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let u = x.exp();
        let slope = family.log_density(u, v, alpha).exp() * u;
        let newton = x - r / slope;
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(1e-300) || hi - lo <= 4.0 * f64::EPSILON * lo.abs() {
            x = next;
            r = h(x) - p;
            break;
        }
        x = next;
        r = h(x) - p;
    }
    if r.abs() > 1e-10 {
        return Err(MeticError::NoConvergence {
            what: "h-function inversion",
            residual: r,
        });
    }
    Ok(x.exp())
}

/// A copula family with a covariate-dependent parameter `alpha = g(gamma' w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaSpec {
    pub family: CopulaFamily,
    pub gamma: Vec<f64>,
}

impl CopulaSpec {
    pub fn new(family: CopulaFamily, gamma: Vec<f64>) -> Self {
        Self { family, gamma }
    }

    /// Spec with a constant parameter (intercept-only design).
    pub fn constant(family: CopulaFamily, alpha: f64) -> Result<Self> {
        family.check_alpha(alpha)?;
        Ok(Self::new(family, vec![family.link_inverse(alpha)?]))
    }

    pub fn linear_predictor(&self, w: &[f64]) -> f64 {
        self.gamma.iter().zip(w).map(|(g, x)| g * x).sum()
    }

    /// Parameter at covariate vector `w`; `w.len()` must equal `gamma.len()`.
    pub fn alpha(&self, w: &[f64]) -> f64 {
        debug_assert_eq!(w.len(), self.gamma.len());
        self.family.link(self.linear_predictor(w))
    }
}

fn check_prob(u: f64) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(MeticError::OutOfRange { value: u })
    }
}

fn check_interior(u: f64) -> Result<()> {
    check_prob(u)?;
    if u == 0.0 || u == 1.0 {
        Err(MeticError::Boundary { value: u })
    } else {
        Ok(())
    }
}

/// `C(u1, u2; alpha)` on the closed unit square.
pub fn copula_cdf(family: CopulaFamily, u1: f64, u2: f64, alpha: f64) -> Result<f64> {
    check_prob(u1)?;
    check_prob(u2)?;
    family.check_alpha(alpha)?;
    if u1 == 0.0 || u2 == 0.0 {
        return Ok(0.0);
    }
    if u1 == 1.0 {
        return Ok(u2);
    }
    if u2 == 1.0 {
        return Ok(u1);
    }
    if family.is_independence(alpha) {
        return Ok(u1 * u2);
    }
    let c = family.log_cdf(u1, u2, alpha).exp();
    Ok(c.clamp(0.0, u1.min(u2)))
}

/// Copula density `c(u1, u2; alpha)` on the open unit square.
pub fn copula_density(family: CopulaFamily, u1: f64, u2: f64, alpha: f64) -> Result<f64> {
    check_interior(u1)?;
    check_interior(u2)?;
    family.check_alpha(alpha)?;
    if family.is_independence(alpha) {
        return Ok(1.0);
    }
    Ok(family.log_density(u1, u2, alpha).exp())
}

/// Conditional distribution `h(u1 | u2) = ∂C(u1, u2)/∂u2`.
pub fn h_function(family: CopulaFamily, u1: f64, u2: f64, alpha: f64) -> Result<f64> {
    check_prob(u1)?;
    check_interior(u2)?;
    family.check_alpha(alpha)?;
    if u1 == 0.0 {
        return Ok(0.0);
    }
    if u1 == 1.0 {
        return Ok(1.0);
    }
    if family.is_independence(alpha) {
        return Ok(u1);
    }
    Ok(family.h(u1, u2, alpha))
}

/// Solves `h(u1 | u2) = p` for `u1`.
pub fn h_inverse(family: CopulaFamily, p: f64, u2: f64, alpha: f64) -> Result<f64> {
    check_interior(p)?;
    check_interior(u2)?;
    family.check_alpha(alpha)?;
    family.h_inverse_raw(p, u2, alpha)
}

pub fn link_eval(spec: &CopulaSpec, w: &[f64]) -> Result<f64> {
    if w.len() != spec.gamma.len() {
        return Err(MeticError::Dimension(format!(
            "covariate vector has {} entries, gamma has {}",
            w.len(),
            spec.gamma.len()
        )));
    }
    Ok(spec.alpha(w))
}

/// Kendall's tau implied by a parameter value.
pub fn tau_from_alpha(family: CopulaFamily, alpha: f64) -> Result<f64> {
    family.check_alpha(alpha)?;
    Ok(family.tau(alpha))
}

pub fn alpha_from_tau(family: CopulaFamily, tau: f64) -> Result<f64> {
    let attainable = match family {
        CopulaFamily::Clayton => tau > 0.0 && tau < 1.0,
        CopulaFamily::Gumbel => (0.0..1.0).contains(&tau),
        CopulaFamily::Frank | CopulaFamily::Gaussian => tau > -1.0 && tau < 1.0,
    };
    if !attainable {
        return Err(MeticError::UnattainableTau { family, tau });
    }
    Ok(match family {
        CopulaFamily::Clayton => clayton::alpha_from_tau(tau),
        CopulaFamily::Gumbel => gumbel::alpha_from_tau(tau),
        CopulaFamily::Frank => frank::alpha_from_tau(tau),
        CopulaFamily::Gaussian => gaussian::alpha_from_tau(tau),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{gradient, seed, special};

    const FAMILIES: [(CopulaFamily, f64); 5] = [
        (CopulaFamily::Clayton, 2.0),
        (CopulaFamily::Gumbel, 1.7),
        (CopulaFamily::Frank, 5.0),
        (CopulaFamily::Frank, -3.0),
        (CopulaFamily::Gaussian, -0.6),
    ];

    #[test]
    fn clayton_cdf_at_medians() {
        let c = copula_cdf(CopulaFamily::Clayton, 0.5, 0.5, 2.0).unwrap();
        assert!((c - 7f64.powf(-0.5)).abs() < 1e-15);
        assert_eq!(copula_cdf(CopulaFamily::Clayton, 1.0, 1.0, 4.67).unwrap(), 1.0);
    }

    #[test]
    fn boundary_values_are_exact() {
        for (fam, a) in FAMILIES {
            assert_eq!(copula_cdf(fam, 0.37, 1.0, a).unwrap(), 0.37);
            assert_eq!(copula_cdf(fam, 1.0, 0.37, a).unwrap(), 0.37);
            assert_eq!(copula_cdf(fam, 0.0, 0.5, a).unwrap(), 0.0);
        }
    }

    #[test]
    fn independence_limits() {
        let c = copula_cdf(CopulaFamily::Frank, 0.3, 0.5, 0.0).unwrap();
        assert!((c - 0.15).abs() < 1e-15);
        assert_eq!(copula_density(CopulaFamily::Frank, 0.2, 0.9, 0.0).unwrap(), 1.0);
        assert_eq!(copula_density(CopulaFamily::Gaussian, 0.2, 0.9, 0.0).unwrap(), 1.0);
        assert_eq!(h_function(CopulaFamily::Frank, 0.42, 0.1, 0.0).unwrap(), 0.42);
        assert_eq!(h_inverse(CopulaFamily::Frank, 0.42, 0.1, 0.0).unwrap(), 0.42);
    }

    #[test]
    fn frank_series_branch_is_continuous() {
        let fam = CopulaFamily::Frank;
        for &(u, v) in &[(0.2, 0.7), (0.9, 0.4)] {
            let lo: f64 = fam.log_density(u, v, 0.999e-6);
            let hi: f64 = fam.log_density(u, v, 1.001e-6);
            assert!((lo - hi).abs() < 1e-9);
            let lo: f64 = fam.log_h(u, v, 0.999e-6);
            let hi: f64 = fam.log_h(u, v, 1.001e-6);
            assert!((lo - hi).abs() < 1e-9);
        }
    }

    #[test]
    fn gaussian_h_at_medians() {
        let h = h_function(CopulaFamily::Gaussian, 0.5, 0.5, 0.8).unwrap();
        assert!((h - 0.5).abs() < 1e-15);
    }

    #[test]
    fn density_matches_mixed_difference() {
        let step = 1e-4;
        for (fam, a) in FAMILIES {
            let (u, v) = (0.5, 0.5);
            let c = |x: f64, y: f64| copula_cdf(fam, x, y, a).unwrap();
            let fd = (c(u + step, v + step) - c(u + step, v - step) - c(u - step, v + step)
                + c(u - step, v - step))
                / (4.0 * step * step);
            let d = copula_density(fam, u, v, a).unwrap();
            assert!((fd - d).abs() < 1e-6 * d.max(1.0), "{fam}: {fd} vs {d}");
        }
    }

    #[test]
    fn h_matches_partial_derivative() {
        let step = 1e-6;
        for (fam, a) in FAMILIES {
            let (u, v) = (0.3, 0.6);
            let fd = (copula_cdf(fam, u, v + step, a).unwrap()
                - copula_cdf(fam, u, v - step, a).unwrap())
                / (2.0 * step);
            let h = h_function(fam, u, v, a).unwrap();
            assert!((fd - h).abs() < 1e-6, "{fam}: {fd} vs {h}");
        }
    }

    #[test]
    fn clayton_inverse_matches_bisection() {
        let (fam, a) = (CopulaFamily::Clayton, 2.0);
        let (u, _) = special::bisect_increasing(
            |x| h_function(fam, x, 0.5, a).unwrap(),
            0.5,
            0.0,
            1.0,
            1e-15,
            1e-15,
        );
        let closed = h_inverse(fam, 0.5, 0.5, a).unwrap();
        assert!((u - closed).abs() < 1e-12);
    }

    #[test]
    fn inverse_roundtrips() {
        for (fam, a) in FAMILIES {
            let p = h_function(fam, 0.37, 0.62, a).unwrap();
            let u = h_inverse(fam, p, 0.62, a).unwrap();
            assert!((u - 0.37).abs() < 1e-8, "{fam}");
        }
    }

    #[test]
    fn link_examples() {
        let gumbel = CopulaSpec::new(CopulaFamily::Gumbel, vec![0.85, 1.0, 0.1]);
        let a = link_eval(&gumbel, &[1.0, 1.5, 0.0]).unwrap();
        assert!((a - (2.35f64.exp() + 1.0)).abs() < 1e-12);
        let frank = CopulaSpec::new(CopulaFamily::Frank, vec![1.86, 1.0, 1.0]);
        assert_eq!(link_eval(&frank, &[1.0, 0.0, 0.0]).unwrap(), 1.86);
        let gauss = CopulaSpec::new(CopulaFamily::Gaussian, vec![0.0]);
        assert_eq!(link_eval(&gauss, &[1.0]).unwrap(), 0.0);
        assert!(link_eval(&gauss, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tau_examples() {
        let t = tau_from_alpha(CopulaFamily::Clayton, 4.67).unwrap();
        assert!((t - 0.70015).abs() < 1e-5);
        assert_eq!(tau_from_alpha(CopulaFamily::Gumbel, 2.0).unwrap(), 0.5);
        let a = alpha_from_tau(CopulaFamily::Clayton, 0.7).unwrap();
        assert!((a - 14.0 / 3.0).abs() < 1e-12);
        assert!((alpha_from_tau(CopulaFamily::Gumbel, 0.5).unwrap() - 2.0).abs() < 1e-15);
        let a = alpha_from_tau(CopulaFamily::Frank, 0.3).unwrap();
        assert!((tau_from_alpha(CopulaFamily::Frank, a).unwrap() - 0.3).abs() < 1e-10);
        assert!(alpha_from_tau(CopulaFamily::Clayton, -0.1).is_err());
    }

    #[test]
    fn frank_tau_matches_double_integral() {
        // tau = 4 ∫∫ C c du dv - 1, by tensor Gauss-Legendre
        let a = 5.0;
        let rule = special::gauss_legendre_unit(80);
        let mut s = 0.0;
        for &(u, wu) in &rule {
            for &(v, wv) in &rule {
                let c = copula_cdf(CopulaFamily::Frank, u, v, a).unwrap();
                let d = copula_density(CopulaFamily::Frank, u, v, a).unwrap();
                s += wu * wv * c * d;
            }
        }
        let t = tau_from_alpha(CopulaFamily::Frank, a).unwrap();
        assert!((4.0 * s - 1.0 - t).abs() < 1e-8, "{} vs {t}", 4.0 * s - 1.0);
    }

    #[test]
    fn errors_name_the_family() {
        let e = copula_cdf(CopulaFamily::Clayton, 0.5, 0.5, -1.0).unwrap_err();
        assert!(e.to_string().contains("clayton"));
        assert!(matches!(
            copula_density(CopulaFamily::Gumbel, 0.0, 0.5, 2.0),
            Err(MeticError::Boundary { .. })
        ));
        assert!(matches!(
            h_function(CopulaFamily::Gumbel, 0.5, 1.0, 2.0),
            Err(MeticError::Boundary { .. })
        ));
    }

    #[test]
    fn dual_derivatives_match_finite_differences() {
        let step = 1e-6;
        for (fam, a) in FAMILIES {
            let (u, v) = (0.35, 0.8);
            let g = gradient(&fam.log_density(seed::<3>(u, 0), seed::<3>(v, 1), seed::<3>(a, 2)));
            let f = |u: f64, v: f64, a: f64| fam.log_density(u, v, a);
            let fd = [
                (f(u + step, v, a) - f(u - step, v, a)) / (2.0 * step),
                (f(u, v + step, a) - f(u, v - step, a)) / (2.0 * step),
                (f(u, v, a + step) - f(u, v, a - step)) / (2.0 * step),
            ];
            for k in 0..3 {
                assert!((g[k] - fd[k]).abs() < 1e-5 * fd[k].abs().max(1.0), "{fam} {k}");
            }
        }
    }
}
