use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use vine_metic::copulas::{
    alpha_from_tau, copula_cdf, copula_density, h_function, h_inverse, tau_from_alpha, CopulaFamily,
};

pub fn alpha_range(f: CopulaFamily) -> std::ops::Range<f64> {
    match f {
        CopulaFamily::Clayton => 0.05..15.0,
        CopulaFamily::Gumbel => 1.0..10.0,
        CopulaFamily::Frank => -20.0..20.0,
        CopulaFamily::Gaussian => -0.95..0.95,
    }
}

fn tau_range(f: CopulaFamily) -> std::ops::Range<f64> {
    match f {
        CopulaFamily::Clayton => 0.01..0.95,
        CopulaFamily::Gumbel => 0.0..0.95,
        CopulaFamily::Frank | CopulaFamily::Gaussian => -0.95..0.95,
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn ok(r: vine_metic::Result<f64>) -> Result<f64, TestCaseError> {
    r.map_err(|e| TestCaseError::fail(e.to_string()))
}

fn report<T: std::fmt::Debug>(name: &str, f: CopulaFamily, r: Result<(), proptest::test_runner::TestError<T>>) -> Result<(), String> {
    r.map_err(|e| format!("{f} {name}: {e}"))
}

pub fn boundaries(f: CopulaFamily, cases: u32) -> Result<(), String> {
    let r = runner(cases).run(&(alpha_range(f), 0.0..=1.0f64), |(a, u)| {
        prop_assert_eq!(ok(copula_cdf(f, u, 0.0, a))?, 0.0);
        prop_assert_eq!(ok(copula_cdf(f, 0.0, u, a))?, 0.0);
        prop_assert!((ok(copula_cdf(f, u, 1.0, a))? - u).abs() <= 1e-12);
        prop_assert!((ok(copula_cdf(f, 1.0, u, a))? - u).abs() <= 1e-12);
        Ok(())
    });
    report("boundary", f, r)
}

pub fn two_increasing(f: CopulaFamily, cases: u32) -> Result<(), String> {
    let s = (alpha_range(f), 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64);
    let r = runner(cases).run(&s, |(a, x1, x2, y1, y2)| {
        let (u, u2) = (x1.min(x2), x1.max(x2));
        let (v, v2) = (y1.min(y2), y1.max(y2));
        let c = |p: f64, q: f64| ok(copula_cdf(f, p, q, a));
        let vol = c(u2, v2)? - c(u2, v)? - c(u, v2)? + c(u, v)?;
        prop_assert!(vol >= -1e-12, "volume {}", vol);
        Ok(())
    });
    report("2-increasing", f, r)
}

pub fn h_monotone_and_inverse(f: CopulaFamily, cases: u32) -> Result<(), String> {
    let s = (alpha_range(f), 0.001..0.999f64, 0.001..0.999f64, 0.001..0.999f64);
    let r = runner(cases).run(&s, |(a, u1, u1b, u2)| {
        let (lo, hi) = (u1.min(u1b), u1.max(u1b));
        let hl = ok(h_function(f, lo, u2, a))?;
        let hh = ok(h_function(f, hi, u2, a))?;
        prop_assert!((0.0..=1.0).contains(&hl) && (0.0..=1.0).contains(&hh));
        prop_assert!(hh >= hl - 1e-12, "h not monotone: {} > {}", hl, hh);
        prop_assert_eq!(ok(h_function(f, 0.0, u2, a))?, 0.0);
        prop_assert_eq!(ok(h_function(f, 1.0, u2, a))?, 1.0);
        let p = ok(h_function(f, u1, u2, a))?;
        if p > 1e-10 && p < 1.0 - 1e-10 {
            let back = ok(h_inverse(f, p, u2, a))?;
            let again = ok(h_function(f, back, u2, a))?;
            prop_assert!((again - p).abs() <= 1e-12, "h(h_inverse({})) = {}", p, again);
            // du = dp / c(u1, u2): only well posed where the density is not tiny
            if ok(copula_density(f, u1, u2, a))? >= 1e-6 {
                prop_assert!((back - u1).abs() <= 1e-8, "h_inverse(h({})) = {}", u1, back);
            }
        }
        Ok(())
    });
    report("h-inverse", f, r)
}

pub fn density_matches_cdf(f: CopulaFamily, cases: u32) -> Result<(), String> {
    let s = (alpha_range(f), 0.05..0.95f64, 0.05..0.95f64);
    let r = runner(cases).run(&s, |(a, u, v)| {
        let c = |p: f64, q: f64| ok(copula_cdf(f, p, q, a));
        let mixed = |h: f64| -> Result<f64, TestCaseError> {
            Ok((c(u + h, v + h)? - c(u + h, v - h)? - c(u - h, v + h)? + c(u - h, v - h)?) / (4.0 * h * h))
        };
        // Richardson step on the 1e-4 central difference removes its O(h^2) error
        let fd = (4.0 * mixed(5e-5)? - mixed(1e-4)?) / 3.0;
        let d = ok(copula_density(f, u, v, a))?;
        prop_assert!((fd - d).abs() <= 1e-5 * d.max(1.0), "density {} vs fd {}", d, fd);
        Ok(())
    });
    report("density", f, r)
}

pub fn tau_roundtrip(f: CopulaFamily, cases: u32) -> Result<(), String> {
    let r = runner(cases).run(&(tau_range(f), 0.0..1.0f64), |(t, s)| {
        let a = ok(alpha_from_tau(f, t))?;
        let back = ok(tau_from_alpha(f, a))?;
        prop_assert!((back - t).abs() <= 1e-8, "tau {} -> alpha {} -> {}", t, a, back);
        if f != CopulaFamily::Gaussian {
            let lo = alpha_range(f).start;
            let a1 = lo + s * (a - lo).max(0.0);
            if a - a1 > 1e-6 {
                prop_assert!(ok(tau_from_alpha(f, a1))? < back, "tau not increasing below {}", a);
            }
        }
        Ok(())
    });
    report("tau", f, r)
}

pub fn all(f: CopulaFamily, cases: u32) -> Result<(), String> {
    boundaries(f, cases)?;
    two_increasing(f, cases)?;
    h_monotone_and_inverse(f, cases)?;
    density_matches_cdf(f, cases)?;
    tau_roundtrip(f, cases)
}
