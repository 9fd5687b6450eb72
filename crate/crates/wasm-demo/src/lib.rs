//! Browser bindings for a few vine-metic operations. The plain functions
//! carry the logic; the `#[wasm_bindgen]` wrappers only convert errors.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use vine_metic::copulas::{alpha_from_tau, copula_density, tau_from_alpha, CopulaFamily};
use vine_metic::error::{MeticError, Result};
use vine_metic::estimation::{fit_all, FitConfig, ModelSpec, VarianceMethod};
use vine_metic::marginals::marginal_survival;
use vine_metic::simulation::{simulate_nested_clayton, Sim2Config};

fn family(name: &str) -> Result<CopulaFamily> {
    name.parse()
}

/// Copula parameter for a Kendall's tau.
pub fn alpha_for(name: &str, tau: f64) -> Result<f64> {
    alpha_from_tau(family(name)?, tau)
}

/// Kendall's tau of a copula parameter.
pub fn tau_for(name: &str, alpha: f64) -> Result<f64> {
    tau_from_alpha(family(name)?, alpha)
}

/// Log density on the cell midpoints of a `size × size` grid, row-major with
/// `u2` running down the rows from 1 to 0.
pub fn density_grid(name: &str, tau: f64, size: usize) -> Result<Vec<f64>> {
    let f = family(name)?;
    let alpha = alpha_from_tau(f, tau)?;
    let mid = |k: usize| (k as f64 + 0.5) / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let v = 1.0 - mid(r);
        for c in 0..size {
            out.push(copula_density(f, mid(c), v, alpha)?.ln());
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct FitSummary {
    pub n: usize,
    pub censoring: Vec<f64>,
    pub tau_true: f64,
    /// `(label, tau, se)` for the separately fitted first-tree edges.
    pub tau_edges: Vec<(String, f64, Option<f64>)>,
    pub tau_pooled: f64,
    /// Fitted `S_j` at the true medians of events 1 and 2.
    pub survival_at_median: Vec<f64>,
}

/// Simulates nested-Clayton data with Kendall's tau `tau` and fits the vine
/// with separate and pooled first-tree edges.
pub fn simulate_and_fit(n: usize, tau: f64, seed: u64) -> Result<FitSummary> {
    let theta = alpha_from_tau(CopulaFamily::Clayton, tau)?;
    let sim = Sim2Config { n, seed, theta, ..Sim2Config::default() };
    let data = simulate_nested_clayton(&sim)?;
    let model = ModelSpec::sim2();
    let cfg = FitConfig { variance: VarianceMethod::Sandwich, ..FitConfig::default() };
    let res = fit_all(&data, &model, &cfg)?;
    if let Some(f) = &res.failure {
        return Err(MeticError::Data(format!("stage {} ({}) failed: {}", f.stage, f.target, f.error)));
    }
    let mut tau_edges = Vec::new();
    for label in ["(1,3)", "(2,3)"] {
        let c = res.copula(label).ok_or_else(|| MeticError::MissingEdge(label.into()))?;
        let (t, se) = c.tau_at(&[1.0]);
        tau_edges.push((label.to_string(), t, se));
    }
    let models = res.models()?;
    let survival_at_median = (0..2).map(|j| marginal_survival(&models[j], sim.median(j), &[])).collect();
    let pooled = fit_all(&data, &model, &FitConfig { pooled: vec![vec![1, 2]], variance: VarianceMethod::None, ..cfg })?;
    let tau_pooled = pooled
        .copula("(1,3)")
        .ok_or_else(|| MeticError::MissingEdge("(1,3)".into()))?
        .tau_at(&[1.0])
        .0;
    Ok(FitSummary {
        n,
        censoring: data.censoring_rates(),
        tau_true: tau,
        tau_edges,
        tau_pooled,
        survival_at_median,
    })
}

fn js(e: MeticError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = alphaFor)]
pub fn alpha_for_js(family: &str, tau: f64) -> std::result::Result<f64, JsError> {
    alpha_for(family, tau).map_err(js)
}

#[wasm_bindgen(js_name = tauFor)]
pub fn tau_for_js(family: &str, alpha: f64) -> std::result::Result<f64, JsError> {
    tau_for(family, alpha).map_err(js)
}

#[wasm_bindgen(js_name = densityGrid)]
pub fn density_grid_js(family: &str, tau: f64, size: usize) -> std::result::Result<Vec<f64>, JsError> {
    density_grid(family, tau, size).map_err(js)
}

/// JSON-encoded [`FitSummary`].
#[wasm_bindgen(js_name = simulateAndFit)]
pub fn simulate_and_fit_js(n: usize, tau: f64, seed: u64) -> std::result::Result<String, JsError> {
    let s = simulate_and_fit(n, tau, seed).map_err(js)?;
    serde_json::to_string(&s).map_err(|e| JsError::new(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_alpha_roundtrip() {
        for f in ["clayton", "gumbel", "frank", "gaussian"] {
            let a = alpha_for(f, 0.4).unwrap();
            assert!((tau_for(f, a).unwrap() - 0.4).abs() < 1e-9, "{f}");
        }
        assert!(alpha_for("student", 0.4).is_err());
    }

    #[test]
    fn grid_integrates_to_one() {
        let g = density_grid("frank", 0.3, 100).unwrap();
        let mass: f64 = g.iter().map(|x| x.exp()).sum::<f64>() / 1e4;
        assert!((mass - 1.0).abs() < 1e-2, "{mass}");
    }

    #[test]
    fn fit_recovers_tau() {
        let s = simulate_and_fit(400, 0.5, 3).unwrap();
        for (_, t, se) in &s.tau_edges {
            assert!((t - 0.5).abs() < 4.0 * se.unwrap(), "{t}");
        }
        assert!((s.tau_pooled - 0.5).abs() < 0.1);
        assert_eq!(s.censoring.len(), 3);
    }
}
