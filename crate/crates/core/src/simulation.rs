//! Data generators: the two simulation designs, generic vine sampling by
//! successive h-inversion, and right censoring by the terminal event.
//!
//! Every subject draws from its own ChaCha8 stream, so a dataset does not
//! depend on the order in which subjects are generated.

use std::collections::BTreeMap;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::copulas::{CopulaFamily, CopulaSpec};
use crate::data::MeticDataset;
use crate::error::{MeticError, Result};
use crate::numeric::clip_prob;
use crate::vine::{build_cvine, MarginCache, VineConfig, VineGraph};

/// RNG for one subject of a seeded run.
pub fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64);
    rng
}

fn open01(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(Open01)
}

/// Draws one vector `u` from uniforms `w`, consumed in sampling-plan order.
pub fn sample_vine_from_uniforms(
    graph: &VineGraph,
    plan: &[(usize, Vec<usize>)],
    params: &[Option<(CopulaFamily, f64)>],
    w: &[f64],
) -> Result<Vec<f64>> {
    if w.len() != plan.len() {
        return Err(MeticError::Dimension(format!(
            "{} uniforms for {} variables",
            w.len(),
            plan.len()
        )));
    }
    let mut u = vec![0.5; graph.n_vars()];
    for ((x, chain), &p0) in plan.iter().zip(w) {
        let mut p = p0;
        {
            let mut cache = MarginCache::new(graph, params, &u);
            for &e in chain.iter().rev() {
                let (fam, alpha) = cache.param(e)?;
                let label = graph
                    .label(e)
                    .ok_or_else(|| MeticError::InvalidVine(vec![format!("edge {e} has no label")]))?;
                let y = if label.conditioned.0 == *x {
                    label.conditioned.1
                } else {
                    label.conditioned.0
                };
                let v = clip_prob(cache.input(e, y)?);
                p = fam.h_inverse_raw(clip_prob(p), v, alpha)?;
            }
        }
        u[*x] = p;
    }
    Ok(u)
}

/// `n` draws from the vine at covariate vector `w`; rows are subjects.
pub fn sample_vine(
    graph: &VineGraph,
    specs: &BTreeMap<usize, CopulaSpec>,
    w: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let plan = graph.sampling_plan()?;
    let params = graph.edge_params(specs, w);
    (0..n)
        .map(|i| {
            let mut rng = subject_rng(seed, i);
            let w: Vec<f64> = (0..plan.len()).map(|_| open01(&mut rng)).collect();
            sample_vine_from_uniforms(graph, &plan, &params, &w)
        })
        .collect()
}

/// Observed data from latent times (`[subject][event]`, terminal last) and
/// per-subject censoring times: `X_J = T_J ∧ A`, `X_j = T_j ∧ X_J`.
pub fn apply_censoring(
    latent: &[Vec<f64>],
    censor: &[f64],
    z: Vec<Vec<f64>>,
    z_names: Vec<String>,
) -> Result<MeticDataset> {
    let jn = latent.first().map_or(0, Vec::len);
    if censor.len() != latent.len() {
        return Err(MeticError::Dimension("one censoring time per subject is required".into()));
    }
    let mut x = vec![Vec::with_capacity(latent.len()); jn];
    let mut d = vec![Vec::with_capacity(latent.len()); jn];
    for (t, &a) in latent.iter().zip(censor) {
        let tj = t[jn - 1];
        let xj = tj.min(a);
        for j in 0..jn - 1 {
            x[j].push(t[j].min(xj));
            d[j].push(t[j] <= xj);
        }
        x[jn - 1].push(xj);
        d[jn - 1].push(tj <= a);
    }
    MeticDataset::new(x, d, z, z_names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sim1Config {
    pub n: usize,
    pub seed: u64,
    pub zeta: [f64; 3],
    pub beta: [[f64; 2]; 3],
    pub gamma_13: [f64; 3],
    pub gamma_23: [f64; 3],
    pub gamma_12_3: [f64; 3],
    /// Administrative censoring `A ~ Unif(a, b)`.
    pub censor_range: (f64, f64),
    pub z1_range: (f64, f64),
    pub z2_prob: f64,
}

impl Default for Sim1Config {
    fn default() -> Self {
        Self {
            n: 500,
            seed: 1,
            zeta: [0.1, 0.4, -0.2],
            beta: [[2.0, 2.0]; 3],
            gamma_13: [0.85, 1.0, 0.1],
            gamma_23: [0.29, 0.1, 1.0],
            gamma_12_3: [1.86, 1.0, 1.0],
            censor_range: (1.0, 6.0),
            z1_range: (1.0, 2.0),
            z2_prob: 1.0 / 3.0,
        }
    }
}

impl Sim1Config {
    /// Vine with Gumbel (1,3), Clayton (2,3) and Frank (1,2|3) on `W = (1, Z1, Z2)`.
    pub fn vine(&self) -> Result<(VineGraph, BTreeMap<usize, CopulaSpec>)> {
        let graph = build_cvine(3)?;
        let specs = BTreeMap::from([
            (0, CopulaSpec::new(CopulaFamily::Gumbel, self.gamma_13.to_vec())),
            (1, CopulaSpec::new(CopulaFamily::Clayton, self.gamma_23.to_vec())),
            (2, CopulaSpec::new(CopulaFamily::Frank, self.gamma_12_3.to_vec())),
        ]);
        Ok((graph, specs))
    }
}

/// Generated data together with the latent quantities behind it.
#[derive(Debug, Clone)]
pub struct SimDraw {
    pub data: MeticDataset,
    /// Latent survival probabilities `[subject][event]`.
    pub latent_u: Vec<Vec<f64>>,
    /// Latent event times `[subject][event]`.
    pub latent_t: Vec<Vec<f64>>,
}

pub fn simulate_sim1(cfg: &Sim1Config) -> Result<MeticDataset> {
    Ok(simulate_sim1_draw(cfg)?.data)
}

/// Each event has `Λ_j(t) = e^{ζ_j} t` under PH, so
/// `T_j = exp(-ζ_j - β'Z + ln(-ln U_j))`. The terminal draw uses
/// `U_3 = 1 - ε`; the nonterminal `U`'s follow by h-inversion given `U_3`.
pub fn simulate_sim1_draw(cfg: &Sim1Config) -> Result<SimDraw> {
    let (graph, specs) = cfg.vine()?;
    let plan = graph.sampling_plan()?;
    let mut z = Vec::with_capacity(cfg.n);
    let mut latent_u = Vec::with_capacity(cfg.n);
    let mut latent_t = Vec::with_capacity(cfg.n);
    let mut censor = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = subject_rng(cfg.seed, i);
        let z1 = cfg.z1_range.0 + (cfg.z1_range.1 - cfg.z1_range.0) * open01(&mut rng);
        let z2 = if open01(&mut rng) < cfg.z2_prob { 1.0 } else { 0.0 };
        let a = cfg.censor_range.0 + (cfg.censor_range.1 - cfg.censor_range.0) * open01(&mut rng);
        let eps = open01(&mut rng);
        let w_plan = [1.0 - eps, open01(&mut rng), open01(&mut rng)];
        let params = graph.edge_params(&specs, &[1.0, z1, z2]);
        let u = sample_vine_from_uniforms(&graph, &plan, &params, &w_plan)?;
        let t: Vec<f64> = (0..3)
            .map(|j| {
                let lin = cfg.beta[j][0] * z1 + cfg.beta[j][1] * z2;
                if j == 2 {
                    (-cfg.zeta[j] - lin + (-(1.0 - eps).ln()).ln()).exp()
                } else {
                    (-cfg.zeta[j] - lin + (-u[j].ln()).ln()).exp()
                }
            })
            .collect();
        z.push(vec![z1, z2]);
        latent_u.push(u);
        latent_t.push(t);
        censor.push(a);
    }
    let data = apply_censoring(&latent_t, &censor, z, vec!["Z1".into(), "Z2".into()])?;
    Ok(SimDraw {
        data,
        latent_u,
        latent_t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sim2Config {
    pub n: usize,
    pub seed: u64,
    pub theta: f64,
    pub weibull_shape: f64,
    pub weibull_scales: [f64; 3],
    /// Mean of the exponential censoring time.
    pub censor_mean: f64,
}

impl Default for Sim2Config {
    fn default() -> Self {
        Self {
            n: 300,
            seed: 1,
            theta: 4.67,
            weibull_shape: 2.0,
            weibull_scales: [70.0, 60.0, 85.0],
            censor_mean: 350.0,
        }
    }
}

impl Sim2Config {
    /// Vine equivalent of the nested Clayton model: Clayton(θ) on both
    /// first-tree edges and Clayton(θ/(1+θ)) on (1,2|3).
    pub fn vine(&self) -> Result<(VineGraph, BTreeMap<usize, CopulaSpec>)> {
        if !(self.theta > 0.0) {
            return Err(MeticError::Config(format!("nested Clayton needs θ > 0, got {}", self.theta)));
        }
        let graph = build_cvine(3)?;
        let c = CopulaFamily::Clayton;
        let specs = BTreeMap::from([
            (0, CopulaSpec::constant(c, self.theta)?),
            (1, CopulaSpec::constant(c, self.theta)?),
            (2, CopulaSpec::constant(c, self.theta / (1.0 + self.theta))?),
        ]);
        Ok((graph, specs))
    }

    /// Weibull survival time at survival probability `u`.
    pub fn time_at(&self, j: usize, u: f64) -> f64 {
        self.weibull_scales[j] * (-u.ln()).powf(1.0 / self.weibull_shape)
    }

    /// Time at which `S_j = 0.5`.
    pub fn median(&self, j: usize) -> f64 {
        self.time_at(j, 0.5)
    }
}

pub fn simulate_nested_clayton(cfg: &Sim2Config) -> Result<MeticDataset> {
    Ok(simulate_nested_clayton_draw(cfg)?.data)
}

pub fn simulate_nested_clayton_draw(cfg: &Sim2Config) -> Result<SimDraw> {
    let (graph, specs) = cfg.vine()?;
    let plan = graph.sampling_plan()?;
    let params = graph.edge_params(&specs, &[1.0]);
    let mut latent_u = Vec::with_capacity(cfg.n);
    let mut latent_t = Vec::with_capacity(cfg.n);
    let mut censor = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = subject_rng(cfg.seed, i);
        let w: Vec<f64> = (0..3).map(|_| open01(&mut rng)).collect();
        let u = sample_vine_from_uniforms(&graph, &plan, &params, &w)?;
        let t: Vec<f64> = (0..3).map(|j| cfg.time_at(j, u[j])).collect();
        censor.push(-cfg.censor_mean * open01(&mut rng).ln());
        latent_u.push(u);
        latent_t.push(t);
    }
    let data = apply_censoring(&latent_t, &censor, vec![Vec::new(); cfg.n], Vec::new())?;
    Ok(SimDraw {
        data,
        latent_u,
        latent_t,
    })
}

/// Censoring scheme of the generic vine simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Censoring {
    None,
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
}

/// Generic simulator: a vine with constant parameters (`W` = intercept),
/// Weibull margins and independent censoring of the terminal event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VineSimConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    pub vine: VineConfig,
    /// `(shape, scale)` per event.
    pub weibull: Vec<(f64, f64)>,
    pub censoring: Censoring,
}

fn default_n() -> usize {
    500
}

pub fn simulate_vine(cfg: &VineSimConfig) -> Result<SimDraw> {
    let (graph, specs) = cfg.vine.build()?;
    let jn = graph.n_vars();
    if cfg.weibull.len() != jn {
        return Err(MeticError::Config(format!(
            "{} Weibull margins for a {jn}-variable vine",
            cfg.weibull.len()
        )));
    }
    if let Some(e) = (0..graph.n_edges()).find(|e| !specs.contains_key(e)) {
        return Err(MeticError::MissingEdge(graph.label_string(e)));
    }
    let plan = graph.sampling_plan()?;
    let params = graph.edge_params(&specs, &[1.0]);
    let mut latent_u = Vec::with_capacity(cfg.n);
    let mut latent_t = Vec::with_capacity(cfg.n);
    let mut censor = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = subject_rng(cfg.seed, i);
        let w: Vec<f64> = (0..jn).map(|_| open01(&mut rng)).collect();
        let u = sample_vine_from_uniforms(&graph, &plan, &params, &w)?;
        let t: Vec<f64> = u
            .iter()
            .zip(&cfg.weibull)
            .map(|(&uj, &(k, lam))| lam * (-uj.ln()).powf(1.0 / k))
            .collect();
        censor.push(match cfg.censoring {
            Censoring::None => f64::INFINITY,
            Censoring::Uniform { low, high } => low + (high - low) * open01(&mut rng),
            Censoring::Exponential { mean } => -mean * open01(&mut rng).ln(),
        });
        latent_u.push(u);
        latent_t.push(t);
    }
    let data = apply_censoring(&latent_t, &censor, vec![Vec::new(); cfg.n], Vec::new())?;
    Ok(SimDraw {
        data,
        latent_u,
        latent_t,
    })
}
