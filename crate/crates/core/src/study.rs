//! Replication studies for the two simulation designs: repeated
//! simulate-and-fit runs summarized by relative bias, relative empirical
//! and average standard errors, coverage and relative RMSE (all in %).

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeticError, Result};
use crate::estimation::{fit_all, tau_unconditional, FitConfig, FitResult, ModelSpec, VarianceMethod};
use crate::marginals::marginal_survival;
use crate::simulation::{simulate_nested_clayton, simulate_sim1, subject_rng, Sim1Config, Sim2Config};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Sim1,
    Sim2,
}

impl std::str::FromStr for Scenario {
    type Err = MeticError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sim1" => Ok(Self::Sim1),
            "sim2" => Ok(Self::Sim2),
            other => Err(MeticError::Config(format!("unknown scenario '{other}' (expected sim1 or sim2)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub fit: FitConfig,
    /// Monte Carlo draws behind each unconditional τ estimate.
    pub tau_samples: usize,
    pub sim1: Sim1Config,
    pub sim2: Sim2Config,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Sim1,
            n: 500,
            replications: 100,
            seed: 1,
            fit: FitConfig::default(),
            tau_samples: 20_000,
            sim1: Sim1Config::default(),
            sim2: Sim2Config::default(),
        }
    }
}

/// Seed of replicate `r`, independent of how replicates are scheduled.
pub fn replicate_seed(seed: u64, r: usize) -> u64 {
    subject_rng(seed, r).random()
}

/// One estimate of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub parameter: String,
    pub method: String,
    pub truth: f64,
    pub estimate: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub estimates: Vec<Estimate>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub method: String,
    pub truth: f64,
    pub mean: f64,
    pub rbias: f64,
    pub resd: f64,
    pub rase: Option<f64>,
    pub ecp: Option<f64>,
    pub rrmse: f64,
    /// Replicates that contributed.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: Scenario,
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub rows: Vec<SummaryRow>,
    pub records: Vec<ReplicateRecord>,
}

impl StudyReport {
    pub fn row(&self, parameter: &str, method: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.parameter == parameter && r.method == method)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["parameter", "method", "truth", "mean", "rBIAS", "rESD", "rASE", "ECP", "rRMSE", "count"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.1}"));
        for r in &self.rows {
            w.write_record([
                r.parameter.clone(),
                r.method.clone(),
                format!("{}", r.truth),
                format!("{:.6}", r.mean),
                format!("{:.1}", r.rbias),
                format!("{:.1}", r.resd),
                opt(r.rase),
                opt(r.ecp),
                format!("{:.1}", r.rrmse),
                r.count.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn validate(cfg: &StudyConfig) -> Result<()> {
    if cfg.replications < 10 {
        return Err(MeticError::Config(format!(
            "a replication study needs at least 10 replications, got {}",
            cfg.replications
        )));
    }
    if cfg.n < 10 {
        return Err(MeticError::Config(format!("sample size {} is too small", cfg.n)));
    }
    cfg.fit.validate()
}

/// Runs every replicate on `threads` workers and summarizes. Output does
/// not depend on the number of threads.
pub fn run_study(cfg: &StudyConfig, threads: usize) -> Result<StudyReport> {
    validate(cfg)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ReplicateRecord>>> = Mutex::new(vec![None; cfg.replications]);
    std::thread::scope(|s| {
        for _ in 0..threads.max(1) {
            s.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::Relaxed);
                if r >= cfg.replications {
                    break;
                }
                let rec = run_replicate(cfg, r);
                slots.lock().expect("no worker panics while holding the lock")[r] = Some(rec);
            });
        }
    });
    let records: Vec<ReplicateRecord> = slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every replicate ran"))
        .collect();
    let failures = records.iter().filter(|r| r.failure.is_some()).count();
    Ok(StudyReport {
        scenario: cfg.scenario,
        n: cfg.n,
        replications: cfg.replications,
        failures,
        rows: summarize(&records),
        records,
    })
}

pub fn run_replicate(cfg: &StudyConfig, r: usize) -> ReplicateRecord {
    let seed = replicate_seed(cfg.seed, r);
    let out = match cfg.scenario {
        Scenario::Sim1 => sim1_replicate(cfg, seed),
        Scenario::Sim2 => sim2_replicate(cfg, seed),
    };
    match out {
        Ok(estimates) => ReplicateRecord {
            replicate: r,
            seed,
            estimates,
            failure: None,
        },
        Err(e) => ReplicateRecord {
            replicate: r,
            seed,
            estimates: Vec::new(),
            failure: Some(e.to_string()),
        },
    }
}

fn completed(res: FitResult) -> Result<FitResult> {
    match res.failure {
        Some(f) => Err(MeticError::Optimization {
            stage: f.target,
            reason: f.error,
        }),
        None => Ok(res),
    }
}

/// Truth of every Sim-I parameter row, keyed like [`crate::estimation::ParameterRow`] names.
pub fn sim1_truth(c: &Sim1Config) -> BTreeMap<String, f64> {
    let cov = ["1", "Z1", "Z2"];
    let mut t = BTreeMap::new();
    for j in 0..3 {
        for (k, name) in cov[1..].iter().enumerate() {
            t.insert(format!("beta_{}[{name}]", j + 1), c.beta[j][k]);
        }
    }
    for (label, g) in [("(1,3)", c.gamma_13), ("(2,3)", c.gamma_23), ("(1,2|3)", c.gamma_12_3)] {
        for (k, name) in cov.iter().enumerate() {
            t.insert(format!("gamma_{label}[{name}]"), g[k]);
        }
    }
    t
}

fn sim1_replicate(cfg: &StudyConfig, seed: u64) -> Result<Vec<Estimate>> {
    let sim = Sim1Config {
        n: cfg.n,
        seed,
        ..cfg.sim1.clone()
    };
    let data = simulate_sim1(&sim)?;
    let res = completed(fit_all(&data, &ModelSpec::sim1(), &cfg.fit)?)?;
    let truth = sim1_truth(&sim);
    res.parameters
        .iter()
        .map(|p| {
            let t = truth
                .get(&p.name)
                .copied()
                .ok_or_else(|| MeticError::ModelMismatch(format!("no true value for {}", p.name)))?;
            Ok(Estimate {
                parameter: p.name.clone(),
                method: "Vine".into(),
                truth: t,
                estimate: p.estimate,
                se: p.se,
            })
        })
        .collect()
}

fn sim2_replicate(cfg: &StudyConfig, seed: u64) -> Result<Vec<Estimate>> {
    let sim = Sim2Config {
        n: cfg.n,
        seed,
        ..cfg.sim2.clone()
    };
    let data = simulate_nested_clayton(&sim)?;
    let model = ModelSpec::sim2();
    let tau_true = sim.theta / (sim.theta + 2.0);
    let fit_cfg = FitConfig {
        pooled: Vec::new(),
        ..cfg.fit.clone()
    };
    let mut out = Vec::new();
    for (method, pooled) in [("Vine", Vec::new()), ("pVine", vec![vec![1, 2]])] {
        let res = completed(fit_all(&data, &model, &FitConfig { pooled, ..fit_cfg.clone() })?)?;
        let est = |parameter: &str, method: String, truth: f64, (estimate, se): (f64, Option<f64>)| Estimate {
            parameter: parameter.into(),
            method,
            truth,
            estimate,
            se,
        };
        if method == "Vine" {
            for (label, m) in [("(1,3)", "Vine(1,3)"), ("(2,3)", "Vine(2,3)")] {
                let c = res.copula(label).ok_or_else(|| MeticError::MissingEdge(label.into()))?;
                out.push(est("tau_13", m.into(), tau_true, c.tau_at(&[1.0])));
            }
        } else {
            let c = res.copula("(1,3)").ok_or_else(|| MeticError::MissingEdge("(1,3)".into()))?;
            out.push(est("tau_13", method.into(), tau_true, c.tau_at(&[1.0])));
        }
        let (graph, specs) = res.vine()?;
        let t12 = tau_unconditional(&graph, &specs, &[1.0], cfg.tau_samples, cfg.seed)?;
        out.push(est("tau_12", method.into(), tau_true, (t12.tau, None)));
        let models = res.models()?;
        for j in 0..2 {
            let s = marginal_survival(&models[j], sim.median(j), &[]);
            out.push(est(&format!("S_{}(median)", j + 1), method.into(), 0.5, (s, None)));
        }
    }
    Ok(out)
}

/// Summary rows in first-seen order of `(parameter, method)`.
pub fn summarize(records: &[ReplicateRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&Estimate>> = BTreeMap::new();
    for rec in records {
        for e in &rec.estimates {
            let k = (e.parameter.clone(), e.method.clone());
            if !groups.contains_key(&k) {
                keys.push(k.clone());
            }
            groups.entry(k).or_default().push(e);
        }
    }
    keys.into_iter()
        .map(|k| {
            let es = &groups[&k];
            let m = es.len() as f64;
            let truth = es[0].truth;
            let scale = 100.0 / truth.abs();
            let mean = es.iter().map(|e| e.estimate).sum::<f64>() / m;
            let var = if es.len() > 1 {
                es.iter().map(|e| (e.estimate - mean).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            let mse = es.iter().map(|e| (e.estimate - truth).powi(2)).sum::<f64>() / m;
            let (rase, ecp) = if es.iter().all(|e| e.se.is_some()) {
                let ses: Vec<f64> = es.iter().map(|e| e.se.unwrap_or(f64::NAN)).collect();
                let covered = es
                    .iter()
                    .zip(&ses)
                    .filter(|(e, s)| (e.estimate - truth).abs() <= 1.96 * **s)
                    .count();
                (
                    Some(ses.iter().sum::<f64>() / m * scale),
                    Some(100.0 * covered as f64 / m),
                )
            } else {
                (None, None)
            };
            SummaryRow {
                parameter: k.0.clone(),
                method: k.1.clone(),
                truth,
                mean,
                rbias: (mean - truth) / truth * 100.0,
                resd: var.sqrt() * scale,
                rase,
                ecp,
                rrmse: mse.sqrt() * scale,
                count: es.len(),
            }
        })
        .collect()
}

/// Fit configuration used for Sim-II studies when no variance is needed.
pub fn point_estimates_only(fit: &FitConfig) -> FitConfig {
    FitConfig {
        variance: VarianceMethod::None,
        ..fit.clone()
    }
}
