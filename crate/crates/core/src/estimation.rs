//! Stage-wise pseudo maximum likelihood.
//!
//! Stage 1 fits the terminal margin, then each nonterminal margin jointly
//! with its first-tree copula (optionally pooling several first-tree edges
//! onto one parameter). Stage `k` fits the copulas of tree `k` one edge at a
//! time with every earlier estimate frozen.

mod stacked;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::copulas::{CopulaFamily, CopulaSpec};
use crate::data::{Design, MeticDataset};
use crate::error::{MeticError, Result};
use crate::likelihood::{
    EdgeLikelihood, IntegrationPolicy, MarginBlock, PairLikelihood, StageLikelihood,
    TerminalLikelihood,
};
use crate::marginals::{pseudo_observations, MarginalModel, TransformationG};
use crate::optim::{minimize, LbfgsConfig, OptimReport};
use crate::simulation::{sample_vine, subject_rng};
use crate::vine::{EdgeConfig, VineConfig, VineGraph, VineStructure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMethod {
    Sandwich,
    Bootstrap,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub rel_tol: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub integration: IntegrationPolicy,
    pub variance: VarianceMethod,
    /// Bootstrap replicates.
    pub bootstrap: usize,
    pub seed: u64,
    /// Groups of nonterminal events (1-based) whose first-tree edges share
    /// one copula parameter.
    pub pooled: Vec<Vec<usize>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            grad_tol: 1e-5,
            max_iter: 500,
            integration: IntegrationPolicy::default(),
            variance: VarianceMethod::Sandwich,
            bootstrap: 200,
            seed: 0,
            pooled: Vec::new(),
        }
    }
}

impl FitConfig {
    pub fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            rel_tol: self.rel_tol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.integration.validate()?;
        if self.variance == VarianceMethod::Bootstrap && self.bootstrap < 50 {
            return Err(MeticError::Config(format!(
                "bootstrap variance needs at least 50 replicates, got {}",
                self.bootstrap
            )));
        }
        Ok(())
    }
}

/// What to fit: vine families, per-event transformations and the designs
/// of the marginal (`L`) and copula (`W`) regressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Vine layout with one family per edge; any `gamma` given is ignored.
    pub vine: VineConfig,
    pub g: Vec<TransformationG>,
    pub l: Design,
    pub w: Design,
}

impl ModelSpec {
    /// The Simulation-I model: PH margins on `(Z1, Z2)`, Gumbel (1,3),
    /// Clayton (2,3), Frank (1,2|3), each on `(1, Z1, Z2)`.
    pub fn sim1() -> Self {
        let edge = |c: [usize; 2], d: Vec<usize>, family| EdgeConfig {
            conditioned: c,
            conditioning: d,
            family,
            gamma: Vec::new(),
        };
        Self {
            vine: VineConfig {
                j: 3,
                structure: VineStructure::Cvine,
                edges: vec![
                    edge([1, 3], vec![], CopulaFamily::Gumbel),
                    edge([2, 3], vec![], CopulaFamily::Clayton),
                    edge([1, 2], vec![3], CopulaFamily::Frank),
                ],
            },
            g: vec![TransformationG::Ph; 3],
            l: Design::columns(&["Z1", "Z2"]),
            w: Design::columns(&["1", "Z1", "Z2"]),
        }
    }

    /// The Simulation-II model: Clayton everywhere, no covariates.
    pub fn sim2() -> Self {
        let mut m = Self::sim1();
        for e in m.vine.edges.iter_mut() {
            e.family = CopulaFamily::Clayton;
        }
        m.l = Design::empty();
        m.w = Design::intercept();
        m
    }
}

/// One step of the stage schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// `terminal`, `pair`, `pooled` or `edge`.
    pub step: String,
    pub target: String,
    /// Earlier estimates this step plugs in.
    pub uses: Vec<String>,
    pub loglik: f64,
    pub n_params: usize,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub message: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginFit {
    /// 1-based event number.
    pub event: usize,
    pub g: TransformationG,
    pub beta: Vec<f64>,
    pub beta_names: Vec<String>,
    pub beta_cov: Option<Vec<Vec<f64>>>,
    pub jump_times: Vec<f64>,
    pub log_jumps: Vec<f64>,
    pub stage: usize,
}

impl MarginFit {
    pub fn model(&self) -> Result<MarginalModel> {
        MarginalModel::new(
            self.beta.clone(),
            self.jump_times.clone(),
            self.log_jumps.clone(),
            self.g,
        )
    }

    pub fn beta_se(&self) -> Option<Vec<f64>> {
        self.beta_cov.as_ref().map(|c| diag_se(c))
    }
}

/// Estimate of one copula parameter vector; pooled fits list several edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaFit {
    pub labels: Vec<String>,
    pub family: CopulaFamily,
    pub gamma: Vec<f64>,
    pub gamma_names: Vec<String>,
    pub gamma_cov: Option<Vec<Vec<f64>>>,
    pub stage: usize,
}

impl CopulaFit {
    pub fn spec(&self) -> CopulaSpec {
        CopulaSpec::new(self.family, self.gamma.clone())
    }

    pub fn gamma_se(&self) -> Option<Vec<f64>> {
        self.gamma_cov.as_ref().map(|c| diag_se(c))
    }

    /// Kendall's τ at design row `w`, with a delta-method standard error.
    pub fn tau_at(&self, w: &[f64]) -> (f64, Option<f64>) {
        let spec = self.spec();
        let x = spec.linear_predictor(w);
        let tau = self.family.tau(self.family.link(x));
        let h = 1e-6 * x.abs().max(1.0);
        let slope = (self.family.tau(self.family.link(x + h)) - self.family.tau(self.family.link(x - h))) / (2.0 * h);
        let se = self.gamma_cov.as_ref().map(|c| {
            let mut v = 0.0;
            for (a, wa) in w.iter().enumerate() {
                for (b, wb) in w.iter().enumerate() {
                    v += wa * c[a][b] * wb;
                }
            }
            slope.abs() * v.max(0.0).sqrt()
        });
        (tau, se)
    }
}

fn diag_se(c: &[Vec<f64>]) -> Vec<f64> {
    c.iter().enumerate().map(|(k, r)| r[k].max(0.0).sqrt()).collect()
}

/// Flat parameter table of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub name: String,
    pub stage: usize,
    pub estimate: f64,
    pub se: Option<f64>,
    pub method: VarianceMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: usize,
    pub target: String,
    pub error: String,
    /// Whether the failure was numerical (as opposed to a model/data problem).
    pub numeric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(rename = "J")]
    pub j: usize,
    pub n: usize,
    pub structure: VineStructure,
    pub l_design: Design,
    pub w_design: Design,
    /// Column means of the `W` design in the fitted data.
    pub w_mean: Vec<f64>,
    pub variance: VarianceMethod,
    pub margins: Vec<MarginFit>,
    pub copulas: Vec<CopulaFit>,
    pub stages: Vec<StageRecord>,
    pub parameters: Vec<ParameterRow>,
    pub failure: Option<StageFailure>,
}

impl FitResult {
    pub fn margin(&self, event: usize) -> Option<&MarginFit> {
        self.margins.iter().find(|m| m.event == event)
    }

    pub fn copula(&self, label: &str) -> Option<&CopulaFit> {
        self.copulas.iter().find(|c| c.labels.iter().any(|l| l == label))
    }

    /// Fitted marginal models ordered by event.
    pub fn models(&self) -> Result<Vec<MarginalModel>> {
        (1..=self.j)
            .map(|e| {
                self.margin(e)
                    .ok_or_else(|| MeticError::ModelMismatch(format!("no fitted margin for event {e}")))?
                    .model()
            })
            .collect()
    }

    /// Vine with the fitted copula parameters.
    pub fn vine_config(&self) -> Result<VineConfig> {
        let mut edges = Vec::new();
        for c in &self.copulas {
            for label in &c.labels {
                let (conditioned, conditioning) = parse_label(label)?;
                edges.push(EdgeConfig {
                    conditioned,
                    conditioning,
                    family: c.family,
                    gamma: c.gamma.clone(),
                });
            }
        }
        Ok(VineConfig {
            j: self.j,
            structure: self.structure,
            edges,
        })
    }

    pub fn vine(&self) -> Result<(VineGraph, BTreeMap<usize, CopulaSpec>)> {
        self.vine_config()?.build()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Parses a printed label such as `(1,2|3)`.
pub fn parse_label(s: &str) -> Result<([usize; 2], Vec<usize>)> {
    let bad = || MeticError::Config(format!("cannot parse edge label '{s}'"));
    let inner = s.trim().strip_prefix('(').and_then(|t| t.strip_suffix(')')).ok_or_else(bad)?;
    let (pair, cond) = match inner.split_once('|') {
        Some((p, c)) => (p, Some(c)),
        None => (inner, None),
    };
    let nums = |t: &str| -> Result<Vec<usize>> {
        t.split(',').map(|x| x.trim().parse::<usize>().map_err(|_| bad())).collect()
    };
    let p = nums(pair)?;
    if p.len() != 2 {
        return Err(bad());
    }
    let c = cond.map(nums).transpose()?.unwrap_or_default();
    Ok(([p[0], p[1]], c))
}

/// Inverse of the observed information `-∂²ℓ/∂θ²` (central differences of
/// the analytic gradient, symmetrized). Near-singular directions are
/// dropped, giving a pseudo-inverse and a warning.
pub(crate) fn inverse_information(lik: &dyn StageLikelihood, theta: &[f64]) -> Result<(DMatrix<f64>, Vec<String>)> {
    let p = theta.len();
    let mut hess = DMatrix::zeros(p, p);
    let mut x = theta.to_vec();
    for k in 0..p {
        let h = 1e-5 * theta[k].abs().max(1.0);
        x[k] = theta[k] + h;
        let up = lik.evaluate(&x, false)?.gradient;
        x[k] = theta[k] - h;
        let dn = lik.evaluate(&x, false)?.gradient;
        x[k] = theta[k];
        for r in 0..p {
            hess[(r, k)] = (up[r] - dn[r]) / (2.0 * h);
        }
    }
    let info = -(&hess + hess.transpose()) / 2.0;
    let mut warnings = Vec::new();
    let eig = SymmetricEigen::new(info);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-10 * top.max(f64::MIN_POSITIVE);
    let mut inv_vals = eig.eigenvalues.clone();
    let mut dropped = 0;
    for l in inv_vals.iter_mut() {
        if *l > tol {
            *l = 1.0 / *l;
        } else {
            *l = 0.0;
            dropped += 1;
        }
    }
    if dropped > 0 {
        warnings.push(format!(
            "information matrix is singular or indefinite ({dropped} of {p} eigenvalues dropped); pseudo-inverse used"
        ));
    }
    Ok((&eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose(), warnings))
}

/// Per-subject scores as a `p × n` matrix.
pub(crate) fn score_matrix(lik: &dyn StageLikelihood, theta: &[f64]) -> Result<DMatrix<f64>> {
    let scores = lik
        .evaluate(theta, true)?
        .scores
        .ok_or_else(|| MeticError::Variance("likelihood returned no scores".into()))?;
    Ok(DMatrix::from_fn(theta.len(), scores.len(), |r, i| scores[i][r]))
}

pub(crate) fn finite_cov(cov: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cov = (&cov + cov.transpose()) / 2.0;
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(MeticError::Variance("non-finite sandwich covariance".into()));
    }
    Ok(cov)
}

/// Stage-local sandwich covariance `Ī⁻¹ V̄ Ī⁻¹ / n`, with `Ī` the observed
/// information per subject and `V̄` the mean outer product of the scores.
/// Earlier-stage estimates are treated as known.
pub fn sandwich_variance(lik: &dyn StageLikelihood, theta: &[f64]) -> Result<(DMatrix<f64>, Vec<String>)> {
    let (inv, warnings) = inverse_information(lik, theta)?;
    let infl = &inv * score_matrix(lik, theta)?;
    Ok((finite_cov(&infl * infl.transpose())?, warnings))
}

/// Covariance of `fit` over `b` nonparametric bootstrap resamples of the
/// subjects. More than 10% failed replicates is an error.
pub fn bootstrap_variance<F>(data: &MeticDataset, b: usize, seed: u64, fit: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&MeticDataset) -> Result<Vec<f64>>,
{
    if b < 50 {
        return Err(MeticError::Config(format!("bootstrap needs at least 50 replicates, got {b}")));
    }
    let n = data.n();
    let mut draws: Vec<Vec<f64>> = Vec::with_capacity(b);
    let mut failures = 0;
    let mut last_err = String::new();
    for r in 0..b {
        let mut rng = subject_rng(seed, r);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        match fit(&data.subset(&idx)) {
            Ok(v) => draws.push(v),
            Err(e) => {
                failures += 1;
                last_err = e.to_string();
            }
        }
    }
    if failures * 10 > b {
        return Err(MeticError::Variance(format!(
            "{failures} of {b} bootstrap replicates failed (last: {last_err})"
        )));
    }
    let p = draws.first().map_or(0, Vec::len);
    if draws.iter().any(|d| d.len() != p) {
        return Err(MeticError::Variance("bootstrap replicates differ in dimension".into()));
    }
    let m = draws.len() as f64;
    let mean: Vec<f64> = (0..p).map(|k| draws.iter().map(|d| d[k]).sum::<f64>() / m).collect();
    let mut cov = vec![vec![0.0; p]; p];
    for d in &draws {
        for a in 0..p {
            for c in 0..p {
                cov[a][c] += (d[a] - mean[a]) * (d[c] - mean[c]) / (m - 1.0);
            }
        }
    }
    Ok(cov)
}

fn sub_block(cov: &DMatrix<f64>, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&a| idx.iter().map(|&b| cov[(a, b)]).collect()).collect()
}

struct StageOutcome {
    theta: Vec<f64>,
    loglik: f64,
    report: OptimReport,
    cov: Option<DMatrix<f64>>,
    warnings: Vec<String>,
}

/// Optimizer coordinates are `theta / scale`. Log-jumps get `sqrt(n)` so
/// their curvature in `-ℓ/n` is O(1) like the regression parameters.
fn stage_scales(blocks: &[&MarginBlock], n_tail: usize, n: usize) -> Vec<f64> {
    let mut s = Vec::new();
    for b in blocks {
        s.extend(std::iter::repeat_n(1.0, b.n_beta()));
        s.extend(std::iter::repeat_n((n as f64).sqrt(), b.n_params() - b.n_beta()));
    }
    s.extend(std::iter::repeat_n(1.0, n_tail));
    s
}

fn run_stage(lik: &dyn StageLikelihood, start: &[f64], scale: &[f64], cfg: &FitConfig, name: &str) -> Result<StageOutcome> {
    let n = lik.n_subjects().max(1) as f64;
    let x0: Vec<f64> = start.iter().zip(scale).map(|(t, s)| t / s).collect();
    let mut report = minimize(
        |x| {
            let theta: Vec<f64> = x.iter().zip(scale).map(|(v, s)| v * s).collect();
            let ev = lik.evaluate(&theta, false)?;
            Ok((-ev.value / n, ev.gradient.iter().zip(scale).map(|(g, s)| -g * s / n).collect()))
        },
        &x0,
        &cfg.lbfgs(),
    )
    .map_err(|e| MeticError::Optimization {
        stage: name.to_string(),
        reason: format!("objective cannot be evaluated at the start: {e}"),
    })?;
    for (v, s) in report.x.iter_mut().zip(scale) {
        *v *= s;
    }
    if !report.converged {
        return Err(MeticError::Optimization {
            stage: name.to_string(),
            reason: format!(
                "{} after {} iterations (gradient norm {:.3e}, last objective {:.6})",
                report.message, report.iterations, report.grad_norm, -report.value * n
            ),
        });
    }
    let (cov, warnings) = if cfg.variance == VarianceMethod::Sandwich {
        let (c, w) = sandwich_variance(lik, &report.x)?;
        (Some(c), w)
    } else {
        (None, Vec::new())
    };
    Ok(StageOutcome {
        theta: report.x.clone(),
        loglik: -report.value * n,
        report,
        cov,
        warnings,
    })
}

fn record(stage: usize, step: &str, target: String, uses: Vec<String>, out: &StageOutcome) -> StageRecord {
    StageRecord {
        stage,
        step: step.into(),
        target,
        uses,
        loglik: out.loglik,
        n_params: out.theta.len(),
        converged: out.report.converged,
        iterations: out.report.iterations,
        grad_norm: out.report.grad_norm,
        message: out.report.message.clone(),
        warnings: out.warnings.clone(),
    }
}

fn design_names(d: &Design) -> Vec<String> {
    d.0.clone()
}

fn margin_fit(event: usize, block: &MarginBlock, theta: &[f64], names: &[String], cov: Option<Vec<Vec<f64>>>, stage: usize) -> MarginFit {
    let p = block.n_beta();
    MarginFit {
        event,
        g: block.g,
        beta: theta[..p].to_vec(),
        beta_names: names.to_vec(),
        beta_cov: cov,
        jump_times: block.jump_times.clone(),
        log_jumps: theta[p..].to_vec(),
        stage,
    }
}

#[derive(Debug, Clone)]
pub struct TerminalFit {
    pub margin: MarginFit,
    pub record: StageRecord,
}

/// Stage 1, terminal margin: maximizes `Σ ℓ_J` over `β_J` and the log-jumps.
pub fn fit_terminal(data: &MeticDataset, g: TransformationG, l: &Design, cfg: &FitConfig) -> Result<TerminalFit> {
    let term = data.terminal();
    if !data.events(term).iter().any(|&d| d) {
        return Err(MeticError::Data("no observed terminal events".into()));
    }
    let lmat = data.design(l)?;
    let block = MarginBlock::from_data(data.times(term), data.events(term), lmat, g)?;
    let start = block.start(data.times(term));
    let scale = stage_scales(&[&block], 0, data.n());
    let lik = TerminalLikelihood::new(block);
    let target = format!("T{}", term + 1);
    let out = run_stage(&lik, &start, &scale, cfg, &target)?;
    let p = lik.block.n_beta();
    let cov = out.cov.as_ref().map(|c| sub_block(c, &(0..p).collect::<Vec<_>>()));
    Ok(TerminalFit {
        margin: margin_fit(term + 1, &lik.block, &out.theta, &design_names(l), cov, 1),
        record: record(1, "terminal", target, Vec::new(), &out),
    })
}

#[derive(Debug, Clone)]
pub struct PairFit {
    pub margins: Vec<MarginFit>,
    pub copula: CopulaFit,
    pub record: StageRecord,
}

fn start_gamma(family: CopulaFamily, w: &Design) -> Result<Vec<f64>> {
    let mut gamma = vec![0.0; w.len()];
    if let Some(k) = w.0.iter().position(|c| c == "1") {
        let alpha = crate::copulas::alpha_from_tau(family, 0.2)?;
        gamma[k] = family.link_inverse(alpha)?;
    }
    Ok(gamma)
}

/// Stage 1 for nonterminal events `js` (0-based) sharing one first-tree
/// copula with the terminal event. One event is the ordinary pairwise fit.
#[allow(clippy::too_many_arguments)]
pub fn fit_pair_pooled(
    js: &[usize],
    data: &MeticDataset,
    terminal: &MarginalModel,
    family: CopulaFamily,
    g: &[TransformationG],
    l: &Design,
    w: &Design,
    cfg: &FitConfig,
) -> Result<PairFit> {
    let term = data.terminal();
    if js.is_empty() || js.iter().any(|&j| j >= term) {
        return Err(MeticError::Config(format!("invalid nonterminal events {js:?}")));
    }
    if g.len() != js.len() {
        return Err(MeticError::Config("one transformation per pooled event is required".into()));
    }
    let lmat = data.design(l)?;
    let wmat = data.design(w)?;
    let u_term = pseudo_observations(std::slice::from_ref(terminal), &data.select_events(&[term]), &lmat)?
        .remove(0);
    let mut start = Vec::new();
    let mut blocks = Vec::new();
    for (&j, &gj) in js.iter().zip(g) {
        let b = MarginBlock::from_data(data.times(j), data.events(j), lmat.clone(), gj)?;
        start.extend(b.start(data.times(j)));
        blocks.push(b);
    }
    start.extend(start_gamma(family, w)?);
    let scale = stage_scales(&blocks.iter().collect::<Vec<_>>(), w.len(), data.n());
    let lik = PairLikelihood::new(blocks, family, wmat, u_term, data.events(term).to_vec())?;
    let labels: Vec<String> = js.iter().map(|j| format!("({},{})", j + 1, term + 1)).collect();
    let target = labels.join("+");
    let out = run_stage(&lik, &start, &scale, cfg, &target)?;
    let (off, g0) = lik.offsets();
    let margins = lik
        .blocks
        .iter()
        .zip(js)
        .zip(&off)
        .map(|((b, &j), &o)| {
            let idx: Vec<usize> = (o..o + b.n_beta()).collect();
            let cov = out.cov.as_ref().map(|c| sub_block(c, &idx));
            margin_fit(j + 1, b, &out.theta[o..o + b.n_params()], &design_names(l), cov, 1)
        })
        .collect();
    let gidx: Vec<usize> = (g0..out.theta.len()).collect();
    let copula = CopulaFit {
        labels,
        family,
        gamma: out.theta[g0..].to_vec(),
        gamma_names: design_names(w),
        gamma_cov: out.cov.as_ref().map(|c| sub_block(c, &gidx)),
        stage: 1,
    };
    let step = if js.len() > 1 { "pooled" } else { "pair" };
    Ok(PairFit {
        margins,
        copula,
        record: record(1, step, target, vec![format!("theta_{}", term + 1)], &out),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn fit_pair(
    j: usize,
    data: &MeticDataset,
    terminal: &MarginalModel,
    family: CopulaFamily,
    g: TransformationG,
    l: &Design,
    w: &Design,
    cfg: &FitConfig,
) -> Result<PairFit> {
    fit_pair_pooled(&[j], data, terminal, family, &[g], l, w, cfg)
}

#[derive(Debug, Clone)]
pub struct EdgeFit {
    pub copula: CopulaFit,
    pub record: StageRecord,
}

/// Stage `k` fit of edge `e` given fitted margins and ancestor copulas.
#[allow(clippy::too_many_arguments)]
pub fn fit_edge(
    graph: &VineGraph,
    e: usize,
    family: CopulaFamily,
    specs: &BTreeMap<usize, CopulaSpec>,
    models: &[MarginalModel],
    data: &MeticDataset,
    l: &Design,
    w: &Design,
    cfg: &FitConfig,
) -> Result<EdgeFit> {
    let anc = graph.ancestry(e);
    for a in anc.by_tree.iter().flatten() {
        if !specs.contains_key(a) {
            return Err(MeticError::MissingEdge(format!(
                "{} (ancestor of {} not fitted yet)",
                graph.label_string(*a),
                graph.label_string(e)
            )));
        }
    }
    let lmat = data.design(l)?;
    let wmat = data.design(w)?;
    let u = pseudo_observations(models, data, &lmat)?;
    let lik = EdgeLikelihood::new(graph, e, family, specs, &u, data, wmat, &cfg.integration)?;
    let start = start_gamma(family, w)?;
    let target = graph.label_string(e);
    let out = run_stage(&lik, &start, &vec![1.0; start.len()], cfg, &target)?;
    let mut uses: Vec<String> = anc.nodes.iter().map(|v| format!("U_{}", v + 1)).collect();
    let mut ancestors: Vec<usize> = anc.by_tree.iter().flatten().copied().collect();
    ancestors.sort_unstable();
    uses.extend(ancestors.iter().map(|&a| format!("gamma_{}", graph.label_string(a))));
    let stage = graph.edge(e).tree;
    let copula = CopulaFit {
        labels: vec![target.clone()],
        family,
        gamma: out.theta.clone(),
        gamma_names: design_names(w),
        gamma_cov: out.cov.as_ref().map(|c| sub_block(c, &(0..out.theta.len()).collect::<Vec<_>>())),
        stage,
    };
    Ok(EdgeFit {
        copula,
        record: record(stage, "edge", target, uses, &out),
    })
}

/// Checks a model against data and returns the graph with one family per edge.
pub fn check_model(data: &MeticDataset, model: &ModelSpec, cfg: &FitConfig) -> Result<(VineGraph, BTreeMap<usize, CopulaFamily>)> {
    cfg.validate()?;
    let jn = data.n_events();
    if model.vine.j != jn {
        return Err(MeticError::ModelMismatch(format!(
            "model has J = {} but the data have {jn} event columns ({})",
            model.vine.j,
            data.header()[..2 * jn].join(",")
        )));
    }
    if model.g.len() != jn {
        return Err(MeticError::ModelMismatch(format!(
            "{} transformations for {jn} events",
            model.g.len()
        )));
    }
    data.design(&model.l)?;
    data.design(&model.w)?;
    let (graph, specs) = model.vine.build()?;
    let mut families = BTreeMap::new();
    for e in 0..graph.n_edges() {
        let s = specs.get(&e).ok_or_else(|| MeticError::MissingEdge(graph.label_string(e)))?;
        families.insert(e, s.family);
    }
    let term = jn - 1;
    let mut seen = vec![false; term];
    for group in &cfg.pooled {
        if group.is_empty() {
            return Err(MeticError::Config("empty pooling group".into()));
        }
        let mut fams = Vec::new();
        for &j in group {
            if j == 0 || j > term {
                return Err(MeticError::Config(format!(
                    "pooling group {group:?}: event {j} is not a nonterminal event"
                )));
            }
            if std::mem::replace(&mut seen[j - 1], true) {
                return Err(MeticError::Config(format!("event {j} appears in two pooling groups")));
            }
            let e = first_tree_edge(&graph, j - 1)?;
            fams.push(families[&e]);
        }
        if fams.windows(2).any(|f| f[0] != f[1]) {
            return Err(MeticError::Config(format!(
                "pooling group {group:?} mixes copula families"
            )));
        }
    }
    Ok((graph, families))
}

fn first_tree_edge(graph: &VineGraph, j: usize) -> Result<usize> {
    graph
        .tree(1)
        .iter()
        .copied()
        .find(|&e| {
            let (a, b) = graph.edge(e).ends;
            a == j || b == j
        })
        .ok_or_else(|| MeticError::InvalidVine(vec![format!("variable {} has no first-tree edge", j + 1)]))
}

/// Pair groups in Stage-1 order: declared pooled groups and singletons,
/// ordered by their smallest event.
fn pair_groups(term: usize, pooled: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = pooled
        .iter()
        .map(|g| {
            let mut v: Vec<usize> = g.iter().map(|j| j - 1).collect();
            v.sort_unstable();
            v
        })
        .collect();
    for j in 0..term {
        if !groups.iter().any(|g| g.contains(&j)) {
            groups.push(vec![j]);
        }
    }
    groups.sort_by_key(|g| g[0]);
    groups
}

/// Runs the whole stage schedule. Model and configuration problems are
/// returned as errors; a failing stage stops the schedule and is recorded in
/// [`FitResult::failure`] with every earlier estimate kept.
pub fn fit_all(data: &MeticDataset, model: &ModelSpec, cfg: &FitConfig) -> Result<FitResult> {
    let (graph, families) = check_model(data, model, cfg)?;
    let stage_cfg = FitConfig {
        variance: VarianceMethod::None,
        ..cfg.clone()
    };
    let wmat = data.design(&model.w)?;
    let n = data.n();
    let w_mean = (0..model.w.len())
        .map(|k| wmat.iter().map(|r| r[k]).sum::<f64>() / n.max(1) as f64)
        .collect();
    let mut res = FitResult {
        j: data.n_events(),
        n,
        structure: model.vine.structure,
        l_design: model.l.clone(),
        w_design: model.w.clone(),
        w_mean,
        variance: cfg.variance,
        margins: Vec::new(),
        copulas: Vec::new(),
        stages: Vec::new(),
        parameters: Vec::new(),
        failure: None,
    };
    let fail = |res: &mut FitResult, stage: usize, target: String, e: MeticError| {
        res.failure = Some(StageFailure {
            stage,
            target,
            numeric: e.is_numeric(),
            error: e.to_string(),
        });
    };
    let term = data.terminal();

    let tfit = match fit_terminal(data, model.g[term], &model.l, &stage_cfg) {
        Ok(t) => t,
        Err(e) => {
            fail(&mut res, 1, format!("T{}", term + 1), e);
            return Ok(res);
        }
    };
    let terminal = tfit.margin.model()?;
    res.margins.push(tfit.margin);
    res.stages.push(tfit.record);

    let mut specs: BTreeMap<usize, CopulaSpec> = BTreeMap::new();
    for group in pair_groups(term, &cfg.pooled) {
        let e0 = first_tree_edge(&graph, group[0])?;
        let gs: Vec<TransformationG> = group.iter().map(|&j| model.g[j]).collect();
        match fit_pair_pooled(&group, data, &terminal, families[&e0], &gs, &model.l, &model.w, &stage_cfg) {
            Ok(p) => {
                for &j in &group {
                    specs.insert(first_tree_edge(&graph, j)?, p.copula.spec());
                }
                res.margins.extend(p.margins);
                res.copulas.push(p.copula);
                res.stages.push(p.record);
            }
            Err(e) => {
                let target = group.iter().map(|j| format!("({},{})", j + 1, term + 1)).collect::<Vec<_>>().join("+");
                fail(&mut res, 1, target, e);
                return Ok(res);
            }
        }
    }
    res.margins.sort_by_key(|m| m.event);

    let models = res.models()?;
    for k in 2..graph.n_vars() {
        for &e in graph.tree(k) {
            match fit_edge(&graph, e, families[&e], &specs, &models, data, &model.l, &model.w, &stage_cfg) {
                Ok(f) => {
                    specs.insert(e, f.copula.spec());
                    res.copulas.push(f.copula);
                    res.stages.push(f.record);
                }
                Err(err) => {
                    fail(&mut res, k, graph.label_string(e), err);
                    return Ok(res);
                }
            }
        }
    }

    if cfg.variance == VarianceMethod::Sandwich {
        if let Err(e) = stacked::propagate(data, model, &graph, &mut res, &cfg.integration) {
            fail(&mut res, graph.n_vars() - 1, "sandwich variance".into(), e);
        }
    }
    if cfg.variance == VarianceMethod::Bootstrap {
        let inner = FitConfig {
            variance: VarianceMethod::None,
            ..cfg.clone()
        };
        let boot = bootstrap_variance(data, cfg.bootstrap, cfg.seed, |d| {
            let r = fit_all(d, model, &inner)?;
            if let Some(f) = r.failure {
                return Err(MeticError::Optimization {
                    stage: f.target,
                    reason: f.error,
                });
            }
            Ok(flat_estimates(&r))
        });
        match boot {
            Ok(cov) => assign_bootstrap(&mut res, &cov),
            Err(e) => {
                fail(&mut res, graph.n_vars() - 1, "bootstrap".into(), e);
            }
        }
    }
    res.parameters = parameter_rows(&res);
    Ok(res)
}

fn flat_estimates(r: &FitResult) -> Vec<f64> {
    let mut out = Vec::new();
    for m in &r.margins {
        out.extend(&m.beta);
    }
    for c in &r.copulas {
        out.extend(&c.gamma);
    }
    out
}

fn assign_bootstrap(res: &mut FitResult, cov: &[Vec<f64>]) {
    let mut k = 0;
    let block = |k: usize, p: usize| -> Vec<Vec<f64>> { (k..k + p).map(|a| cov[a][k..k + p].to_vec()).collect() };
    for m in res.margins.iter_mut() {
        let p = m.beta.len();
        m.beta_cov = Some(block(k, p));
        k += p;
    }
    for c in res.copulas.iter_mut() {
        let p = c.gamma.len();
        c.gamma_cov = Some(block(k, p));
        k += p;
    }
}

fn parameter_rows(res: &FitResult) -> Vec<ParameterRow> {
    let mut rows = Vec::new();
    for m in &res.margins {
        let se = m.beta_se();
        for (k, (b, name)) in m.beta.iter().zip(&m.beta_names).enumerate() {
            rows.push(ParameterRow {
                name: format!("beta_{}[{name}]", m.event),
                stage: m.stage,
                estimate: *b,
                se: se.as_ref().map(|s| s[k]),
                method: res.variance,
            });
        }
    }
    for c in &res.copulas {
        let se = c.gamma_se();
        for (k, (g, name)) in c.gamma.iter().zip(&c.gamma_names).enumerate() {
            rows.push(ParameterRow {
                name: format!("gamma_{}[{name}]", c.labels.join("+")),
                stage: c.stage,
                estimate: *g,
                se: se.as_ref().map(|s| s[k]),
                method: res.variance,
            });
        }
    }
    rows
}

/// Kendall's τ with a Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    pub tau: f64,
    pub se: f64,
}

/// Unconditional Kendall's τ of `(T_1, T_2)` in a three-variable vine,
/// estimated from `n` vine draws at design row `w`. The standard error
/// comes from ten batch estimates.
pub fn tau_unconditional(
    graph: &VineGraph,
    specs: &BTreeMap<usize, CopulaSpec>,
    w: &[f64],
    n: usize,
    seed: u64,
) -> Result<TauEstimate> {
    if graph.n_vars() != 3 {
        return Err(MeticError::Config(format!(
            "unconditional tau is only defined here for J = 3, got J = {}",
            graph.n_vars()
        )));
    }
    if n < 1000 {
        return Err(MeticError::Config(format!("need at least 1000 samples, got {n}")));
    }
    let draws = sample_vine(graph, specs, w, n, seed)?;
    let tau_of = |rows: &[Vec<f64>]| -> Result<f64> {
        let a: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let b: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        kendalls::tau_b_with_comparator(&a, &b, |x: &f64, y: &f64| x.total_cmp(y))
            .map(|(t, _)| t)
            .map_err(|e| MeticError::Integration(format!("Kendall's tau failed: {e:?}")))
    };
    let tau = tau_of(&draws)?;
    let batches = 10;
    let size = n / batches;
    let bt: Vec<f64> = (0..batches)
        .map(|b| tau_of(&draws[b * size..(b + 1) * size]))
        .collect::<Result<_>>()?;
    let mean = bt.iter().sum::<f64>() / batches as f64;
    let var = bt.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
    Ok(TauEstimate {
        tau,
        se: (var / batches as f64).sqrt(),
    })
}
