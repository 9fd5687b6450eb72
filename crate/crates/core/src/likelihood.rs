//! Log-likelihoods of the estimation stages and the censored-region
//! integration engine.
//!
//! Marginal parameters are packed as `[β, ln dΛ_1, ..., ln dΛ_κ]`. Each
//! subject is differentiated with forward duals with respect to a few
//! scalars (`Λ(X_i)`, `β'L_i`, `α_i`); the chain rule onto the packed
//! parameters is done by hand.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_dual::DualNum;
use serde::{Deserialize, Serialize};

use crate::copulas::{CopulaFamily, CopulaSpec};
use crate::data::MeticDataset;
use crate::error::{MeticError, Result};
use crate::marginals::{distinct_event_times, EventIndex, MarginalModel, TransformationG};
use crate::numeric::special::{gauss_legendre_unit, log_sum_exp};
use crate::numeric::{clip_prob, gradient, seed, Grad, Real, CLIP_EPS};
use crate::vine::{MarginCache, VineGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationMethod {
    /// Tensor Gauss–Legendre up to `threshold` dimensions, quasi-MC above.
    GaussLegendre,
    /// Quasi-MC in every dimension.
    QuasiMc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrationPolicy {
    pub method: IntegrationMethod,
    pub nodes: usize,
    pub mc_points: usize,
    pub threshold: usize,
    pub seed: u64,
}

impl Default for IntegrationPolicy {
    fn default() -> Self {
        Self {
            method: IntegrationMethod::GaussLegendre,
            nodes: 30,
            mc_points: 4096,
            threshold: 3,
            seed: 0,
        }
    }
}

impl IntegrationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 5 {
            return Err(MeticError::Config(format!(
                "integration needs at least 5 nodes per dimension, got {}",
                self.nodes
            )));
        }
        if !(512..=1 << 16).contains(&self.mc_points) {
            return Err(MeticError::Config(format!(
                "quasi-MC sample count must lie in [512, 65536], got {}",
                self.mc_points
            )));
        }
        Ok(())
    }

    /// Points of the unit cube `[0,1]^dim` with log weights. `stream`
    /// selects the scrambling seed of the quasi-MC rule.
    pub fn unit_nodes(&self, dim: usize, stream: u64) -> Vec<(Vec<f64>, f64)> {
        let mut nodes = self.raw_nodes(dim, stream);
        for (p, lw) in nodes.iter_mut() {
            for x in p.iter_mut() {
                let s = *x;
                *x = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
                *lw += (30.0 * s * s * (1.0 - s) * (1.0 - s)).ln();
            }
        }
        nodes
    }

    fn raw_nodes(&self, dim: usize, stream: u64) -> Vec<(Vec<f64>, f64)> {
        if dim == 0 {
            return vec![(Vec::new(), 0.0)];
        }
        if self.method == IntegrationMethod::GaussLegendre && dim <= self.threshold {
            let rule: Vec<(f64, f64)> = gauss_legendre_unit(self.nodes)
                .into_iter()
                .map(|(x, w)| (x, w.ln()))
                .collect();
            let mut out = vec![(Vec::with_capacity(dim), 0.0)];
            for _ in 0..dim {
                let mut next = Vec::with_capacity(out.len() * rule.len());
                for (pt, lw) in &out {
                    for &(x, w) in &rule {
                        let mut p = pt.clone();
                        p.push(x);
                        next.push((p, lw + w));
                    }
                }
                out = next;
            }
            out
        } else {
            let mix = self
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
            let scramble = ((mix >> 32) ^ mix) as u32;
            let m = self.mc_points;
            let lw = -(m as f64).ln();
            // sobol_burley yields multiples of 2^-24; shift off the lower face
            let half = 0.5 / (1u32 << 24) as f64;
            (0..m)
                .map(|k| {
                    let p = (0..dim)
                        .map(|d| sobol_burley::sample(k as u32, d as u32, scramble) as f64 + half)
                        .collect();
                    (p, lw)
                })
                .collect()
        }
    }
}

/// `ln ∫_box exp(f(u)) du` over a box of `(lower, upper)` bounds.
pub fn integrate_censored(
    f: &mut dyn FnMut(&[f64]) -> f64,
    bounds: &[(f64, f64)],
    policy: &IntegrationPolicy,
    stream: u64,
) -> Result<f64> {
    policy.validate()?;
    let mut log_vol = 0.0;
    for &(a, b) in bounds {
        if !(b > a) {
            return Err(MeticError::Integration(format!("empty interval [{a}, {b}]")));
        }
        log_vol += (b - a).ln();
    }
    let mut finite = 0usize;
    let mut total = 0usize;
    let mut point = vec![0.0; bounds.len()];
    let terms: Vec<f64> = policy
        .unit_nodes(bounds.len(), stream)
        .into_iter()
        .map(|(s, lw)| {
            for ((p, &x), &(a, b)) in point.iter_mut().zip(&s).zip(bounds) {
                *p = a + (b - a) * x;
            }
            let v = f(&point);
            total += 1;
            if v.is_finite() {
                finite += 1;
                v + lw
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    if finite == 0 {
        return Err(MeticError::Integration(format!(
            "all {total} integrand evaluations were non-finite on a {}-dimensional box",
            bounds.len()
        )));
    }
    Ok(log_sum_exp(terms) + log_vol)
}

/// Values and scores returned by a stage likelihood.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Per-subject score vectors, when requested.
    pub scores: Option<Vec<Vec<f64>>>,
}

/// A stage's log-likelihood as a function of its packed parameter vector.
pub trait StageLikelihood {
    fn n_params(&self) -> usize;
    fn n_subjects(&self) -> usize;
    fn evaluate(&self, theta: &[f64], with_scores: bool) -> Result<Evaluation>;

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(theta, false)?.value)
    }
}

/// Marginal data of one event: design, jump layout and per-subject indices.
#[derive(Debug, Clone)]
pub struct MarginBlock {
    pub g: TransformationG,
    pub jump_times: Vec<f64>,
    pub index: EventIndex,
    pub events: Vec<bool>,
    pub l: Vec<Vec<f64>>,
    own_counts: Vec<f64>,
}

/// Per-subject marginal quantities at the current parameters.
struct MarginState {
    lam: Vec<f64>,
    eta: Vec<f64>,
    jumps: Vec<f64>,
}

impl MarginBlock {
    /// Block whose jumps sit at the distinct observed times of `(times, events)`.
    pub fn from_data(
        times: &[f64],
        events: &[bool],
        l: Vec<Vec<f64>>,
        g: TransformationG,
    ) -> Result<Self> {
        let (jump_times, _) = distinct_event_times(times, events);
        Self::with_jumps(jump_times, times, events, l, g)
    }

    pub fn with_jumps(
        jump_times: Vec<f64>,
        times: &[f64],
        events: &[bool],
        l: Vec<Vec<f64>>,
        g: TransformationG,
    ) -> Result<Self> {
        let index = EventIndex::new(&jump_times, times, events)?;
        let mut own_counts = vec![0.0; jump_times.len()];
        for k in index.own.iter().flatten() {
            own_counts[*k] += 1.0;
        }
        Ok(Self {
            g,
            jump_times,
            index,
            events: events.to_vec(),
            l,
            own_counts,
        })
    }

    pub fn n_beta(&self) -> usize {
        self.l.first().map_or(0, Vec::len)
    }

    pub fn n_params(&self) -> usize {
        self.n_beta() + self.jump_times.len()
    }

    /// Packed starting values: `β = 0` and Nelson–Aalen log-increments.
    pub fn start(&self, times: &[f64]) -> Vec<f64> {
        let m = MarginalModel::nelson_aalen(times, &self.events, self.n_beta(), self.g);
        let mut out = m.beta;
        out.extend(m.log_jumps);
        out
    }

    pub fn unpack(&self, theta: &[f64]) -> Result<MarginalModel> {
        let p = self.n_beta();
        MarginalModel::new(
            theta[..p].to_vec(),
            self.jump_times.clone(),
            theta[p..p + self.jump_times.len()].to_vec(),
            self.g,
        )
    }

    pub fn pack(model: &MarginalModel) -> Vec<f64> {
        let mut out = model.beta.clone();
        out.extend(&model.log_jumps);
        out
    }

    fn state(&self, theta: &[f64]) -> MarginState {
        let p = self.n_beta();
        let beta = &theta[..p];
        let jumps: Vec<f64> = theta[p..].iter().map(|v| v.exp()).collect();
        let mut cum = Vec::with_capacity(jumps.len());
        let mut acc = 0.0;
        for d in &jumps {
            acc += d;
            cum.push(acc);
        }
        let lam = self
            .index
            .upto
            .iter()
            .map(|&k| if k == 0 { 0.0 } else { cum[k - 1] })
            .collect();
        let eta = self
            .l
            .iter()
            .map(|row| row.iter().zip(beta).map(|(x, b)| x * b).sum())
            .collect();
        MarginState { lam, eta, jumps }
    }

    /// Adds the chain rule for one block to `grad[offset..]`, given
    /// per-subject derivatives with respect to `Λ_i` and `η_i`.
    fn chain(&self, st: &MarginState, d_lam: &[f64], d_eta: &[f64], grad: &mut [f64]) {
        let p = self.n_beta();
        for (i, row) in self.l.iter().enumerate() {
            for (g, x) in grad[..p].iter_mut().zip(row) {
                *g += d_eta[i] * x;
            }
        }
        let k = self.jump_times.len();
        let mut bucket = vec![0.0; k + 1];
        for (i, &u) in self.index.upto.iter().enumerate() {
            bucket[u] += d_lam[i];
        }
        let mut tail = 0.0;
        for l in (0..k).rev() {
            tail += bucket[l + 1];
            grad[p + l] += st.jumps[l] * tail + self.own_counts[l];
        }
    }

    /// `Σ_i d_i (∂U_i/∂θ)'` for the clipped pseudo-observations
    /// `U_i = S(X_i | L_i)`, where `d` is `q × n`. Returns `q × n_params`.
    pub fn survival_cross(&self, theta: &[f64], d: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.n_beta();
        let k = self.jump_times.len();
        let q = d.nrows();
        let st = self.state(theta);
        let mut out = DMatrix::zeros(q, p + k);
        // bucket[l] collects subjects with exactly l jumps at or before X_i
        let mut bucket = DMatrix::<f64>::zeros(q, k + 1);
        for i in 0..self.l.len() {
            let e = st.eta[i].exp();
            let x = st.lam[i] * e;
            let s = (-self.g.g(x)).exp();
            if !(CLIP_EPS..=1.0 - CLIP_EPS).contains(&s) {
                continue;
            }
            let gdot = match self.g {
                TransformationG::Ph => 1.0,
                TransformationG::Po => 1.0 / (1.0 + x),
            };
            // ∂U/∂η = -U Ġ x, ∂U/∂Λ = -U Ġ e^η
            let du_eta = -s * gdot * x;
            let du_lam = -s * gdot * e;
            for r in 0..q {
                let dr = d[(r, i)];
                for (c, lx) in self.l[i].iter().enumerate() {
                    out[(r, c)] += dr * du_eta * lx;
                }
                bucket[(r, self.index.upto[i])] += dr * du_lam;
            }
        }
        for r in 0..q {
            let mut tail = 0.0;
            for l in (0..k).rev() {
                tail += bucket[(r, l + 1)];
                out[(r, p + l)] = st.jumps[l] * tail;
            }
        }
        out
    }

    /// One subject's gradient with respect to this block's parameters.
    fn subject_score(&self, st: &MarginState, i: usize, d_lam: f64, d_eta: f64, out: &mut [f64]) {
        let p = self.n_beta();
        for (o, x) in out[..p].iter_mut().zip(&self.l[i]) {
            *o += d_eta * x;
        }
        for l in 0..self.index.upto[i] {
            out[p + l] += st.jumps[l] * d_lam;
        }
        if let Some(k) = self.index.own[i] {
            out[p + k] += 1.0;
        }
    }
}

/// `ln S = -G(Λ e^η)` and the bracket `-G + ln dΛ + ln Ġ + η` of an event.
fn margin_terms<T: Real>(g: TransformationG, lam: T, eta: T) -> (T, T) {
    let x = lam * eta.exp();
    let log_s = -g.g(x);
    (log_s, log_s + g.log_gdot(x) + eta)
}

/// Terminal-event stage: `Σ_i -G(Λ(X_i) e^{η_i}) + Δ_i (ln dΛ(X_i) + ln Ġ + η_i)`.
#[derive(Debug, Clone)]
pub struct TerminalLikelihood {
    pub block: MarginBlock,
}

impl TerminalLikelihood {
    pub fn new(block: MarginBlock) -> Self {
        Self { block }
    }

    fn subject(&self, st: &MarginState, i: usize) -> Result<(f64, f64, f64)> {
        let lam = seed::<2>(st.lam[i], 0);
        let eta = seed::<2>(st.eta[i], 1);
        let (log_s, bracket) = margin_terms(self.block.g, lam, eta);
        let v = match self.block.index.own[i] {
            Some(k) => bracket + st.jumps[k].ln(),
            None => log_s,
        };
        if !v.re.is_finite() {
            return Err(MeticError::NonFinite {
                subject: i,
                case: if self.block.events[i] { "terminal observed" } else { "terminal censored" }.into(),
            });
        }
        let [dl, de] = gradient(&v);
        Ok((v.re, dl, de))
    }
}

impl StageLikelihood for TerminalLikelihood {
    fn n_params(&self) -> usize {
        self.block.n_params()
    }

    fn n_subjects(&self) -> usize {
        self.block.events.len()
    }

    fn evaluate(&self, theta: &[f64], with_scores: bool) -> Result<Evaluation> {
        check_len(theta, self.n_params())?;
        let st = self.block.state(theta);
        let n = self.n_subjects();
        let mut value = 0.0;
        let mut d_lam = vec![0.0; n];
        let mut d_eta = vec![0.0; n];
        for i in 0..n {
            let (v, dl, de) = self.subject(&st, i)?;
            value += v;
            d_lam[i] = dl;
            d_eta[i] = de;
        }
        let mut grad = vec![0.0; self.n_params()];
        self.block.chain(&st, &d_lam, &d_eta, &mut grad);
        let scores = with_scores.then(|| {
            (0..n)
                .map(|i| {
                    let mut s = vec![0.0; self.n_params()];
                    self.block.subject_score(&st, i, d_lam[i], d_eta[i], &mut s);
                    s
                })
                .collect()
        });
        Ok(Evaluation {
            value,
            gradient: grad,
            scores,
        })
    }
}

fn check_len(theta: &[f64], n: usize) -> Result<()> {
    if theta.len() != n {
        return Err(MeticError::Dimension(format!(
            "expected {n} parameters, got {}",
            theta.len()
        )));
    }
    Ok(())
}

/// Copula part of the pairwise likelihood for one subject, by censoring case.
fn pair_copula_term<T: Real>(fam: CopulaFamily, uj: T, uj_term: T, alpha: T, dj: bool, dt: bool) -> T {
    match (dj, dt) {
        (true, true) => fam.log_density(uj, uj_term, alpha),
        (true, false) => fam.log_h(uj_term, uj, alpha),
        (false, true) => fam.log_h(uj, uj_term, alpha),
        (false, false) => fam.log_cdf(uj, uj_term, alpha),
    }
}

fn case_name(dj: bool, dt: bool) -> String {
    format!("case ({},{})", dj as u8, dt as u8)
}

/// Pairwise stage for one or more nonterminal events sharing a copula
/// parameter with the terminal event. A single block is the ordinary
/// pairwise fit; several blocks form the pooled likelihood.
///
/// Packing: `[block_1, ..., block_m, γ]`.
#[derive(Debug, Clone)]
pub struct PairLikelihood {
    pub blocks: Vec<MarginBlock>,
    pub family: CopulaFamily,
    pub w: Vec<Vec<f64>>,
    pub u_terminal: Vec<f64>,
    pub terminal_events: Vec<bool>,
}

impl PairLikelihood {
    pub fn new(
        blocks: Vec<MarginBlock>,
        family: CopulaFamily,
        w: Vec<Vec<f64>>,
        u_terminal: Vec<f64>,
        terminal_events: Vec<bool>,
    ) -> Result<Self> {
        let n = u_terminal.len();
        if blocks.is_empty() {
            return Err(MeticError::Config("pairwise likelihood needs at least one event".into()));
        }
        if w.len() != n || terminal_events.len() != n || blocks.iter().any(|b| b.events.len() != n) {
            return Err(MeticError::Dimension("pairwise inputs differ in subject count".into()));
        }
        Ok(Self {
            blocks,
            family,
            w,
            u_terminal: u_terminal.into_iter().map(clip_prob).collect(),
            terminal_events,
        })
    }

    pub fn n_gamma(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    /// Offsets of each block and of `γ` in the packed vector.
    pub fn offsets(&self) -> (Vec<usize>, usize) {
        let mut off = Vec::with_capacity(self.blocks.len());
        let mut acc = 0;
        for b in &self.blocks {
            off.push(acc);
            acc += b.n_params();
        }
        (off, acc)
    }

    fn subject(
        &self,
        b: &MarginBlock,
        st: &MarginState,
        i: usize,
        alpha: f64,
    ) -> Result<(f64, f64, f64, f64)> {
        let lam = seed::<3>(st.lam[i], 0);
        let eta = seed::<3>(st.eta[i], 1);
        let a = seed::<3>(alpha, 2);
        let (log_s, bracket) = margin_terms(b.g, lam, eta);
        let s = log_s.exp();
        let uj = if s.re < CLIP_EPS || s.re > 1.0 - CLIP_EPS {
            Grad::<3>::cst(clip_prob(s.re))
        } else {
            s
        };
        let dj = b.events[i];
        let dt = self.terminal_events[i];
        let mut v = pair_copula_term(self.family, uj, Grad::<3>::cst(self.u_terminal[i]), a, dj, dt);
        if let Some(k) = b.index.own[i] {
            v += bracket + st.jumps[k].ln();
        }
        if !v.re.is_finite() || gradient(&v).iter().any(|x| !x.is_finite()) {
            return Err(MeticError::NonFinite {
                subject: i,
                case: case_name(dj, dt),
            });
        }
        let [dl, de, da] = gradient(&v);
        Ok((v.re, dl, de, da))
    }
}

impl StageLikelihood for PairLikelihood {
    fn n_params(&self) -> usize {
        self.offsets().1 + self.n_gamma()
    }

    fn n_subjects(&self) -> usize {
        self.u_terminal.len()
    }

    fn evaluate(&self, theta: &[f64], with_scores: bool) -> Result<Evaluation> {
        check_len(theta, self.n_params())?;
        let (off, g0) = self.offsets();
        let gamma = &theta[g0..];
        let n = self.n_subjects();
        let mut value = 0.0;
        let mut grad = vec![0.0; self.n_params()];
        let mut scores = with_scores.then(|| vec![vec![0.0; self.n_params()]; n]);
        let xw: Vec<f64> = self
            .w
            .iter()
            .map(|w| w.iter().zip(gamma).map(|(a, b)| a * b).sum())
            .collect();
        let alpha: Vec<f64> = xw.iter().map(|&x| self.family.link(x)).collect();
        for &a in &alpha {
            self.family.check_alpha(a)?;
        }
        for (bi, b) in self.blocks.iter().enumerate() {
            let end = off[bi] + b.n_params();
            let st = b.state(&theta[off[bi]..end]);
            let mut d_lam = vec![0.0; n];
            let mut d_eta = vec![0.0; n];
            for i in 0..n {
                let (v, dl, de, da) = self.subject(b, &st, i, alpha[i])?;
                value += v;
                d_lam[i] = dl;
                d_eta[i] = de;
                let dx = da * self.family.link_derivative(xw[i]);
                for (g, wk) in grad[g0..].iter_mut().zip(&self.w[i]) {
                    *g += dx * wk;
                }
                if let Some(sc) = scores.as_mut() {
                    let row = &mut sc[i];
                    b.subject_score(&st, i, dl, de, &mut row[off[bi]..end]);
                    for (g, wk) in row[g0..].iter_mut().zip(&self.w[i]) {
                        *g += dx * wk;
                    }
                }
            }
            b.chain(&st, &d_lam, &d_eta, &mut grad[off[bi]..end]);
        }
        Ok(Evaluation {
            value,
            gradient: grad,
            scores,
        })
    }
}

/// How the fitted edge enters a node. When nothing else depends on a
/// censored argument, the integral over it is done in closed form and the
/// argument holds its upper limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EdgeTerm {
    Density,
    /// `∫_0^x c(s, y) ds = ∂C(x, y)/∂y`.
    FirstIntegrated,
    /// `∫_0^y c(x, t) dt`, which equals `∂C(y, x)/∂x` for an exchangeable family.
    SecondIntegrated,
    Cdf,
}

impl EdgeTerm {
    fn eval(self, f: CopulaFamily, x: f64, y: f64, a: Grad<1>) -> Grad<1> {
        let (x, y) = (Grad::<1>::cst(x), Grad::<1>::cst(y));
        match self {
            Self::Density => f.log_density(x, y, a),
            Self::FirstIntegrated => f.log_h(x, y, a),
            Self::SecondIntegrated => f.log_h(y, x, a),
            Self::Cdf => f.log_cdf(x, y, a),
        }
    }
}

/// One quadrature node of a subject's censored-region integral: log weight
/// plus every log term not involving the edge being fitted, and the two
/// arguments of that edge.
#[derive(Debug, Clone, Copy)]
struct EdgeNode {
    base: f64,
    args: [f64; 2],
    term: EdgeTerm,
}

/// Index of the first-tree edge joining nonterminal `j` to the terminal.
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

/// Builds the quadrature nodes of one subject for the integral
/// `∫ c_{𝔫}(U^𝔬, u^𝔠) du^𝔠` over the variables `nodes`.
///
/// The integral is carried out in the coordinates `v_j = h(u_j | u_J)`,
/// which absorb the first-tree densities of censored events. `include`
/// lists the higher-tree edges whose log densities go into the node base;
/// `target`, if given, is the edge whose arguments are recorded.
#[allow(clippy::too_many_arguments)]
fn subject_nodes(
    graph: &VineGraph,
    params: &[Option<(CopulaFamily, f64)>],
    nodes: &[usize],
    include: &[usize],
    target: Option<usize>,
    u: &[f64],
    observed: &[bool],
    policy: &IntegrationPolicy,
    stream: u64,
    out: &mut Vec<EdgeNode>,
) -> Result<()> {
    let term = graph.terminal();
    let nonterm: Vec<usize> = nodes.iter().copied().filter(|&v| v != term).collect();
    let first: Vec<(usize, CopulaFamily, f64)> = nonterm
        .iter()
        .map(|&j| {
            let e = first_tree_edge(graph, j)?;
            let (f, a) = params[e].ok_or_else(|| MeticError::MissingEdge(graph.label_string(e)))?;
            Ok((j, f, a))
        })
        .collect::<Result<_>>()?;
    // A second-tree target with nothing above it: its censored arguments
    // are integrated analytically.
    let closed: Vec<usize> = match target {
        Some(e) if include.is_empty() && graph.edge(e).tree == 2 => {
            let (a, b) = graph.label(e).ok_or_else(|| MeticError::MissingEdge(graph.label_string(e)))?.conditioned;
            if a == term || b == term {
                Vec::new()
            } else {
                vec![a, b]
            }
        }
        _ => Vec::new(),
    };
    let term_kind = match closed[..] {
        [a, b] => match (observed[a], observed[b]) {
            (true, true) => EdgeTerm::Density,
            (false, true) => EdgeTerm::FirstIntegrated,
            (true, false) => EdgeTerm::SecondIntegrated,
            (false, false) => EdgeTerm::Cdf,
        },
        _ => EdgeTerm::Density,
    };
    let censored: Vec<usize> = nonterm
        .iter()
        .copied()
        .filter(|&j| !observed[j] && !closed.contains(&j))
        .collect();
    let term_free = !observed[term];
    let dim = censored.len() + term_free as usize;
    let mut v = vec![0.5; graph.n_vars()];
    for (s, lw) in policy.unit_nodes(dim, stream) {
        let mut base = lw;
        let mut k = 0;
        let u_term = if term_free {
            k = 1;
            base += u[term].ln();
            clip_prob(s[0] * u[term])
        } else {
            u[term]
        };
        for &(j, fam, alpha) in &first {
            let uj = clip_prob(u[j]);
            let b = clip_prob(fam.h(uj, u_term, alpha));
            if observed[j] {
                v[j] = b;
                base += fam.log_density(uj, u_term, alpha);
            } else if closed.contains(&j) {
                v[j] = b;
            } else {
                v[j] = clip_prob(s[k] * b);
                base += b.ln();
                k += 1;
            }
        }
        let mut cache = MarginCache::conditional(graph, params, &v);
        for &e in include {
            base += cache.log_density(e)?;
        }
        let args = match target {
            Some(e) => cache.args(e)?,
            None => [0.5, 0.5],
        };
        out.push(EdgeNode { base, args, term: term_kind });
    }
    Ok(())
}

fn log_sum_exp_nodes(nodes: &[EdgeNode]) -> f64 {
    log_sum_exp(nodes.iter().map(|n| n.base))
}

/// Stage-k likelihood of a single edge above the first tree, with its
/// ancestors frozen. The quadrature nodes of every subject are computed
/// once; an evaluation only re-weights them by `c_e(·; α_i)`.
#[derive(Debug, Clone)]
pub struct EdgeLikelihood {
    pub family: CopulaFamily,
    pub w: Vec<Vec<f64>>,
    nodes: Vec<Vec<EdgeNode>>,
}

impl EdgeLikelihood {
    /// `u` holds pseudo-observations `[event][subject]`; `specs` must cover
    /// every ancestor of `e`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        graph: &VineGraph,
        e: usize,
        family: CopulaFamily,
        specs: &BTreeMap<usize, CopulaSpec>,
        u: &[Vec<f64>],
        data: &MeticDataset,
        w: Vec<Vec<f64>>,
        policy: &IntegrationPolicy,
    ) -> Result<Self> {
        policy.validate()?;
        if graph.edge(e).tree < 2 {
            return Err(MeticError::Config(format!(
                "edge {} belongs to the first tree; fit it with the pairwise likelihood",
                graph.label_string(e)
            )));
        }
        let anc = graph.ancestry(e);
        for a in anc.by_tree.iter().flatten() {
            if !specs.contains_key(a) {
                return Err(MeticError::MissingEdge(graph.label_string(*a)));
            }
        }
        let include: Vec<usize> = anc
            .closure()
            .into_iter()
            .filter(|&x| x != e && graph.edge(x).tree >= 2)
            .collect();
        let n = data.n();
        let mut all = Vec::with_capacity(n);
        let jn = graph.n_vars();
        for i in 0..n {
            let ui: Vec<f64> = (0..jn).map(|j| u[j][i]).collect();
            let obs: Vec<bool> = (0..jn).map(|j| data.events(j)[i]).collect();
            let params: Vec<Option<(CopulaFamily, f64)>> = (0..graph.n_edges())
                .map(|x| {
                    if x == e {
                        Some((family, family_neutral(family)))
                    } else {
                        specs.get(&x).map(|s| (s.family, s.alpha(&w[i])))
                    }
                })
                .collect();
            let mut nodes = Vec::new();
            subject_nodes(graph, &params, &anc.nodes, &include, Some(e), &ui, &obs, policy, i as u64, &mut nodes)?;
            nodes.retain(|x| x.base.is_finite());
            if nodes.is_empty() {
                return Err(MeticError::Integration(format!(
                    "subject {i}: no finite quadrature node for edge {}",
                    graph.label_string(e)
                )));
            }
            all.push(nodes);
        }
        Ok(Self {
            family,
            w,
            nodes: all,
        })
    }

    /// Total number of cached quadrature nodes.
    pub fn n_nodes(&self) -> usize {
        self.nodes.iter().map(Vec::len).sum()
    }

    fn subject(&self, i: usize, alpha: f64) -> Result<(f64, f64)> {
        let a = seed::<1>(alpha, 0);
        let mut m = f64::NEG_INFINITY;
        let mut s = 0.0;
        let mut d = 0.0;
        for node in &self.nodes[i] {
            let t = node.term.eval(self.family, node.args[0], node.args[1], a);
            let tv = t.re + node.base;
            let [td] = gradient(&t);
            if !tv.is_finite() {
                continue;
            }
            if tv > m {
                let r = (m - tv).exp();
                s *= r;
                d *= r;
                m = tv;
            }
            let e = (tv - m).exp();
            s += e;
            d += e * td;
        }
        let v = m + s.ln();
        if !v.is_finite() || !(d / s).is_finite() {
            return Err(MeticError::NonFinite {
                subject: i,
                case: "edge integral".into(),
            });
        }
        Ok((v, d / s))
    }
}

/// Parameter used as a placeholder while building nodes; the target
/// edge's own density is never part of the node base.
fn family_neutral(f: CopulaFamily) -> f64 {
    match f {
        CopulaFamily::Gumbel => 1.0,
        CopulaFamily::Clayton => 1.0,
        _ => 0.0,
    }
}

impl StageLikelihood for EdgeLikelihood {
    fn n_params(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    fn n_subjects(&self) -> usize {
        self.nodes.len()
    }

    fn evaluate(&self, theta: &[f64], with_scores: bool) -> Result<Evaluation> {
        check_len(theta, self.n_params())?;
        let mut value = 0.0;
        let mut grad = vec![0.0; theta.len()];
        let mut scores = with_scores.then(|| Vec::with_capacity(self.nodes.len()));
        for (i, w) in self.w.iter().enumerate() {
            let x: f64 = w.iter().zip(theta).map(|(a, b)| a * b).sum();
            let alpha = self.family.link(x);
            self.family.check_alpha(alpha)?;
            let (v, da) = self.subject(i, alpha)?;
            value += v;
            let dx = da * self.family.link_derivative(x);
            let s: Vec<f64> = w.iter().map(|wk| dx * wk).collect();
            for (g, sk) in grad.iter_mut().zip(&s) {
                *g += sk;
            }
            if let Some(sc) = scores.as_mut() {
                sc.push(s);
            }
        }
        Ok(Evaluation {
            value,
            gradient: grad,
            scores,
        })
    }
}

/// Terminal log-likelihood `Σ ℓ_J` of a fitted marginal model.
pub fn loglik_terminal(model: &MarginalModel, data: &MeticDataset, l: &[Vec<f64>]) -> Result<f64> {
    let term = data.terminal();
    let block = MarginBlock::with_jumps(
        model.jump_times.clone(),
        data.times(term),
        data.events(term),
        l.to_vec(),
        model.g,
    )?;
    TerminalLikelihood::new(block).value(&MarginBlock::pack(model))
}

/// Pairwise log-likelihood of nonterminal event `j` given terminal
/// pseudo-observations `u_terminal`.
pub fn loglik_pair(
    j: usize,
    model: &MarginalModel,
    spec: &CopulaSpec,
    u_terminal: &[f64],
    data: &MeticDataset,
    l: &[Vec<f64>],
    w: &[Vec<f64>],
) -> Result<f64> {
    let block = MarginBlock::with_jumps(
        model.jump_times.clone(),
        data.times(j),
        data.events(j),
        l.to_vec(),
        model.g,
    )?;
    let lik = PairLikelihood::new(
        vec![block],
        spec.family,
        w.to_vec(),
        u_terminal.to_vec(),
        data.events(data.terminal()).to_vec(),
    )?;
    let mut theta = MarginBlock::pack(model);
    theta.extend(&spec.gamma);
    lik.value(&theta)
}

/// Stage likelihood `Σ_i ln ∫ c_{𝔫(e)}(U^𝔬, u^𝔠) du^𝔠` of edge `e`, with
/// `specs` holding its own spec and those of its ancestors.
pub fn loglik_edge(
    graph: &VineGraph,
    e: usize,
    specs: &BTreeMap<usize, CopulaSpec>,
    u: &[Vec<f64>],
    data: &MeticDataset,
    w: &[Vec<f64>],
    policy: &IntegrationPolicy,
) -> Result<f64> {
    let spec = specs
        .get(&e)
        .ok_or_else(|| MeticError::MissingEdge(graph.label_string(e)))?;
    EdgeLikelihood::new(graph, e, spec.family, specs, u, data, w.to_vec(), policy)?.value(&spec.gamma)
}

/// Full log-likelihood: observed marginal log densities plus, per subject,
/// the log-integral of the vine density over the censored coordinates.
pub fn full_loglik(
    models: &[MarginalModel],
    graph: &VineGraph,
    specs: &BTreeMap<usize, CopulaSpec>,
    data: &MeticDataset,
    l: &[Vec<f64>],
    w: &[Vec<f64>],
    policy: &IntegrationPolicy,
) -> Result<f64> {
    policy.validate()?;
    let jn = data.n_events();
    if graph.n_vars() != jn {
        return Err(MeticError::ModelMismatch(format!(
            "vine has {} variables, data has {jn} events",
            graph.n_vars()
        )));
    }
    let u = crate::marginals::pseudo_observations(models, data, l)?;
    let mut total = 0.0;
    for (j, m) in models.iter().enumerate() {
        let index = EventIndex::new(&m.jump_times, data.times(j), data.events(j))?;
        let cum = m.cumulative();
        for (i, own) in index.own.iter().enumerate() {
            if let Some(k) = own {
                let eta = m.eta(&l[i]);
                let (_, bracket) = margin_terms(m.g, cum[*k], eta);
                total += bracket + m.log_jumps[*k];
            }
        }
    }
    let all: Vec<usize> = (0..jn).collect();
    let include: Vec<usize> = (0..graph.n_edges()).filter(|&e| graph.edge(e).tree >= 2).collect();
    let mut nodes = Vec::new();
    for i in 0..data.n() {
        let params = graph.edge_params(specs, &w[i]);
        let ui: Vec<f64> = (0..jn).map(|j| u[j][i]).collect();
        let obs: Vec<bool> = (0..jn).map(|j| data.events(j)[i]).collect();
        nodes.clear();
        subject_nodes(graph, &params, &all, &include, None, &ui, &obs, policy, i as u64, &mut nodes)?;
        let v = log_sum_exp_nodes(&nodes);
        if !v.is_finite() {
            return Err(MeticError::NonFinite {
                subject: i,
                case: "full likelihood integral".into(),
            });
        }
        total += v;
    }
    Ok(total)
}
