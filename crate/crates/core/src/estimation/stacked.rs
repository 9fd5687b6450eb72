//! Covariance of the complete stage-wise estimator.
//!
//! Stage `s` solves `Σ_i ψ_{s,i}(θ_s; θ̂_{<s}) = 0`, so its influence
//! function is `A_s⁻¹ (ψ_{s,i} + Σ_{r<s} H_{sr} IF_{r,i})` with `A_s` the
//! observed information and `H_{sr} = ∂Σψ_s/∂θ_r`. Earlier estimates reach a
//! later stage only through the pseudo-observations `U_v` and the ancestor
//! copula parameters, so `H_{sr}` comes from perturbing those inputs.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::{finite_cov, inverse_information, parse_label, score_matrix, sub_block, FitResult, ModelSpec};
use crate::copulas::{CopulaFamily, CopulaSpec};
use crate::data::MeticDataset;
use crate::error::{MeticError, Result};
use crate::likelihood::{EdgeLikelihood, IntegrationPolicy, MarginBlock, PairLikelihood, StageLikelihood, TerminalLikelihood};
use crate::marginals::pseudo_observations;
use crate::vine::VineGraph;

struct MarginSlot {
    stage: usize,
    offset: usize,
    block: MarginBlock,
    theta: Vec<f64>,
}

struct GammaSlot {
    stage: usize,
    offset: usize,
    edges: Vec<usize>,
    family: CopulaFamily,
    gamma: Vec<f64>,
}

fn specs_of(slots: &[GammaSlot]) -> BTreeMap<usize, CopulaSpec> {
    let mut specs = BTreeMap::new();
    for s in slots {
        for &e in &s.edges {
            specs.insert(e, CopulaSpec::new(s.family, s.gamma.clone()));
        }
    }
    specs
}

/// Relative step for a probability input.
fn u_step(u: f64) -> f64 {
    1e-5 * u.min(1.0 - u)
}

/// `∂ψ_{s,i}/∂x_i` by central differences, where subject `i`'s scores
/// depend only on its own input `x_i`.
fn per_subject_derivative<F>(x: &[f64], step: &[f64], mut scores: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<DMatrix<f64>>,
{
    let up: Vec<f64> = x.iter().zip(step).map(|(a, h)| a + h).collect();
    let dn: Vec<f64> = x.iter().zip(step).map(|(a, h)| a - h).collect();
    let mut d = scores(&up)? - scores(&dn)?;
    for (i, h) in step.iter().enumerate() {
        d.column_mut(i).scale_mut(0.5 / h);
    }
    Ok(d)
}

/// Replaces the sandwich blocks of `res` with those of the stacked
/// estimator. `res` must hold every stage of a completed fit.
pub(super) fn propagate(
    data: &MeticDataset,
    model: &ModelSpec,
    graph: &VineGraph,
    res: &mut FitResult,
    policy: &IntegrationPolicy,
) -> Result<()> {
    let lmat = data.design(&model.l)?;
    let wmat = data.design(&model.w)?;
    let term = data.terminal();
    let models = res.models()?;
    let u = pseudo_observations(&models, data, &lmat)?;
    let block = |v: usize| {
        MarginBlock::with_jumps(
            models[v].jump_times.clone(),
            data.times(v),
            data.events(v),
            lmat.clone(),
            models[v].g,
        )
    };
    let mut infl: Vec<DMatrix<f64>> = Vec::new();
    let mut margins: BTreeMap<usize, MarginSlot> = BTreeMap::new();
    let mut gammas: Vec<GammaSlot> = Vec::new();

    let tb = block(term)?;
    let t_theta = MarginBlock::pack(&models[term]);
    let lik = TerminalLikelihood::new(tb.clone());
    let (ainv, warn) = inverse_information(&lik, &t_theta)?;
    infl.push(&ainv * score_matrix(&lik, &t_theta)?);
    res.stages[0].warnings.extend(warn);
    margins.insert(term, MarginSlot { stage: 0, offset: 0, block: tb, theta: t_theta });

    for ci in 0..res.copulas.len() {
        let si = ci + 1;
        let c = res.copulas[ci].clone();
        let (corr, ainv, theta, p_gamma_off) = if c.stage == 1 {
            let js: Vec<usize> = c
                .labels
                .iter()
                .map(|l| parse_label(l).map(|(ab, _)| ab[0].min(ab[1]) - 1))
                .collect::<Result<_>>()?;
            let mut blocks = Vec::new();
            let mut theta = Vec::new();
            for &j in &js {
                blocks.push(block(j)?);
                theta.extend(MarginBlock::pack(&models[j]));
            }
            let g0 = theta.len();
            theta.extend(&c.gamma);
            let events = data.events(term).to_vec();
            let make = |ut: &[f64]| PairLikelihood::new(blocks.clone(), c.family, wmat.clone(), ut.to_vec(), events.clone());
            let lik = make(&u[term])?;
            let (ainv, warn) = inverse_information(&lik, &theta)?;
            res.stages[si].warnings.extend(warn);
            let step: Vec<f64> = u[term].iter().map(|&x| u_step(x)).collect();
            let d = per_subject_derivative(&u[term], &step, |ut| score_matrix(&make(ut)?, &theta))?;
            let t = &margins[&term];
            let cross = t.block.survival_cross(&t.theta, &d);
            let corr = score_matrix(&lik, &theta)? + cross * &infl[t.stage];
            let mut off = 0;
            for (&j, b) in js.iter().zip(&blocks) {
                let p = b.n_params();
                margins.insert(
                    j,
                    MarginSlot { stage: si, offset: off, block: b.clone(), theta: theta[off..off + p].to_vec() },
                );
                off += p;
            }
            let edges = js
                .iter()
                .map(|&j| super::first_tree_edge(graph, j))
                .collect::<Result<Vec<_>>>()?;
            gammas.push(GammaSlot { stage: si, offset: g0, edges, family: c.family, gamma: c.gamma.clone() });
            (corr, ainv, theta, g0)
        } else {
            let label = &c.labels[0];
            let e = (0..graph.n_edges())
                .find(|&e| graph.label_string(e) == *label)
                .ok_or_else(|| MeticError::MissingEdge(label.clone()))?;
            let anc = graph.ancestry(e);
            let ancestors: Vec<usize> = anc.by_tree.iter().flatten().copied().collect();
            let theta = c.gamma.clone();
            let make = |specs: &BTreeMap<usize, CopulaSpec>, u: &[Vec<f64>]| {
                EdgeLikelihood::new(graph, e, c.family, specs, u, data, wmat.clone(), policy)
            };
            let specs = specs_of(&gammas);
            let lik = make(&specs, &u)?;
            let (ainv, warn) = inverse_information(&lik, &theta)?;
            res.stages[si].warnings.extend(warn);
            let mut corr = score_matrix(&lik, &theta)?;
            for &v in &anc.nodes {
                let step: Vec<f64> = u[v].iter().map(|&x| u_step(x)).collect();
                let d = per_subject_derivative(&u[v], &step, |uv| {
                    let mut uu = u.clone();
                    uu[v] = uv.to_vec();
                    score_matrix(&make(&specs, &uu)?, &theta)
                })?;
                let m = &margins[&v];
                let cross = m.block.survival_cross(&m.theta, &d);
                corr += cross * infl[m.stage].rows(m.offset, m.block.n_params());
            }
            for gi in 0..gammas.len() {
                if !gammas[gi].edges.iter().any(|x| ancestors.contains(x)) {
                    continue;
                }
                for k in 0..gammas[gi].gamma.len() {
                    let g = gammas[gi].gamma[k];
                    let h = 1e-5 * g.abs().max(1.0);
                    let mut grad = |x: f64| -> Result<Vec<f64>> {
                        gammas[gi].gamma[k] = x;
                        let out = make(&specs_of(&gammas), &u).and_then(|l| l.evaluate(&theta, false));
                        gammas[gi].gamma[k] = g;
                        Ok(out?.gradient)
                    };
                    let (up, dn) = (grad(g + h)?, grad(g - h)?);
                    let col = DMatrix::from_fn(theta.len(), 1, |r, _| (up[r] - dn[r]) / (2.0 * h));
                    let row = infl[gammas[gi].stage].rows(gammas[gi].offset + k, 1).into_owned();
                    corr += col * row;
                }
            }
            gammas.push(GammaSlot { stage: si, offset: 0, edges: vec![e], family: c.family, gamma: c.gamma.clone() });
            (corr, ainv, theta, 0)
        };
        let stage_infl = &ainv * corr;
        let cov = finite_cov(&stage_infl * stage_infl.transpose())?;
        let gidx: Vec<usize> = (p_gamma_off..theta.len()).collect();
        res.copulas[ci].gamma_cov = Some(sub_block(&cov, &gidx));
        infl.push(stage_infl);
    }

    for m in res.margins.iter_mut() {
        let slot = &margins[&(m.event - 1)];
        let i = &infl[slot.stage];
        let p = m.beta.len();
        let rows = i.rows(slot.offset, p);
        let cov = finite_cov(&rows * rows.transpose())?;
        m.beta_cov = Some(sub_block(&cov, &(0..p).collect::<Vec<_>>()));
    }
    Ok(())
}
