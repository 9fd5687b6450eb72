mod common;

use std::collections::BTreeMap;

use vine_metic::copulas::{CopulaFamily, CopulaSpec};
use vine_metic::data::{Design, MeticDataset};
use vine_metic::error::MeticError;
use vine_metic::estimation::{
    bootstrap_variance, fit_all, fit_edge, fit_pair, fit_terminal, parse_label, sandwich_variance,
    tau_unconditional, FitConfig, FitResult, ModelSpec, VarianceMethod,
};
use vine_metic::likelihood::{MarginBlock, StageLikelihood, TerminalLikelihood};
use vine_metic::marginals::{nelson_aalen, pseudo_observations, TransformationG};
use vine_metic::simulation::{
    simulate_nested_clayton, simulate_sim1, simulate_vine, Censoring, Sim1Config, Sim2Config,
    VineSimConfig,
};
use vine_metic::vine::{build_cvine, VineConfig};

fn quick() -> FitConfig {
    FitConfig {
        variance: VarianceMethod::None,
        ..Default::default()
    }
}

fn clayton_vine(j: usize, alpha: f64) -> VineConfig {
    let graph = build_cvine(j).unwrap();
    let specs: BTreeMap<usize, CopulaSpec> = (0..graph.n_edges())
        .map(|e| (e, CopulaSpec::constant(CopulaFamily::Clayton, alpha).unwrap()))
        .collect();
    VineConfig::from_graph(&graph, &specs)
}

fn vine_data(j: usize, alpha: f64, n: usize, seed: u64) -> MeticDataset {
    let cfg = VineSimConfig {
        n,
        seed,
        vine: clayton_vine(j, alpha),
        weibull: (0..j).map(|k| (1.5, 1.0 + 0.2 * k as f64)).collect(),
        censoring: Censoring::Exponential { mean: 3.0 },
    };
    simulate_vine(&cfg).unwrap().data
}

fn plain_model(j: usize, family: CopulaFamily) -> ModelSpec {
    let mut vine = clayton_vine(j, 1.0);
    for e in vine.edges.iter_mut() {
        e.family = family;
        e.gamma.clear();
    }
    ModelSpec {
        vine,
        g: vec![TransformationG::Ph; j],
        l: Design::empty(),
        w: Design::intercept(),
    }
}

#[test]
fn cox_partial_likelihood_oracle() {
    let data = common::cox_data(200, 0.7, 11);
    let term = data.terminal();
    let z: Vec<f64> = data.covariates().iter().map(|r| r[0]).collect();
    let oracle = common::cox_newton(data.times(term), data.events(term), &z);
    let cfg = FitConfig {
        grad_tol: 1e-9,
        rel_tol: 0.0,
        ..quick()
    };
    let fit = fit_terminal(&data, TransformationG::Ph, &Design::columns(&["Z1"]), &cfg).unwrap();
    assert!((fit.margin.beta[0] - oracle).abs() < 1e-4, "{} vs {oracle}", fit.margin.beta[0]);

    let base = common::breslow(data.times(term), data.events(term), &z, fit.margin.beta[0]);
    let model = fit.margin.model().unwrap();
    let cum = model.cumulative();
    assert_eq!(cum.len(), base.len());
    for ((c, jt), (t, b)) in cum.iter().zip(&model.jump_times).zip(&base) {
        assert_eq!(jt, t);
        assert!(((-c).exp() - (-b).exp()).abs() < 1e-6);
    }
}

#[test]
fn no_covariate_terminal_is_nelson_aalen() {
    let data = vine_data(3, 1.0, 150, 2);
    let term = data.terminal();
    let fit = fit_terminal(&data, TransformationG::Ph, &Design::empty(), &quick()).unwrap();
    let (times, inc) = nelson_aalen(data.times(term), data.events(term));
    let na: Vec<f64> = inc.iter().scan(0.0, |c, d| { *c += d; Some(*c) }).collect();
    let cum = fit.margin.model().unwrap().cumulative();
    assert_eq!(fit.margin.jump_times, times);
    for (a, b) in cum.iter().zip(&na) {
        assert!(((-a).exp() - (-b).exp()).abs() < 1e-6);
    }
    // exp(-NA) and the product-limit estimate differ only at O(1/n)
    let n = data.n() as f64;
    let mut km = 1.0;
    let mut at_risk = n;
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.sort_by(|&a, &b| data.times(term)[a].total_cmp(&data.times(term)[b]));
    let mut k = 0;
    for &i in &order {
        if data.events(term)[i] {
            km *= 1.0 - 1.0 / at_risk;
            assert!((km - (-cum[k]).exp()).abs() < 2.0 / n.sqrt());
            k += 1;
        }
        at_risk -= 1.0;
    }
}

#[test]
fn exponential_log_jump_variance() {
    // m tied events among many subjects at risk: var(log d) = (1 - d) / m
    let (m, n) = (100, 10_000);
    let t3: Vec<f64> = (0..n).map(|i| if i < m { 1.0 } else { 2.0 }).collect();
    let d3: Vec<bool> = (0..n).map(|i| i < m).collect();
    let x = vec![t3.iter().map(|t| t / 2.0).collect(), t3.iter().map(|t| t / 4.0).collect(), t3];
    let d = vec![vec![true; n], vec![true; n], d3];
    let data = MeticDataset::new(x, d, vec![Vec::new(); n], Vec::new()).unwrap();
    let block = MarginBlock::from_data(data.times(2), data.events(2), vec![Vec::new(); n], TransformationG::Ph).unwrap();
    let lik = TerminalLikelihood::new(block);
    let dhat = m as f64 / n as f64;
    let (cov, warnings) = sandwich_variance(&lik, &[dhat.ln()]).unwrap();
    assert!(warnings.is_empty());
    let v = cov[(0, 0)];
    assert!((v - (1.0 - dhat) / m as f64).abs() < 1e-3 * v);
    assert!((v * m as f64 - 1.0).abs() < 0.1);
}

#[test]
fn sandwich_matches_inverse_information_when_correct() {
    let data = common::cox_data(1000, 0.5, 4);
    let l = Design::columns(&["Z1"]);
    let fit = fit_terminal(&data, TransformationG::Ph, &l, &FitConfig::default()).unwrap();
    let sand = fit.margin.beta_cov.as_ref().unwrap()[0][0];
    // model-based variance from the profile: inverse Cox information
    let z: Vec<f64> = data.covariates().iter().map(|r| r[0]).collect();
    let term = data.terminal();
    let b = fit.margin.beta[0];
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.sort_by(|&a, &c| data.times(term)[a].total_cmp(&data.times(term)[c]));
    let (mut s0, mut s1, mut info) = (0.0, 0.0, 0.0);
    for &i in order.iter().rev() {
        let r = (b * z[i]).exp();
        s0 += r;
        s1 += r * z[i];
        let m = s1 / s0;
        info += m - m * m;
    }
    let model = 1.0 / info;
    assert!((sand / model - 1.0).abs() < 0.2, "sandwich {sand} vs model {model}");
}

#[test]
fn pair_fit_recovers_clayton() {
    let data = vine_data(3, 2.0, 400, 8);
    let term = fit_terminal(&data, TransformationG::Ph, &Design::empty(), &quick()).unwrap();
    let tm = term.margin.model().unwrap();
    let p = fit_pair(0, &data, &tm, CopulaFamily::Clayton, TransformationG::Ph, &Design::empty(), &Design::intercept(), &FitConfig::default()).unwrap();
    let se = p.copula.gamma_se().unwrap()[0];
    assert!((p.copula.gamma[0] - 2f64.ln()).abs() < 3.0 * se, "{} (se {se})", p.copula.gamma[0]);
    assert_eq!(p.record.uses, vec!["theta_3".to_string()]);
}

#[test]
fn time_scale_equivariance() {
    let data = vine_data(3, 1.5, 200, 5);
    let c = 7.5;
    let x: Vec<Vec<f64>> = (0..3).map(|j| data.times(j).iter().map(|t| t * c).collect()).collect();
    let d: Vec<Vec<bool>> = (0..3).map(|j| data.events(j).to_vec()).collect();
    let scaled = MeticDataset::new(x, d, data.covariates().to_vec(), data.covariate_names().to_vec()).unwrap();
    let model = plain_model(3, CopulaFamily::Clayton);
    let a = fit_all(&data, &model, &quick()).unwrap();
    let b = fit_all(&scaled, &model, &quick()).unwrap();
    for (ca, cb) in a.copulas.iter().zip(&b.copulas) {
        assert!((ca.gamma[0] - cb.gamma[0]).abs() < 1e-4);
    }
    for (ma, mb) in a.margins.iter().zip(&b.margins) {
        for (la, lb) in ma.log_jumps.iter().zip(&mb.log_jumps) {
            assert!((la - lb).abs() < 1e-4);
        }
        for (ta, tb) in ma.jump_times.iter().zip(&mb.jump_times) {
            assert!((ta * c - tb).abs() < 1e-9);
        }
    }
}

#[test]
fn single_pool_group_equals_pair_fit() {
    let data = vine_data(3, 1.5, 150, 9);
    let model = plain_model(3, CopulaFamily::Clayton);
    let a = fit_all(&data, &model, &quick()).unwrap();
    let b = fit_all(&data, &model, &FitConfig { pooled: vec![vec![1]], ..quick() }).unwrap();
    assert_eq!(a.copulas, b.copulas);
    assert_eq!(a.margins, b.margins);
}

#[test]
fn pooled_fit_shares_one_parameter() {
    let data = vine_data(3, 2.0, 200, 10);
    let model = plain_model(3, CopulaFamily::Clayton);
    let r = fit_all(&data, &model, &FitConfig { pooled: vec![vec![1, 2]], ..quick() }).unwrap();
    assert!(r.failure.is_none());
    assert_eq!(r.stages[1].step, "pooled");
    assert_eq!(r.copulas[0].labels, vec!["(1,3)", "(2,3)"]);
    let (_, specs) = r.vine().unwrap();
    assert_eq!(specs[&0], specs[&1]);
    let reg = fit_all(&data, &model, &quick()).unwrap();
    let (g1, g2) = (reg.copulas[0].gamma[0], reg.copulas[1].gamma[0]);
    let gp = r.copulas[0].gamma[0];
    assert!(gp >= g1.min(g2) - 0.05 && gp <= g1.max(g2) + 0.05, "{gp} vs {g1}, {g2}");
}

#[test]
fn mixed_family_pool_is_rejected() {
    let data = vine_data(3, 1.5, 50, 1);
    let mut model = plain_model(3, CopulaFamily::Clayton);
    model.vine.edges[1].family = CopulaFamily::Frank;
    let e = fit_all(&data, &model, &FitConfig { pooled: vec![vec![1, 2]], ..quick() }).unwrap_err();
    assert!(matches!(e, MeticError::Config(_)), "{e}");
}

#[test]
fn missing_ancestor_is_a_dependency_error() {
    let data = vine_data(3, 1.5, 50, 1);
    let (graph, _) = clayton_vine(3, 1.0).build().unwrap();
    let top = graph.tree(2)[0];
    let term = fit_terminal(&data, TransformationG::Ph, &Design::empty(), &quick()).unwrap();
    let models = vec![term.margin.model().unwrap(); 3];
    let e = fit_edge(&graph, top, CopulaFamily::Clayton, &BTreeMap::new(), &models, &data, &Design::empty(), &Design::intercept(), &quick()).unwrap_err();
    assert!(matches!(e, MeticError::MissingEdge(_)), "{e}");
}

#[test]
fn four_variable_stage_order() {
    let data = vine_data(4, 1.5, 120, 3);
    let r = fit_all(&data, &plain_model(4, CopulaFamily::Clayton), &quick()).unwrap();
    assert!(r.failure.is_none(), "{:?}", r.failure);
    let log: Vec<(usize, &str, &str)> = r.stages.iter().map(|s| (s.stage, s.step.as_str(), s.target.as_str())).collect();
    assert_eq!(log[0], (1, "terminal", "T4"));
    assert_eq!(&log[1..4].iter().map(|s| s.2).collect::<Vec<_>>(), &["(1,4)", "(2,4)", "(3,4)"]);
    assert!(log[4..6].iter().all(|s| s.0 == 2 && s.1 == "edge"));
    assert_eq!((log[6].0, log[6].1), (3, "edge"));
    assert_eq!(log.len(), 7);
    // every stage uses only estimates produced before it
    let mut produced = vec!["theta_4".to_string()];
    produced.extend((1..=4).map(|v| format!("U_{v}")));
    for s in &r.stages {
        for u in &s.uses {
            assert!(produced.contains(u), "{} uses {u} before it exists", s.target);
        }
        produced.push(format!("gamma_{}", s.target));
    }
    let top = &r.stages[6];
    assert_eq!(top.uses.iter().filter(|u| u.starts_with("gamma_")).count(), 5);
}

#[test]
fn fit_is_deterministic() {
    let data = simulate_sim1(&Sim1Config { n: 200, seed: 2, ..Default::default() }).unwrap();
    let a = fit_all(&data, &ModelSpec::sim1(), &FitConfig::default()).unwrap();
    let b = fit_all(&data, &ModelSpec::sim1(), &FitConfig::default()).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn sim1_smoke_within_three_se() {
    let cfg = Sim1Config { n: 500, seed: 21, ..Default::default() };
    let data = simulate_sim1(&cfg).unwrap();
    let r = fit_all(&data, &ModelSpec::sim1(), &FitConfig::default()).unwrap();
    assert!(r.failure.is_none(), "{:?}", r.failure);
    for m in &r.margins {
        let se = m.beta_se().unwrap();
        for k in 0..2 {
            let truth = cfg.beta[m.event - 1][k];
            assert!((m.beta[k] - truth).abs() < 3.0 * se[k], "beta_{} {k}: {} (se {})", m.event, m.beta[k], se[k]);
        }
    }
    let truth = [("(1,3)", cfg.gamma_13), ("(2,3)", cfg.gamma_23), ("(1,2|3)", cfg.gamma_12_3)];
    for (label, g) in truth {
        let c = r.copula(label).unwrap();
        let se = c.gamma_se().unwrap();
        for k in 0..3 {
            assert!((c.gamma[k] - g[k]).abs() < 3.0 * se[k], "{label} {k}: {} (se {})", c.gamma[k], se[k]);
        }
    }
    let back = FitResult::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.parameters.len(), 15);
}

#[test]
fn conditional_independence_edge_is_near_zero() {
    let mut vine = clayton_vine(3, 2.0);
    vine.edges[2].family = CopulaFamily::Frank;
    vine.edges[2].gamma = vec![0.0];
    let cfg = VineSimConfig {
        n: 2000,
        seed: 6,
        vine,
        weibull: vec![(1.5, 1.0), (1.5, 1.2), (1.5, 1.4)],
        censoring: Censoring::Exponential { mean: 3.0 },
    };
    let data = simulate_vine(&cfg).unwrap().data;
    let mut model = plain_model(3, CopulaFamily::Clayton);
    model.vine.edges[2].family = CopulaFamily::Frank;
    let r = fit_all(&data, &model, &quick()).unwrap();
    let (tau, _) = r.copula("(1,2|3)").unwrap().tau_at(&[1.0]);
    assert!(tau.abs() <= 0.05, "tau {tau}");
}

#[test]
fn bootstrap_is_deterministic_and_degenerate_data_has_zero_variance() {
    let n = 30;
    let x = vec![vec![0.5; n], vec![0.7; n], vec![1.0; n]];
    let d = vec![vec![true; n]; 3];
    let data = MeticDataset::new(x, d, vec![Vec::new(); n], Vec::new()).unwrap();
    let stat = |d: &MeticDataset| Ok(vec![d.times(0).iter().sum::<f64>() / d.n() as f64]);
    let cov = bootstrap_variance(&data, 50, 1, stat).unwrap();
    assert_eq!(cov[0][0], 0.0);

    let data = vine_data(3, 1.0, 60, 2);
    let a = bootstrap_variance(&data, 60, 9, stat).unwrap();
    let b = bootstrap_variance(&data, 60, 9, stat).unwrap();
    assert_eq!(a, b);
    assert!(a[0][0] > 0.0);
    assert!(bootstrap_variance(&data, 49, 9, stat).is_err());
    let failing = |_: &MeticDataset| -> vine_metic::Result<Vec<f64>> { Err(MeticError::Variance("x".into())) };
    assert!(matches!(bootstrap_variance(&data, 50, 9, failing), Err(MeticError::Variance(_))));
}

#[test]
fn bootstrap_agrees_with_sandwich_for_terminal_beta() {
    let data = common::cox_data(1000, 0.5, 17);
    let l = Design::columns(&["Z1"]);
    let fit = fit_terminal(&data, TransformationG::Ph, &l, &FitConfig::default()).unwrap();
    let sand = fit.margin.beta_se().unwrap()[0];
    let cov = bootstrap_variance(&data, 60, 3, |d| Ok(fit_terminal(d, TransformationG::Ph, &l, &quick())?.margin.beta)).unwrap();
    let ratio = cov[0][0].sqrt() / sand;
    assert!((0.7..=1.4).contains(&ratio), "ratio {ratio}");
}

#[test]
fn bootstrap_variance_through_fit_all() {
    let data = vine_data(3, 1.5, 80, 4);
    let cfg = FitConfig { variance: VarianceMethod::Bootstrap, bootstrap: 50, ..Default::default() };
    let r = fit_all(&data, &plain_model(3, CopulaFamily::Clayton), &cfg).unwrap();
    assert!(r.failure.is_none(), "{:?}", r.failure);
    assert!(r.copulas.iter().all(|c| c.gamma_se().unwrap()[0] > 0.0));
    assert!(r.parameters.iter().all(|p| p.method == VarianceMethod::Bootstrap));
    let e = fit_all(&data, &plain_model(3, CopulaFamily::Clayton), &FitConfig { bootstrap: 10, ..cfg }).unwrap_err();
    assert!(matches!(e, MeticError::Config(_)));
}

#[test]
fn unconditional_tau_at_nested_clayton_truth() {
    let (graph, specs) = Sim2Config::default().vine().unwrap();
    let t = tau_unconditional(&graph, &specs, &[1.0], 100_000, 1).unwrap();
    assert!((t.tau - 0.7).abs() < 0.01, "{t:?}");
    assert!(t.se > 0.0 && t.se < 0.01);
    let (g4, s4) = clayton_vine(4, 1.0).build().unwrap();
    assert!(tau_unconditional(&g4, &s4, &[1.0], 10_000, 1).is_err());
}

#[test]
fn sim2_fit_runs_and_pools() {
    let data = simulate_nested_clayton(&Sim2Config { n: 300, seed: 5, ..Default::default() }).unwrap();
    let r = fit_all(&data, &ModelSpec::sim2(), &FitConfig { pooled: vec![vec![1, 2]], ..quick() }).unwrap();
    assert!(r.failure.is_none());
    let (tau, _) = r.copulas[0].tau_at(&[1.0]);
    assert!((tau - 0.7).abs() < 0.1, "{tau}");
}

#[test]
fn model_data_mismatch_lists_columns() {
    let data = vine_data(3, 1.0, 30, 1);
    let e = fit_all(&data, &plain_model(4, CopulaFamily::Clayton), &quick()).unwrap_err();
    assert!(matches!(e, MeticError::ModelMismatch(_)));
    assert!(e.to_string().contains("X1"), "{e}");
}

#[test]
fn stage_failure_keeps_earlier_results() {
    // one iteration is never enough for the terminal margin, so Stage 1 fails
    let data = vine_data(3, 1.0, 60, 1);
    let cfg = FitConfig { max_iter: 1, grad_tol: 0.0, rel_tol: 0.0, ..quick() };
    let r = fit_all(&data, &plain_model(3, CopulaFamily::Clayton), &cfg).unwrap();
    let f = r.failure.expect("one iteration cannot converge");
    assert!(f.numeric);
    assert!(r.stages.len() < 4);
}

#[test]
fn labels_parse() {
    assert_eq!(parse_label("(1,2|3)").unwrap(), ([1, 2], vec![3]));
    assert_eq!(parse_label("(2,4)").unwrap(), ([2, 4], vec![]));
    assert_eq!(parse_label("(1,3|2,4)").unwrap(), ([1, 3], vec![2, 4]));
    assert!(parse_label("1,2").is_err());
}

#[test]
fn stage_likelihood_scores_have_zero_mean_at_optimum() {
    let data = common::cox_data(300, 0.3, 8);
    let l = Design::columns(&["Z1"]);
    let fit = fit_terminal(&data, TransformationG::Ph, &l, &FitConfig { grad_tol: 1e-9, rel_tol: 0.0, ..quick() }).unwrap();
    let term = data.terminal();
    let block = MarginBlock::from_data(data.times(term), data.events(term), data.design(&l).unwrap(), TransformationG::Ph).unwrap();
    let lik = TerminalLikelihood::new(block);
    let mut theta = fit.margin.beta.clone();
    theta.extend(&fit.margin.log_jumps);
    let ev = lik.evaluate(&theta, true).unwrap();
    assert!(ev.gradient.iter().all(|g| g.abs() < 1e-5));
}

#[test]
fn survival_cross_matches_finite_differences() {
    let data = common::cox_data(80, 0.7, 5);
    let term = data.terminal();
    let l = Design::columns(&["Z1"]);
    let lmat = data.design(&l).unwrap();
    let fit = fit_terminal(&data, TransformationG::Po, &l, &quick()).unwrap();
    let m = fit.margin.model().unwrap();
    let block = MarginBlock::with_jumps(m.jump_times.clone(), data.times(term), data.events(term), lmat.clone(), m.g)
        .unwrap();
    let theta = MarginBlock::pack(&m);
    let d = nalgebra::DMatrix::from_fn(2, data.n(), |r, i| if r == 0 { 1.0 } else { (i as f64).sin() });
    let got = block.survival_cross(&theta, &d);
    let u_of = |th: &[f64]| {
        let mm = block.unpack(th).unwrap();
        pseudo_observations(&[mm], &data.select_events(&[term]), &lmat).unwrap().remove(0)
    };
    for k in [0, 1, 5, theta.len() - 1] {
        let h = 1e-6;
        let (mut up, mut dn) = (theta.clone(), theta.clone());
        up[k] += h;
        dn[k] -= h;
        let (a, b) = (u_of(&up), u_of(&dn));
        for r in 0..2 {
            let fd: f64 = (0..data.n()).map(|i| d[(r, i)] * (a[i] - b[i]) / (2.0 * h)).sum();
            assert!((got[(r, k)] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "param {k} row {r}: {} vs {fd}", got[(r, k)]);
        }
    }
}

/// The pair-stage β's inherit the terminal fit's uncertainty through
/// `Û_J`; only the propagated sandwich reproduces the bootstrap spread.
#[test]
fn propagated_sandwich_agrees_with_bootstrap() {
    let data = simulate_sim1(&Sim1Config { n: 300, seed: 8, ..Default::default() }).unwrap();
    let model = ModelSpec::sim1();
    let full = fit_all(&data, &model, &FitConfig::default()).unwrap();
    assert!(full.failure.is_none());
    let boot = fit_all(
        &data,
        &model,
        &FitConfig { variance: VarianceMethod::Bootstrap, bootstrap: 60, seed: 4, ..Default::default() },
    )
    .unwrap();
    assert!(boot.failure.is_none());
    for (a, b) in full.parameters.iter().zip(&boot.parameters).filter(|(a, _)| a.name.starts_with("beta_1")) {
        let ratio = a.se.unwrap() / b.se.unwrap();
        assert!((0.7..1.4).contains(&ratio), "{}: sandwich {} vs bootstrap {}", a.name, a.se.unwrap(), b.se.unwrap());
    }
    let local = fit_pair(
        0,
        &data,
        &full.margin(3).unwrap().model().unwrap(),
        CopulaFamily::Gumbel,
        TransformationG::Ph,
        &model.l,
        &model.w,
        &FitConfig::default(),
    )
    .unwrap();
    let boot_se = boot.margin(1).unwrap().beta_se().unwrap()[0];
    assert!(local.margins[0].beta_se().unwrap()[0] < 0.7 * boot_se);
}
