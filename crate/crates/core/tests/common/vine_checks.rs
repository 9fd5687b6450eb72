use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use astro_float::{BigFloat, Consts, RoundingMode};
use vine_metic::copulas::{CopulaFamily, CopulaSpec};
use vine_metic::likelihood::IntegrationPolicy;
use vine_metic::simulation::{Sim1Config, Sim2Config};
use vine_metic::vine::{build_cvine, build_dvine, vine_log_density, VineGraph};

pub type Vine = (VineGraph, BTreeMap<usize, CopulaSpec>, Vec<f64>);

/// Three-variable vines used by the normalization checks, with a design row.
pub fn test_vines() -> Vec<(&'static str, Vine)> {
    let (g2, s2) = Sim2Config::default().vine().unwrap();
    let (g1, s1) = Sim1Config::default().vine().unwrap();
    let dv = build_dvine(3).unwrap();
    let mixed = BTreeMap::from([
        (0, CopulaSpec::constant(CopulaFamily::Gaussian, 0.6).unwrap()),
        (1, CopulaSpec::constant(CopulaFamily::Gumbel, 2.0).unwrap()),
        (2, CopulaSpec::constant(CopulaFamily::Frank, -4.0).unwrap()),
    ]);
    let cv = build_cvine(3).unwrap();
    let weak = BTreeMap::from([
        (0, CopulaSpec::constant(CopulaFamily::Clayton, 0.8).unwrap()),
        (1, CopulaSpec::constant(CopulaFamily::Frank, 3.0).unwrap()),
        (2, CopulaSpec::constant(CopulaFamily::Gaussian, -0.3).unwrap()),
    ]);
    vec![
        ("nested Clayton", (g2, s2, vec![1.0])),
        ("Sim-I at Z=(0,0)", (g1, s1, vec![1.0, 0.0, 0.0])),
        ("D-vine Gaussian/Gumbel/Frank", (dv, mixed, vec![1.0])),
        ("C-vine Clayton/Frank/Gaussian", (cv, weak, vec![1.0])),
    ]
}

fn policy(nodes: usize) -> IntegrationPolicy {
    IntegrationPolicy { nodes, ..Default::default() }
}

/// `∫_{[0,1]^3} c(u) du` by the smoothed tensor Gauss–Legendre rule.
pub fn normalization(v: &Vine, nodes: usize) -> f64 {
    let (g, s, w) = v;
    policy(nodes)
        .unit_nodes(3, 0)
        .iter()
        .map(|(u, lw)| (vine_log_density(g, s, u, w).unwrap() + lw).exp())
        .sum()
}

/// `∫ c(u) du_{-var}` with `u_var = at`; one for uniform margins.
pub fn margin_integral(v: &Vine, var: usize, at: f64, nodes: usize) -> f64 {
    let (g, s, w) = v;
    policy(nodes)
        .unit_nodes(2, 0)
        .iter()
        .map(|(p, lw)| {
            let mut u = p.clone();
            u.insert(var, at);
            (vine_log_density(g, s, &u, w).unwrap() + lw).exp()
        })
        .sum()
}

const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

fn big(x: f64) -> BigFloat {
    BigFloat::from_f64(x, PREC)
}

fn to_f64(x: &BigFloat) -> f64 {
    x.to_string().parse().expect("finite value")
}

/// Trivariate Clayton survival copula `(Σ u_j^{-θ} - 2)^{-1/θ}`, the nested
/// Clayton model with equal generators, in 256-bit arithmetic so that third
/// differences keep their digits.
pub fn clayton3(u: &[BigFloat; 3], theta: f64, cc: &mut Consts) -> BigFloat {
    let t = big(theta);
    let mut s = big(-2.0);
    for x in u {
        let lx = x.ln(PREC, RM, cc);
        s = s.add(&lx.mul(&t, PREC, RM).neg().exp(PREC, RM, cc), PREC, RM);
    }
    s.ln(PREC, RM, cc).div(&t, PREC, RM).neg().exp(PREC, RM, cc)
}

/// Central-difference `∂³C/∂u1∂u2∂u3` with one Richardson step.
pub fn fd_density(mut c: impl FnMut(&[BigFloat; 3]) -> BigFloat, u: [f64; 3], h: f64) -> f64 {
    let mut d = |h: f64| {
        let mut acc = big(0.0);
        for s in 0..8u32 {
            let p: [BigFloat; 3] = std::array::from_fn(|k| {
                let off = if (s >> k) & 1 == 1 { -h } else { h };
                big(u[k]).add(&big(off), PREC, RM)
            });
            let v = c(&p);
            acc = if s.count_ones() % 2 == 1 { acc.sub(&v, PREC, RM) } else { acc.add(&v, PREC, RM) };
        }
        acc.div(&big(8.0 * h * h * h), PREC, RM)
    };
    let (coarse, fine) = (d(h), d(h / 2.0));
    to_f64(&fine.mul(&big(4.0), PREC, RM).sub(&coarse, PREC, RM).div(&big(3.0), PREC, RM))
}

/// Largest relative gap between the vine density and the finite-difference
/// nested Clayton density over `points` random interior points.
pub fn nested_clayton_gap(theta: f64, points: usize, seed: u64) -> f64 {
    let (g, s) = Sim2Config { theta, ..Default::default() }.vine().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut cc = Consts::new().expect("constants cache");
    for _ in 0..points {
        let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let vine = vine_log_density(&g, &s, &u, &[1.0]).unwrap().exp();
        let fd = fd_density(|p| clayton3(p, theta, &mut cc), u, 1e-4);
        worst = worst.max((vine - fd).abs() / fd);
    }
    worst
}
