#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vine_metic::data::MeticDataset;

/// Proportional-hazards data with one binary covariate `Z1` and no
/// censoring, wrapped as a J=3 dataset whose terminal event is the PH time.
pub fn cox_data(n: usize, beta: f64, seed: u64) -> MeticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t3 = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        let zi = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let e: f64 = -(1.0 - rng.random::<f64>()).ln();
        t3.push(e * (-beta * zi).exp());
        z.push(vec![zi]);
    }
    let x = vec![t3.iter().map(|t| t * 0.5).collect(), t3.iter().map(|t| t * 0.25).collect(), t3];
    let d = vec![vec![true; n]; 3];
    MeticDataset::new(x, d, z, vec!["Z1".into()]).unwrap()
}

/// Cox partial likelihood maximizer for one covariate, by Newton's method.
/// Assumes no tied event times.
pub fn cox_newton(times: &[f64], events: &[bool], z: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut b = 0.0;
    for _ in 0..100 {
        let (mut score, mut info) = (0.0, 0.0);
        // risk set sums from the latest time backwards
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &i in order.iter().rev() {
            let r = (b * z[i]).exp();
            s0 += r;
            s1 += r * z[i];
            s2 += r * z[i] * z[i];
            if events[i] {
                let m = s1 / s0;
                score += z[i] - m;
                info += s2 / s0 - m * m;
            }
        }
        let step = score / info;
        b += step;
        if step.abs() < 1e-13 {
            break;
        }
    }
    b
}

/// Breslow cumulative baseline hazard at each event time (sorted), at `Z = 0`.
pub fn breslow(times: &[f64], events: &[bool], z: &[f64], b: f64) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = Vec::new();
    let mut cum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if !events[i] {
            continue;
        }
        let risk: f64 = order[k..].iter().map(|&r| (b * z[r]).exp()).sum();
        cum += 1.0 / risk;
        out.push((times[i], cum));
    }
    out
}
