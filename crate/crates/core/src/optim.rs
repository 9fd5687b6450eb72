//! Limited-memory BFGS minimizer with a monotone backtracking line search.
//!
//! The objective returns its value and gradient together. An evaluation
//! that errors or is non-finite is treated as infeasible and the step is
//! shortened, so the objective never increases across accepted iterates.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub max_iter: usize,
    /// Stop when the largest gradient component falls below this.
    pub grad_tol: f64,
    /// Stop when no parameter moves by more than this (relative to
    /// `max(1, |x|)`) over two consecutive iterations.
    pub rel_tol: f64,
    pub memory: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-5,
            rel_tol: 1e-6,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub message: String,
    /// Objective value after each accepted iterate.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f` starting from `x0`. Fails only if the objective cannot be
/// evaluated at `x0`; hitting the iteration limit is reported through
/// `converged = false`.
pub fn minimize<F>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<OptimReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    let mut trace = vec![fx];
    if n == 0 {
        return Ok(OptimReport {
            x,
            value: fx,
            grad_norm: 0.0,
            iterations: 0,
            evaluations,
            converged: true,
            message: "no free parameters".into(),
            trace,
        });
    }
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut small_steps = 0;
    let mut message = String::from("iteration limit reached");
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..cfg.max_iter {
        iterations = it;
        if inf_norm(&g) <= cfg.grad_tol {
            converged = true;
            message = "gradient tolerance met".into();
            break;
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = match mem.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / inf_norm(&g).max(1.0),
        };
        for v in d.iter_mut() {
            *v *= gamma;
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            d = g.iter().map(|v| -v / inf_norm(&g).max(1.0)).collect();
            slope = dot(&g, &d);
        }

        // backtracking line search with Armijo condition
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            evaluations += 1;
            if let Ok((fn_, gn)) = f(&xn) {
                if fn_.is_finite()
                    && gn.iter().all(|v| v.is_finite())
                    && fn_ <= fx + 1e-4 * step * slope
                {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if mem.is_empty() {
                message = "line search failed along steepest descent".into();
                converged = inf_norm(&g) <= 10.0 * cfg.grad_tol;
                break;
            }
            mem.clear();
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let change = s
            .iter()
            .zip(&x)
            .fold(0.0f64, |m, (si, xi)| m.max(si.abs() / xi.abs().max(1.0)));
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if mem.len() == cfg.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fn_;
        g = gn;
        trace.push(fx);
        if change < cfg.rel_tol {
            small_steps += 1;
            if small_steps >= 2 {
                converged = true;
                message = "relative step tolerance met".into();
                iterations = it + 1;
                break;
            }
        } else {
            small_steps = 0;
        }
        iterations = it + 1;
    }
    Ok(OptimReport {
        grad_norm: inf_norm(&g),
        x,
        value: fx,
        iterations,
        evaluations,
        converged,
        message,
        trace,
    })
}
