//! Semiparametric transformation marginals
//! `S(t | Z) = exp(-G(Λ(t) e^{β'L}))` with a step baseline `Λ`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::MeticDataset;
use crate::error::{MeticError, Result};
use crate::numeric::{clip_prob, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransformationG {
    /// `G(x) = x`, proportional hazards.
    #[serde(rename = "ph", alias = "PH")]
    Ph,
    /// `G(x) = ln(1 + x)`, proportional odds.
    #[serde(rename = "po", alias = "PO")]
    Po,
}

impl TransformationG {
    pub fn g<T: Real>(&self, x: T) -> T {
        match self {
            Self::Ph => x,
            Self::Po => x.ln_1p(),
        }
    }

    /// `ln Ġ(x)`.
    pub fn log_gdot<T: Real>(&self, x: T) -> T {
        match self {
            Self::Ph => T::from(0.0),
            Self::Po => -x.ln_1p(),
        }
    }
}

impl std::str::FromStr for TransformationG {
    type Err = MeticError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ph" => Ok(Self::Ph),
            "po" => Ok(Self::Po),
            other => Err(MeticError::Config(format!("unknown transformation '{other}'"))),
        }
    }
}

/// Marginal model of one event time: `θ = (β, Λ)` and the transformation `G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalModel {
    pub beta: Vec<f64>,
    pub jump_times: Vec<f64>,
    /// `ln dΛ_l` at each jump time.
    pub log_jumps: Vec<f64>,
    pub g: TransformationG,
}

impl MarginalModel {
    pub fn new(
        beta: Vec<f64>,
        jump_times: Vec<f64>,
        log_jumps: Vec<f64>,
        g: TransformationG,
    ) -> Result<Self> {
        if jump_times.len() != log_jumps.len() {
            return Err(MeticError::Dimension(format!(
                "{} jump times but {} jump sizes",
                jump_times.len(),
                log_jumps.len()
            )));
        }
        if jump_times.iter().any(|t| !(t.is_finite() && *t > 0.0))
            || jump_times.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(MeticError::Data(
                "jump times must be positive and strictly increasing".into(),
            ));
        }
        Ok(Self {
            beta,
            jump_times,
            log_jumps,
            g,
        })
    }

    /// Starting model: `β = 0` and Nelson–Aalen increments at the observed
    /// event times of `(times, events)`.
    pub fn nelson_aalen(times: &[f64], events: &[bool], n_beta: usize, g: TransformationG) -> Self {
        let (jump_times, increments) = nelson_aalen(times, events);
        Self {
            beta: vec![0.0; n_beta],
            jump_times,
            log_jumps: increments.iter().map(|d| d.ln()).collect(),
            g,
        }
    }

    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Number of jump times `<= t`.
    pub fn jumps_upto(&self, t: f64) -> usize {
        self.jump_times.partition_point(|&s| s <= t)
    }

    pub fn eta(&self, l: &[f64]) -> f64 {
        self.beta.iter().zip(l).map(|(b, x)| b * x).sum()
    }

    /// Cumulative baseline at each jump time.
    pub fn cumulative(&self) -> Vec<f64> {
        self.log_jumps
            .iter()
            .scan(0.0, |acc, lj| {
                *acc += lj.exp();
                Some(*acc)
            })
            .collect()
    }

    pub fn write_baseline_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "cumulative"])?;
        for (t, c) in self.jump_times.iter().zip(self.cumulative()) {
            w.write_record([format!("{t}"), format!("{c}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Distinct event times (ascending) and their event counts.
pub fn distinct_event_times(times: &[f64], events: &[bool]) -> (Vec<f64>, Vec<usize>) {
    let mut obs: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(_, &d)| d)
        .map(|(&t, _)| t)
        .collect();
    obs.sort_by(f64::total_cmp);
    let mut out_t: Vec<f64> = Vec::new();
    let mut out_d: Vec<usize> = Vec::new();
    for t in obs {
        if out_t.last() == Some(&t) {
            *out_d.last_mut().unwrap() += 1;
        } else {
            out_t.push(t);
            out_d.push(1);
        }
    }
    (out_t, out_d)
}

/// Nelson–Aalen increments `d_l / #{i: X_i >= t_l}`.
pub fn nelson_aalen(times: &[f64], events: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let (jt, counts) = distinct_event_times(times, events);
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let inc = jt
        .iter()
        .zip(&counts)
        .map(|(t, &d)| {
            let at_risk = n - sorted.partition_point(|s| s < t);
            d as f64 / at_risk as f64
        })
        .collect();
    (jt, inc)
}

/// `Λ(t) = Σ_{t_l <= t} dΛ_l`.
pub fn cum_baseline(m: &MarginalModel, t: f64) -> f64 {
    m.log_jumps[..m.jumps_upto(t)].iter().map(|l| l.exp()).sum()
}

/// `S(t | Z) = exp(-G(Λ(t) e^{β'L}))`.
pub fn marginal_survival(m: &MarginalModel, t: f64, l: &[f64]) -> f64 {
    (-m.g.g(cum_baseline(m, t) * m.eta(l).exp())).exp()
}

/// Log of the discrete density `S · Ġ(Λ e^{β'L}) · e^{β'L} · dΛ` at jump `l`.
pub fn log_density_at_jump(m: &MarginalModel, jump: usize, l: &[f64]) -> f64 {
    let eta = m.eta(l);
    let x = cum_baseline(m, m.jump_times[jump]) * eta.exp();
    -m.g.g(x) + m.g.log_gdot(x) + eta + m.log_jumps[jump]
}

pub fn marginal_density_at_jump(m: &MarginalModel, jump: usize, l: &[f64]) -> f64 {
    log_density_at_jump(m, jump, l).exp()
}

/// Pseudo-observations `U_{j,i} = S_j(X_{j,i} | Z_i)`, clipped away from 0
/// and 1; indexed `[event][subject]`.
pub fn pseudo_observations(
    models: &[MarginalModel],
    data: &MeticDataset,
    l_design: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    if models.len() != data.n_events() {
        return Err(MeticError::ModelMismatch(format!(
            "{} marginal models for {} events",
            models.len(),
            data.n_events()
        )));
    }
    Ok(models
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let cum = m.cumulative();
            data.times(j)
                .iter()
                .zip(l_design)
                .map(|(&t, l)| {
                    let k = m.jumps_upto(t);
                    let lam = if k == 0 { 0.0 } else { cum[k - 1] };
                    clip_prob((-m.g.g(lam * m.eta(l).exp())).exp())
                })
                .collect()
        })
        .collect())
}

/// Per-subject position of each observed time among a model's jump times.
#[derive(Debug, Clone)]
pub struct EventIndex {
    /// Number of jump times `<= X_i`.
    pub upto: Vec<usize>,
    /// Jump index of `X_i` when `Δ_i = 1`.
    pub own: Vec<Option<usize>>,
}

impl EventIndex {
    pub fn new(jump_times: &[f64], times: &[f64], events: &[bool]) -> Result<Self> {
        let mut upto = Vec::with_capacity(times.len());
        let mut own = Vec::with_capacity(times.len());
        for (i, (&t, &d)) in times.iter().zip(events).enumerate() {
            let k = jump_times.partition_point(|&s| s <= t);
            upto.push(k);
            if d {
                if k == 0 || jump_times[k - 1] != t {
                    return Err(MeticError::ModelMismatch(format!(
                        "subject {i}: observed event at {t} has no jump parameter"
                    )));
                }
                own.push(Some(k - 1));
            } else {
                own.push(None);
            }
        }
        Ok(Self { upto, own })
    }
}
