//! Observed METIC data: per-subject event times, indicators and covariates.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MeticError, Result};

/// Selection of design columns from the raw covariates. `"1"` is the
/// intercept; any other entry names a covariate column such as `"Z1"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Design(pub Vec<String>);

impl Design {
    pub fn intercept() -> Self {
        Self(vec!["1".into()])
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn columns<S: AsRef<str>>(cols: &[S]) -> Self {
        Self(cols.iter().map(|c| c.as_ref().to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn resolve(&self, z_names: &[String]) -> Result<Vec<Option<usize>>> {
        self.0
            .iter()
            .map(|c| {
                if c == "1" {
                    Ok(None)
                } else {
                    z_names.iter().position(|n| n == c).map(Some).ok_or_else(|| {
                        MeticError::ModelMismatch(format!(
                            "design column '{c}' not among covariates [{}]",
                            z_names.join(", ")
                        ))
                    })
                }
            })
            .collect()
    }

    /// Design matrix, one row per subject.
    pub fn matrix(&self, z_names: &[String], z: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let idx = self.resolve(z_names)?;
        Ok(z
            .iter()
            .map(|row| idx.iter().map(|k| k.map_or(1.0, |k| row[k])).collect())
            .collect())
    }
}

/// Observed data `(X_1, Δ_1, ..., X_J, Δ_J, Z)` for `n` subjects; event `J`
/// (the last one) is terminal.
///
/// Times and indicators are stored event-major: `x[j][i]` is `X_{j+1}` of
/// subject `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeticDataset {
    x: Vec<Vec<f64>>,
    delta: Vec<Vec<bool>>,
    z: Vec<Vec<f64>>,
    z_names: Vec<String>,
}

impl MeticDataset {
    pub fn new(
        x: Vec<Vec<f64>>,
        delta: Vec<Vec<bool>>,
        z: Vec<Vec<f64>>,
        z_names: Vec<String>,
    ) -> Result<Self> {
        let data = Self {
            x,
            delta,
            z,
            z_names,
        };
        data.validate()?;
        Ok(data)
    }

    fn validate(&self) -> Result<()> {
        let jn = self.x.len();
        if jn == 0 || self.delta.len() != jn {
            return Err(MeticError::Data("times and indicators disagree on J".into()));
        }
        let n = self.z.len();
        if self.x.iter().any(|c| c.len() != n)
            || self.delta.iter().any(|c| c.len() != n)
        {
            return Err(MeticError::Data("columns have different lengths".into()));
        }
        let last = jn - 1;
        for i in 0..n {
            if self.z[i].len() != self.z_names.len() {
                return Err(MeticError::Data(format!(
                    "subject {i}: {} covariates, expected {}",
                    self.z[i].len(),
                    self.z_names.len()
                )));
            }
            if let Some(v) = self.z[i].iter().find(|v| !v.is_finite()) {
                return Err(MeticError::Data(format!("subject {i}: non-finite covariate {v}")));
            }
            for j in 0..jn {
                let t = self.x[j][i];
                if !(t.is_finite() && t > 0.0) {
                    return Err(MeticError::Data(format!(
                        "subject {i}: X{} = {t} is not a positive time",
                        j + 1
                    )));
                }
                if j < last && t > self.x[last][i] {
                    return Err(MeticError::Data(format!(
                        "subject {i}: X{} = {t} exceeds terminal time {}",
                        j + 1,
                        self.x[last][i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    /// Number of event types `J`.
    pub fn n_events(&self) -> usize {
        self.x.len()
    }

    pub fn terminal(&self) -> usize {
        self.x.len() - 1
    }

    pub fn times(&self, j: usize) -> &[f64] {
        &self.x[j]
    }

    pub fn events(&self, j: usize) -> &[bool] {
        &self.delta[j]
    }

    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.z
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.z_names
    }

    pub fn design(&self, d: &Design) -> Result<Vec<Vec<f64>>> {
        d.matrix(&self.z_names, &self.z)
    }

    /// Fraction of subjects with `Δ_j = 0`, per event.
    pub fn censoring_rates(&self) -> Vec<f64> {
        self.delta
            .iter()
            .map(|d| d.iter().filter(|&&e| !e).count() as f64 / d.len().max(1) as f64)
            .collect()
    }

    /// Dataset made of the listed subjects, in order (repeats allowed).
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect(),
            delta: self.delta.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect(),
            z: idx.iter().map(|&i| self.z[i].clone()).collect(),
            z_names: self.z_names.clone(),
        }
    }

    /// Same subjects restricted to the listed events (terminal last).
    pub fn select_events(&self, events: &[usize]) -> Self {
        Self {
            x: events.iter().map(|&j| self.x[j].clone()).collect(),
            delta: events.iter().map(|&j| self.delta[j].clone()).collect(),
            z: self.z.clone(),
            z_names: self.z_names.clone(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = Vec::new();
        for j in 1..=self.n_events() {
            h.push(format!("X{j}"));
            h.push(format!("D{j}"));
        }
        h.extend(self.z_names.iter().cloned());
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for i in 0..self.n() {
            let mut row = Vec::with_capacity(2 * self.n_events() + self.z_names.len());
            for j in 0..self.n_events() {
                row.push(format!("{}", self.x[j][i]));
                row.push(if self.delta[j][i] { "1" } else { "0" }.to_string());
            }
            row.extend(self.z[i].iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the `X1,D1,...,XJ,DJ,Z...` format. Errors name the offending line.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut jn = 0;
        while 2 * jn + 1 < header.len()
            && header[2 * jn] == format!("X{}", jn + 1)
            && header[2 * jn + 1] == format!("D{}", jn + 1)
        {
            jn += 1;
        }
        if jn == 0 {
            return Err(MeticError::Data(
                "line 1: header must start with X1,D1,...".into(),
            ));
        }
        let z_names = header[2 * jn..].to_vec();
        let mut x = vec![Vec::new(); jn];
        let mut delta = vec![Vec::new(); jn];
        let mut z = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                MeticError::Data(format!("line {line}: {e}"))
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let num = |k: usize| -> Result<f64> {
                rec[k].parse::<f64>().map_err(|_| {
                    MeticError::Data(format!(
                        "line {line}: column {} has non-numeric value '{}'",
                        header[k], &rec[k]
                    ))
                })
            };
            for j in 0..jn {
                x[j].push(num(2 * j)?);
                delta[j].push(match &rec[2 * j + 1] {
                    "1" => true,
                    "0" => false,
                    other => {
                        return Err(MeticError::Data(format!(
                            "line {line}: indicator D{} must be 0 or 1, got '{other}'",
                            j + 1
                        )))
                    }
                });
            }
            z.push((2 * jn..header.len()).map(num).collect::<Result<Vec<_>>>()?);
        }
        Self::new(x, delta, z, z_names).map_err(|e| match e {
            MeticError::Data(msg) => MeticError::Data(with_line_number(msg)),
            other => other,
        })
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Validation messages refer to 0-based subjects; subject `i` is on line `i + 2`.
fn with_line_number(msg: String) -> String {
    if let Some(rest) = msg.strip_prefix("subject ") {
        if let Some((num, tail)) = rest.split_once(':') {
            if let Ok(i) = num.parse::<usize>() {
                return format!("line {}:{tail}", i + 2);
            }
        }
    }
    msg
}
