//! Time series, delay vectors and supervised delay datasets.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniformly sampled multivariate real series, stored row-major
/// (`n_steps × n_vars`). Complex quantities occupy two adjacent columns
/// (real, imaginary).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    values: Vec<f64>,
    n_vars: usize,
    dt: f64,
    var_names: Vec<String>,
    seed: u64,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, n_vars: usize, dt: f64, var_names: Vec<String>, seed: u64) -> Result<Self> {
        if n_vars == 0 || values.is_empty() || values.len() % n_vars != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form rows of {n_vars} variables",
                values.len()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if var_names.len() != n_vars {
            return Err(Error::Shape(format!("{} names for {n_vars} variables", var_names.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Blowup {
                step: i / n_vars,
                detail: format!("non-finite entry in column {}", i % n_vars),
            });
        }
        Ok(TimeSeries { values, n_vars, dt, var_names, seed })
    }

    /// Names `prefix0, prefix1, ...`.
    pub fn with_default_names(values: Vec<f64>, n_vars: usize, dt: f64, prefix: &str, seed: u64) -> Result<Self> {
        let names = (0..n_vars).map(|j| format!("{prefix}{j}")).collect();
        Self::new(values, n_vars, dt, names, seed)
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() / self.n_vars
    }
    pub fn n_vars(&self) -> usize {
        self.n_vars
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_vars..(t + 1) * self.n_vars]
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.n_vars + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().skip(j).step_by(self.n_vars).copied().collect()
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<TimeSeries> {
        if start >= end || end > self.n_steps() {
            return Err(Error::InvalidParameter(format!(
                "row range {start}..{end} outside 0..{}",
                self.n_steps()
            )));
        }
        Ok(TimeSeries {
            values: self.values[start * self.n_vars..end * self.n_vars].to_vec(),
            n_vars: self.n_vars,
            dt: self.dt,
            var_names: self.var_names.clone(),
            seed: self.seed,
        })
    }

    pub fn select(&self, cols: &[usize]) -> Result<TimeSeries> {
        if cols.is_empty() || cols.iter().any(|&c| c >= self.n_vars) {
            return Err(Error::Shape(format!("column selection {cols:?} of {} variables", self.n_vars)));
        }
        let mut values = Vec::with_capacity(self.n_steps() * cols.len());
        for t in 0..self.n_steps() {
            let r = self.row(t);
            values.extend(cols.iter().map(|&c| r[c]));
        }
        Ok(TimeSeries {
            values,
            n_vars: cols.len(),
            dt: self.dt,
            var_names: cols.iter().map(|&c| self.var_names[c].clone()).collect(),
            seed: self.seed,
        })
    }

    pub fn column_range(&self, range: std::ops::Range<usize>) -> Result<TimeSeries> {
        self.select(&range.collect::<Vec<_>>())
    }
}

/// `(x_{t-m:t}, theta_{t-m:t})`, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayVector {
    pub x_hist: Vec<Vec<f64>>,
    pub theta_hist: Vec<Vec<f64>>,
    pub m: usize,
}

impl DelayVector {
    pub fn new(x_hist: Vec<Vec<f64>>, theta_hist: Vec<Vec<f64>>) -> Result<Self> {
        if x_hist.is_empty() || x_hist.len() != theta_hist.len() {
            return Err(Error::Shape(format!(
                "history lengths {} and {}",
                x_hist.len(),
                theta_hist.len()
            )));
        }
        let m = x_hist.len() - 1;
        let (dx, dth) = (x_hist[0].len(), theta_hist[0].len());
        if x_hist.iter().any(|r| r.len() != dx) || theta_hist.iter().any(|r| r.len() != dth) {
            return Err(Error::Shape("ragged delay history".into()));
        }
        Ok(DelayVector { x_hist, theta_hist, m })
    }

    pub fn d_x(&self) -> usize {
        self.x_hist[0].len()
    }
    pub fn d_theta(&self) -> usize {
        self.theta_hist[0].len()
    }

    /// Time-major layout: for each lag, oldest first, x then theta.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity((self.m + 1) * (self.d_x() + self.d_theta()));
        for (x, th) in self.x_hist.iter().zip(&self.theta_hist) {
            out.extend_from_slice(x);
            out.extend_from_slice(th);
        }
        out
    }

    pub fn unflatten(flat: &[f64], m: usize, d_x: usize, d_theta: usize) -> Result<Self> {
        let w = d_x + d_theta;
        if flat.len() != (m + 1) * w {
            return Err(Error::Shape(format!(
                "flat length {} is not (m+1)·(d_x+d_theta) = {}",
                flat.len(),
                (m + 1) * w
            )));
        }
        let x_hist = flat.chunks_exact(w).map(|c| c[..d_x].to_vec()).collect();
        let theta_hist = flat.chunks_exact(w).map(|c| c[d_x..].to_vec()).collect();
        Ok(DelayVector { x_hist, theta_hist, m })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelaySource {
    pub system: String,
    pub seed: u64,
    pub dt: f64,
}

/// Supervised pairs `(z_{s,m}, theta_{s+1})` for `s = m..N-2`.
///
/// Rows `[x_t, theta_t]` are stored once; each input is a contiguous window of
/// `m+1` rows, so datasets are cheap to split and share.
#[derive(Clone, Debug)]
pub struct DelayDataset {
    rows: Arc<Vec<f64>>,
    targets: Arc<Vec<f64>>,
    d_x: usize,
    d_theta_in: usize,
    d_out: usize,
    m: usize,
    start: usize,
    len: usize,
    pub source: DelaySource,
}

pub fn make_delay_dataset(x: &TimeSeries, theta: &TimeSeries, m: usize) -> Result<DelayDataset> {
    check_aligned(x, theta)?;
    let n = x.n_steps();
    if n < 2 || m > n - 2 {
        return Err(Error::InsufficientData(format!("memory {m} needs more than {n} samples")));
    }
    let (dx, dth) = (x.n_vars(), theta.n_vars());
    let mut rows = Vec::with_capacity(n * (dx + dth));
    for t in 0..n {
        rows.extend_from_slice(x.row(t));
        rows.extend_from_slice(theta.row(t));
    }
    Ok(DelayDataset {
        rows: Arc::new(rows),
        targets: Arc::new(theta.values().to_vec()),
        d_x: dx,
        d_theta_in: dth,
        d_out: dth,
        m,
        start: 0,
        len: n - m - 1,
        source: DelaySource {
            system: "unspecified".into(),
            seed: x.seed(),
            dt: x.dt(),
        },
    })
}

fn check_aligned(x: &TimeSeries, theta: &TimeSeries) -> Result<()> {
    if x.n_steps() != theta.n_steps() {
        return Err(Error::Alignment(format!(
            "x has {} steps, theta has {}",
            x.n_steps(),
            theta.n_steps()
        )));
    }
    if (x.dt() - theta.dt()).abs() > 1e-12 * x.dt().abs() {
        return Err(Error::Alignment(format!("dt {} vs {}", x.dt(), theta.dt())));
    }
    Ok(())
}

impl DelayDataset {
    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn d_x(&self) -> usize {
        self.d_x
    }
    /// Theta width inside each input cell; 0 for an x-only dataset.
    pub fn d_theta_in(&self) -> usize {
        self.d_theta_in
    }
    /// Per-cell input width.
    pub fn cell_width(&self) -> usize {
        self.d_x + self.d_theta_in
    }
    pub fn input_dim(&self) -> usize {
        (self.m + 1) * self.cell_width()
    }
    pub fn output_dim(&self) -> usize {
        self.d_out
    }

    /// Time index of the newest cell of pair `i`.
    pub fn newest_index(&self, i: usize) -> usize {
        self.start + i + self.m
    }

    /// Flattened input of pair `i`.
    pub fn input(&self, i: usize) -> &[f64] {
        let w = self.cell_width();
        let s = self.newest_index(i);
        &self.rows[(s - self.m) * w..(s + 1) * w]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        let s = self.newest_index(i) + 1;
        &self.targets[s * self.d_out..(s + 1) * self.d_out]
    }

    pub fn delay_vector(&self, i: usize) -> DelayVector {
        DelayVector::unflatten(self.input(i), self.m, self.d_x, self.d_theta_in)
            .expect("window shape is fixed at construction")
    }

    /// Row `t` of the underlying `[x_t, theta_t]` table (absolute index).
    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.cell_width();
        &self.rows[t * w..(t + 1) * w]
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len() / self.cell_width()
    }

    pub fn with_system(mut self, system: &str) -> Self {
        self.source.system = system.to_string();
        self
    }

    /// Same pairs with the theta history removed from every input cell.
    pub fn resolved_only(&self) -> DelayDataset {
        let w = self.cell_width();
        let rows: Vec<f64> = self.rows.chunks_exact(w).flat_map(|r| r[..self.d_x].iter().copied()).collect();
        DelayDataset {
            rows: Arc::new(rows),
            d_theta_in: 0,
            ..self.clone()
        }
    }

    /// Pairs `range` of this dataset.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Result<DelayDataset> {
        if range.start > range.end || range.end > self.len {
            return Err(Error::InvalidParameter(format!("pair range {range:?} of {}", self.len)));
        }
        Ok(DelayDataset {
            start: self.start + range.start,
            len: range.end - range.start,
            ..self.clone()
        })
    }

    /// Leading `1 - frac` of the pairs for training, trailing `frac` for validation.
    pub fn split_validation(&self, frac: f64) -> Result<(DelayDataset, DelayDataset)> {
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::InvalidParameter(format!("validation fraction {frac}")));
        }
        let n_val = (self.len as f64 * frac).round() as usize;
        let n_train = self.len - n_val;
        if n_train == 0 {
            return Err(Error::InsufficientData("validation split leaves no training pairs".into()));
        }
        Ok((self.subset(0..n_train)?, self.subset(n_train..self.len)?))
    }
}
