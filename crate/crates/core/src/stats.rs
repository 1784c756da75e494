//! Diagnostics: correlation functions, densities, spectra, metastability
//! statistics, lead-time skill and strong errors.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::series::TimeSeries;
use crate::spectral::Fft1;

pub const REPORT_SCHEMA: &str = "mdclosure-report/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Acf,
    Ccf,
    Pdf,
    Spectrum,
    ExitTime,
    ReactionRate,
    RmseAncr,
    StrongError,
}

/// Tabulated diagnostic: one abscissa and one or more value columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub kind: ReportKind,
    pub abscissa: String,
    pub grid: Vec<f64>,
    pub columns: Vec<String>,
    /// `values[c][i]` is column `c` at `grid[i]`.
    pub values: Vec<Vec<f64>>,
    pub samples: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl StatsReport {
    fn new(kind: ReportKind, abscissa: &str, grid: Vec<f64>, columns: &[&str], values: Vec<Vec<f64>>, samples: usize) -> Self {
        StatsReport {
            kind,
            abscissa: abscissa.into(),
            grid,
            columns: columns.iter().map(|s| s.to_string()).collect(),
            values,
            samples,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().position(|c| c == name).map(|i| self.values[i].as_slice())
    }

    /// Grid strictly increasing and all values finite.
    pub fn check(&self) -> Result<()> {
        if self.grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Consistency("report grid is not strictly increasing".into()));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Consistency("report holds non-finite values".into()));
        }
        Ok(())
    }

    /// Write `<stem>.csv` and its metadata `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.csv")))?);
        write!(f, "{}", self.abscissa)?;
        for c in &self.columns {
            write!(f, ",{c}")?;
        }
        writeln!(f)?;
        for (i, g) in self.grid.iter().enumerate() {
            write!(f, "{g:e}")?;
            for col in &self.values {
                write!(f, ",{:e}", col[i])?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        let header = serde_json::json!({
            "schema": REPORT_SCHEMA,
            "kind": self.kind,
            "abscissa": self.abscissa,
            "columns": self.columns,
            "rows": self.grid.len(),
            "samples": self.samples,
            "meta": self.meta,
        });
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&header)?)?;
        Ok(())
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
}

/// `sum_t a_{t+tau} b_t` for `tau = -max_lag..=max_lag` by zero-padded FFT.
fn raw_cross(a: &[f64], b: &[f64], max_lag: usize) -> Vec<f64> {
    let n = a.len();
    let size = (n + max_lag + 1).next_power_of_two();
    let mut fa: Vec<C> = a.iter().map(|&v| C::new(v, 0.0)).chain(std::iter::repeat(C::default())).take(size).collect();
    let mut fb: Vec<C> = b.iter().map(|&v| C::new(v, 0.0)).chain(std::iter::repeat(C::default())).take(size).collect();
    let mut fft = Fft1::new(size);
    fft.forward(&mut fa);
    fft.forward(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y.conj();
    }
    fft.inverse(&mut fa);
    let s = 1.0 / size as f64;
    (0..=2 * max_lag)
        .map(|i| {
            let tau = i as isize - max_lag as isize;
            fa[tau.rem_euclid(size as isize) as usize].re * s
        })
        .collect()
}

fn centered(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (m, v) = mean_var(x);
    if !(v > 0.0) {
        return Err(Error::InvalidParameter("series has zero variance".into()));
    }
    Ok((x.iter().map(|a| a - m).collect(), v))
}

/// Normalized autocorrelation `<U_{t+tau} U_t> / <U_t U_t>` of the centered
/// series for `tau = 0..=max_lag` (biased estimator).
pub fn acf(x: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if x.len() <= max_lag {
        return Err(Error::InsufficientData(format!("{} samples for lag {max_lag}", x.len())));
    }
    let (u, _) = centered(x)?;
    let r = raw_cross(&u, &u, max_lag);
    let r0 = r[max_lag];
    Ok(r[max_lag..].iter().map(|v| v / r0).collect())
}

/// Cross-correlation `corr(a_t, b_{t+tau})` for `tau = -max_lag..=max_lag`.
pub fn ccf(a: &[f64], b: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("series of {} and {} samples", a.len(), b.len())));
    }
    if a.len() <= max_lag {
        return Err(Error::InsufficientData(format!("{} samples for lag {max_lag}", a.len())));
    }
    let (ua, va) = centered(a)?;
    let (ub, vb) = centered(b)?;
    let n = a.len() as f64;
    let r = raw_cross(&ub, &ua, max_lag);
    let norm = n * (va * vb).sqrt();
    Ok(r.into_iter().map(|v| v / norm).collect())
}

pub fn acf_report(ts: &TimeSeries, col: usize, max_lag: usize) -> Result<StatsReport> {
    let v = acf(&ts.column(col), max_lag)?;
    let grid = (0..=max_lag).map(|k| k as f64 * ts.dt()).collect();
    Ok(StatsReport::new(ReportKind::Acf, "lag", grid, &["acf"], vec![v], ts.n_steps())
        .with_meta("variable", ts.var_names()[col].clone())
        .with_meta("seed", ts.seed()))
}

/// Mean of the member ACFs; members shorter than `max_lag + 1` are an error.
pub fn acf_ensemble_report(members: &[TimeSeries], col: usize, max_lag: usize) -> Result<StatsReport> {
    let first = members
        .first()
        .ok_or_else(|| Error::InsufficientData("no ensemble members".into()))?;
    let mut mean = vec![0.0; max_lag + 1];
    let mut samples = 0;
    for m in members {
        for (a, v) in mean.iter_mut().zip(acf(&m.column(col), max_lag)?) {
            *a += v;
        }
        samples += m.n_steps();
    }
    mean.iter_mut().for_each(|a| *a /= members.len() as f64);
    let grid = (0..=max_lag).map(|k| k as f64 * first.dt()).collect();
    Ok(StatsReport::new(ReportKind::Acf, "lag", grid, &["acf"], vec![mean], samples)
        .with_meta("variable", first.var_names()[col].clone())
        .with_meta("members", members.len()))
}

pub fn ccf_report(a: &TimeSeries, ca: usize, b: &TimeSeries, cb: usize, max_lag: usize) -> Result<StatsReport> {
    let v = ccf(&a.column(ca), &b.column(cb), max_lag)?;
    let grid = (0..=2 * max_lag).map(|k| (k as f64 - max_lag as f64) * a.dt()).collect();
    Ok(StatsReport::new(ReportKind::Ccf, "lag", grid, &["ccf"], vec![v], a.n_steps())
        .with_meta("a", a.var_names()[ca].clone())
        .with_meta("b", b.var_names()[cb].clone()))
}

/// Silverman bandwidth `1.06 sigma n^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let (_, v) = mean_var(samples);
    if !(v > 0.0) {
        return Err(Error::InvalidParameter("samples have zero variance".into()));
    }
    Ok(1.06 * v.sqrt() * (samples.len() as f64).powf(-0.2))
}

const KDE_DIRECT_LIMIT: usize = 50_000_000;
const KDE_BINS: usize = 8192;

/// Gaussian kernel density on `grid`.
///
/// Small problems are summed directly; large ones first spread the samples
/// onto a fine uniform mesh by linear binning.
pub fn kde_pdf(samples: &[f64], grid: &[f64]) -> Result<StatsReport> {
    if samples.len() < 100 {
        return Err(Error::InsufficientData(format!("{} samples; KDE needs at least 100", samples.len())));
    }
    let h = silverman_bandwidth(samples)?;
    let dens = kde_with_bandwidth(samples, grid, h);
    Ok(StatsReport::new(ReportKind::Pdf, "x", grid.to_vec(), &["density"], vec![dens], samples.len())
        .with_meta("bandwidth", h))
}

/// [`kde_pdf`] on 512 points spanning the sample mean plus or minus five
/// standard deviations.
pub fn kde_pdf_auto(samples: &[f64]) -> Result<StatsReport> {
    let (m, v) = mean_var(samples);
    let s = v.sqrt();
    kde_pdf(samples, &linspace(m - 5.0 * s, m + 5.0 * s, 512))
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

pub fn kde_with_bandwidth(samples: &[f64], grid: &[f64], h: f64) -> Vec<f64> {
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * h);
    let kernel = |d: f64| (-0.5 * (d / h) * (d / h)).exp();
    if samples.len() * grid.len() <= KDE_DIRECT_LIMIT {
        let n = samples.len() as f64;
        return par::map(grid.len(), |g| samples.iter().map(|&s| kernel(grid[g] - s)).sum::<f64>() * norm / n);
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let delta = (hi - lo) / (KDE_BINS - 1) as f64;
    let mut w = vec![0.0; KDE_BINS];
    if delta > 0.0 {
        for &s in samples {
            let pos = (s - lo) / delta;
            let i = (pos.floor() as usize).min(KDE_BINS - 2);
            let f = pos - i as f64;
            w[i] += 1.0 - f;
            w[i + 1] += f;
        }
    } else {
        w[0] = samples.len() as f64;
    }
    let n = samples.len() as f64;
    par::map(grid.len(), |g| {
        w.iter()
            .enumerate()
            .filter(|(_, &c)| c > 0.0)
            .map(|(i, &c)| c * kernel(grid[g] - (lo + i as f64 * delta)))
            .sum::<f64>()
            * norm
            / n
    })
}

/// Trapezoid integral of tabulated values.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2).zip(values.windows(2)).map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1])).sum()
}

/// L1 distance between two densities on a shared grid.
pub fn l1_distance(grid: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let d: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).abs()).collect();
    trapezoid(grid, &d)
}

/// Per-mode `<|v_k|>^2` from a series whose columns hold (re, im) pairs.
pub fn energy_spectrum(modes: &TimeSeries) -> Result<StatsReport> {
    if modes.n_vars() % 2 != 0 {
        return Err(Error::Shape("complex modes need an even number of columns".into()));
    }
    let k = modes.n_vars() / 2;
    let n = modes.n_steps() as f64;
    let mut mean_abs = vec![0.0; k];
    for t in 0..modes.n_steps() {
        let r = modes.row(t);
        for j in 0..k {
            mean_abs[j] += r[2 * j].hypot(r[2 * j + 1]);
        }
    }
    let spec = mean_abs.iter().map(|a| (a / n) * (a / n)).collect();
    let grid = (1..=k).map(|j| j as f64).collect();
    Ok(StatsReport::new(ReportKind::Spectrum, "mode", grid, &["energy"], vec![spec], modes.n_steps()))
}

/// When an exit-time clock stops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitConvention {
    /// From core entry to the first crossing of the saddle `x = 0`.
    Saddle,
    /// From core entry to entry into the opposite core.
    Sojourn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellSpec {
    /// Well bottoms at `+center` and `-center`.
    #[serde(default = "d_center")]
    pub center: f64,
    /// Core half-width around each bottom.
    #[serde(default = "d_band")]
    pub band: f64,
    #[serde(default = "d_conv")]
    pub convention: ExitConvention,
}

fn d_center() -> f64 {
    1.0
}
fn d_band() -> f64 {
    0.3
}
fn d_conv() -> ExitConvention {
    ExitConvention::Saddle
}

impl Default for WellSpec {
    fn default() -> Self {
        WellSpec {
            center: d_center(),
            band: d_band(),
            convention: d_conv(),
        }
    }
}

impl WellSpec {
    pub fn with_band(band: f64) -> Self {
        WellSpec {
            band,
            ..Self::default()
        }
    }

    fn core(&self, x: f64) -> i8 {
        if (x - self.center).abs() < self.band {
            1
        } else if (x + self.center).abs() < self.band {
            -1
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WellEvents {
    /// Completed exit durations, in time units.
    pub exits: Vec<f64>,
    /// Core-to-core transitions.
    pub transitions: usize,
    pub total_time: f64,
}

/// Scan a scalar path for well exits and core-to-core transitions.
pub fn well_events(x: &[f64], dt: f64, well: &WellSpec) -> WellEvents {
    let mut exits = Vec::new();
    let mut transitions = 0;
    let mut last: i8 = 0;
    let mut side: i8 = 0;
    let mut start: Option<usize> = None;
    for (t, &v) in x.iter().enumerate() {
        // saddle check first so a jump straight into the other core still
        // closes the running exit
        if well.convention == ExitConvention::Saddle {
            if let Some(s) = start {
                if v * (side as f64) < 0.0 {
                    exits.push((t - s) as f64 * dt);
                    start = None;
                }
            }
        }
        let w = well.core(v);
        if w != 0 {
            if last != 0 && w != last {
                transitions += 1;
                if well.convention == ExitConvention::Sojourn {
                    if let Some(s) = start {
                        exits.push((t - s) as f64 * dt);
                    }
                    start = None;
                }
            }
            last = w;
            if start.is_none() || w != side {
                start = Some(t);
                side = w;
            }
        }
    }
    WellEvents {
        exits,
        transitions,
        total_time: x.len() as f64 * dt,
    }
}

const MIN_EVENTS: usize = 10;

/// Mean well exit time.
pub fn mean_exit_time(x: &[f64], dt: f64, well: &WellSpec) -> Result<f64> {
    let ev = well_events(x, dt, well);
    if ev.exits.is_empty() || ev.transitions == 0 {
        return Err(Error::InsufficientData("no completed well exits".into()));
    }
    if ev.transitions < MIN_EVENTS {
        log::warn!("only {} well transitions; the mean exit time is unreliable", ev.transitions);
    }
    Ok(ev.exits.iter().sum::<f64>() / ev.exits.len() as f64)
}

/// Core-to-core transitions per unit time.
pub fn reaction_rate(x: &[f64], dt: f64, well: &WellSpec) -> Result<f64> {
    let ev = well_events(x, dt, well);
    if ev.transitions == 0 {
        return Err(Error::InsufficientData("no well transitions".into()));
    }
    if ev.transitions < MIN_EVENTS {
        log::warn!("only {} well transitions; the reaction rate is unreliable", ev.transitions);
    }
    Ok(ev.transitions as f64 / ev.total_time)
}

/// Exit time and rate pooled over several independent paths.
pub fn pooled_well_statistics(paths: &[&[f64]], dt: f64, well: &WellSpec) -> Result<(f64, f64)> {
    let evs: Vec<WellEvents> = paths.iter().map(|p| well_events(p, dt, well)).collect();
    let exits: Vec<f64> = evs.iter().flat_map(|e| e.exits.iter().copied()).collect();
    let trans: usize = evs.iter().map(|e| e.transitions).sum();
    let total: f64 = evs.iter().map(|e| e.total_time).sum();
    if exits.is_empty() || trans == 0 {
        return Err(Error::InsufficientData("no well transitions".into()));
    }
    Ok((exits.iter().sum::<f64>() / exits.len() as f64, trans as f64 / total))
}

fn check_pairs(pred: &[TimeSeries], truth: &[TimeSeries]) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} truths", pred.len(), truth.len())));
    }
    for (p, t) in pred.iter().zip(truth) {
        if p.n_steps() != t.n_steps() || p.n_vars() != t.n_vars() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs truth {}x{}",
                p.n_steps(),
                p.n_vars(),
                t.n_steps(),
                t.n_vars()
            )));
        }
    }
    Ok(())
}

/// RMSE and anomaly correlation at every lead time. Columns play the role of
/// the spatial sample; `climatology` is the per-column truth mean.
pub fn rmse_ancr(pred: &[TimeSeries], truth: &[TimeSeries], climatology: &[f64]) -> Result<StatsReport> {
    check_pairs(pred, truth)?;
    let d = truth[0].n_vars();
    if climatology.len() != d {
        return Err(Error::Shape(format!("climatology of {} for {d} columns", climatology.len())));
    }
    let leads = truth[0].n_steps();
    let members = pred.len() as f64;
    let per_lead = par::map(leads, |t| {
        let mut se = 0.0;
        let mut corr = 0.0;
        for (p, q) in pred.iter().zip(truth) {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for j in 0..d {
                let (x, y) = (p.get(t, j), q.get(t, j));
                se += (x - y) * (x - y);
                let (a, b) = (x - climatology[j], y - climatology[j]);
                ab += a * b;
                aa += a * a;
                bb += b * b;
            }
            if aa > 0.0 && bb > 0.0 {
                corr += ab / (aa * bb).sqrt();
            }
        }
        ((se / (members * d as f64)).sqrt(), corr / members)
    });
    let grid = (0..leads).map(|t| t as f64 * truth[0].dt()).collect();
    let (rmse, ancr): (Vec<f64>, Vec<f64>) = per_lead.into_iter().unzip();
    Ok(StatsReport::new(ReportKind::RmseAncr, "lead", grid, &["rmse", "ancr"], vec![rmse, ancr], pred.len()))
}

/// Mean over pairs of the running maximum of `|x_hat_t - x_t|` (Euclidean
/// over components), for every horizon `T`.
pub fn strong_error_curve(pred: &[TimeSeries], truth: &[TimeSeries]) -> Result<StatsReport> {
    check_pairs(pred, truth)?;
    let n = truth[0].n_steps();
    let d = truth[0].n_vars();
    let members = par::map(pred.len(), |i| {
        let mut run = 0.0f64;
        (0..n)
            .map(|t| {
                let e = (0..d).map(|j| (pred[i].get(t, j) - truth[i].get(t, j)).powi(2)).sum::<f64>().sqrt();
                run = run.max(e);
                run
            })
            .collect::<Vec<f64>>()
    });
    let mut mean = vec![0.0; n];
    for m in &members {
        mean.iter_mut().zip(m).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|v| *v /= pred.len() as f64);
    let grid = (0..n).map(|t| t as f64 * truth[0].dt()).collect();
    Ok(StatsReport::new(ReportKind::StrongError, "horizon", grid, &["strong_error"], vec![mean], pred.len()))
}

/// `E[max_{t <= T} |x_hat_t - x_t|]` over the full common length.
pub fn strong_error(pred: &[TimeSeries], truth: &[TimeSeries]) -> Result<f64> {
    let r = strong_error_curve(pred, truth)?;
    Ok(*r.values[0].last().expect("nonempty series"))
}

/// Physical-space samples `u(x_j) = 2 Re sum_k v_k e^{i q_k x_j}` of a series
/// of positive Fourier modes `k = 1..K`, on `points` equispaced nodes.
pub fn modes_to_physical(modes: &TimeSeries, length: f64, points: usize) -> Result<TimeSeries> {
    if modes.n_vars() % 2 != 0 || points == 0 {
        return Err(Error::Shape("complex modes need an even number of columns".into()));
    }
    let k = modes.n_vars() / 2;
    let basis: Vec<Vec<C>> = (0..points)
        .map(|j| {
            let x = length * j as f64 / points as f64;
            (1..=k).map(|q| C::from_polar(1.0, 2.0 * std::f64::consts::PI * q as f64 * x / length)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(modes.n_steps() * points);
    for t in 0..modes.n_steps() {
        let r = modes.row(t);
        for b in &basis {
            let s: f64 = (0..k).map(|q| (C::new(r[2 * q], r[2 * q + 1]) * b[q]).re).sum();
            out.push(2.0 * s);
        }
    }
    let names = (0..points).map(|j| format!("u{j}")).collect();
    TimeSeries::new(out, points, modes.dt(), names, modes.seed())
}
