//! Empirical checks of the strong-convergence rate and of the path-wise
//! prediction horizon on the double-well Langevin system, where the exact
//! drift is known.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{ClosureEstimator, EstimatorKind};
use crate::par;
use crate::predict::{closed_loop_run, history_at, ClosureRun, NoisePolicy};
use crate::rng::Rng;
use crate::series::TimeSeries;
use crate::systems::langevin::{langevin_drift, simulate_langevin_from, simulate_langevin_with_noise};
use crate::systems::{LangevinParams, SystemSpec};

/// Langevin closure with the exact velocity update plus a bounded bias:
/// `y + dt (g(x, y) + epsilon sin(x + y))`. Memory 0, cells `(x, y)`.
#[derive(Clone, Debug)]
pub struct PerturbedDrift {
    pub params: LangevinParams,
    pub epsilon: f64,
    rv: Vec<f64>,
}

impl PerturbedDrift {
    pub fn new(params: LangevinParams, epsilon: f64) -> Self {
        let rv = vec![params.sigma_y * params.sigma_y * params.dt];
        PerturbedDrift { params, epsilon, rv }
    }
}

impl ClosureEstimator for PerturbedDrift {
    fn kind(&self) -> EstimatorKind {
        EstimatorKind::Analytic
    }
    fn memory(&self) -> usize {
        0
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn residual_variance(&self) -> &[f64] {
        &self.rv
    }
    fn predict_into(&self, input: &[f64], out: &mut [f64]) -> Result<()> {
        if input.len() != 2 || out.len() != 1 {
            return Err(Error::Shape(format!("input {} / output {} for (x, y) -> y", input.len(), out.len())));
        }
        let (x, y) = (input[0], input[1]);
        let (_, fy) = langevin_drift(x, y, &self.params);
        let bias = if self.epsilon == 0.0 { 0.0 } else { self.epsilon * (x + y).sin() };
        out[0] = y + self.params.dt * (fy + bias);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateExperiment {
    #[serde(default)]
    pub langevin: LangevinParams,
    /// Perturbation amplitudes for the slope in epsilon.
    pub epsilons: Vec<f64>,
    /// Horizons `T dt` for the growth exponent.
    pub horizons: Vec<f64>,
    /// Horizon at which the epsilon slope is fitted.
    #[serde(default = "d_one")]
    pub epsilon_horizon: f64,
    /// Amplitude used for the growth-in-T fit.
    pub growth_epsilon: f64,
    pub ensemble: usize,
    #[serde(default = "d_boot")]
    pub bootstrap: usize,
    pub seed: u64,
    /// Steps between consecutive initial conditions drawn from one long path.
    #[serde(default = "d_spacing")]
    pub spacing: usize,
}

fn d_one() -> f64 {
    1.0
}
fn d_boot() -> usize {
    1000
}
fn d_spacing() -> usize {
    500
}

impl RateExperiment {
    /// Grids used by the acceptance check.
    pub fn standard(seed: u64) -> Self {
        RateExperiment {
            langevin: LangevinParams::default(),
            epsilons: vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
            horizons: vec![0.25, 0.5, 1.0, 1.5, 2.0],
            epsilon_horizon: 1.0,
            growth_epsilon: 1e-2,
            ensemble: 200,
            bootstrap: 1000,
            seed,
            spacing: d_spacing(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.langevin.validate()?;
        let span = |g: &[f64]| {
            let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = g.iter().copied().fold(0.0, f64::max);
            (hi / lo).log10()
        };
        if self.epsilons.len() < 4 || self.epsilons.iter().any(|&e| !(e > 0.0)) || span(&self.epsilons) < 1.5 {
            return Err(Error::InvalidParameter(
                "epsilon grid needs at least 4 positive points spanning 1.5 decades".into(),
            ));
        }
        // the growth window is fixed to a bounded interval, so only its size is checked
        if self.horizons.len() < 4 || self.horizons.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::InvalidParameter("horizon grid needs at least 4 positive points".into()));
        }
        if !(self.epsilon_horizon > 0.0) || !(self.growth_epsilon > 0.0) {
            return Err(Error::InvalidParameter("fit horizon and growth epsilon must be positive".into()));
        }
        if self.ensemble < 2 || self.bootstrap == 0 || self.spacing == 0 {
            return Err(Error::InvalidParameter("need ensemble >= 2, bootstrap >= 1, spacing >= 1".into()));
        }
        Ok(())
    }

    fn steps(&self, horizon: f64) -> usize {
        ((horizon / self.langevin.dt).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl SlopeFit {
    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.ci_low >= lo && self.ci_high <= hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub epsilon: f64,
    pub horizon: f64,
    pub strong_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub epsilon_fit: SlopeFit,
    pub growth_fit: SlopeFit,
    pub rows: Vec<RateRow>,
    pub ensemble: usize,
    pub seed: u64,
}

impl RateReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epsilon,horizon,strong_error")?;
        for r in &self.rows {
            writeln!(f, "{:e},{:e},{:e}", r.epsilon, r.horizon, r.strong_error)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape(format!("{} abscissae for {} values", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidParameter("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("log-log fit over a single abscissa".into()));
    }
    Ok(sxy / sxx)
}

const IC_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Equilibrium initial conditions: snapshots of one long path after burn-in.
fn langevin_initial_conditions(p: &LangevinParams, count: usize, spacing: usize, seed: u64) -> Result<TimeSeries> {
    let burn = 10 * spacing;
    let path = simulate_langevin_from(p, burn + count * spacing + 1, seed, (1.0, 0.0))?;
    let mut v = Vec::with_capacity(2 * count);
    for i in 0..count {
        v.extend_from_slice(path.row(burn + i * spacing));
    }
    TimeSeries::new(v, 2, p.dt * spacing as f64, vec!["x".into(), "y".into()], seed)
}

/// Paired truth and closure paths from `init` under one noise realization;
/// returns `|x_hat_t - x_t|` for `t = 0..=noise.len()` and the blowup step.
fn paired_deviation(
    p: &LangevinParams,
    est: &dyn ClosureEstimator,
    truth_init: &TimeSeries,
    noise: &[f64],
    sd: f64,
) -> Result<(Vec<f64>, Option<usize>)> {
    let m = est.memory();
    let t0 = truth_init.n_steps() - 1;
    let last = truth_init.row(t0);
    let truth = simulate_langevin_with_noise(p, (last[0], last[1]), noise, 0)?;
    let x = truth_init.select(&[0])?;
    let y = truth_init.select(&[1])?;
    let hist = history_at(&x, &y, t0, m)?;
    let run = ClosureRun::new(SystemSpec::Langevin(p.clone()), noise.len()).with_xi(NoisePolicy::Realized {
        values: noise.iter().map(|e| sd * e).collect(),
    });
    let out = closed_loop_run(&run, est, &hist)?;
    let dev = (0..out.x.n_steps()).map(|t| (out.x.get(t, 0) - truth.get(t, 0)).abs()).collect();
    Ok((dev, out.blowup))
}

/// Strong-error rates of the perturbed closure against the exact
/// Euler-Maruyama system under paired noise.
pub fn verify_strong_error_rate(exp: &RateExperiment) -> Result<RateReport> {
    exp.validate()?;
    let p = &exp.langevin;
    let root = Rng::new(exp.seed);
    let ics = langevin_initial_conditions(p, exp.ensemble, exp.spacing, exp.seed ^ IC_SALT)?;
    let max_steps = exp
        .horizons
        .iter()
        .map(|&h| exp.steps(h))
        .chain(std::iter::once(exp.steps(exp.epsilon_horizon)))
        .max()
        .expect("nonempty grid");
    let noises: Vec<Vec<f64>> = (0..exp.ensemble)
        .map(|i| {
            let mut r = root.substream(1 + i as u64);
            let mut v = vec![0.0; max_steps];
            r.fill_normal(&mut v);
            v
        })
        .collect();
    let sd = p.sigma_y * p.dt.sqrt();

    // running-max deviation curves, indexed [epsilon][member][t]
    let mut eps_all = exp.epsilons.clone();
    if !eps_all.contains(&exp.growth_epsilon) {
        eps_all.push(exp.growth_epsilon);
    }
    let curves: Vec<Result<Vec<f64>>> = par::map(eps_all.len() * exp.ensemble, |k| {
        let (e, i) = (k / exp.ensemble, k % exp.ensemble);
        let est = PerturbedDrift::new(p.clone(), eps_all[e]);
        let init = ics.slice(i, i + 1)?;
        let (dev, blowup) = paired_deviation(p, &est, &init, &noises[i], sd)?;
        if let Some(s) = blowup {
            return Err(Error::Blowup {
                step: s,
                detail: format!("perturbed closure with epsilon {}", eps_all[e]),
            });
        }
        let mut run = 0.0f64;
        Ok(dev.into_iter().map(|d| {
            run = run.max(d);
            run
        }).collect())
    });
    let curves: Vec<Vec<f64>> = curves.into_iter().collect::<Result<_>>()?;
    let curve = |e: usize, i: usize| &curves[e * exp.ensemble + i];

    let mean_at = |e: usize, t: usize, members: &[usize]| {
        members.iter().map(|&i| curve(e, i)[t]).sum::<f64>() / members.len() as f64
    };
    let all: Vec<usize> = (0..exp.ensemble).collect();
    let t_eps = exp.steps(exp.epsilon_horizon);
    let g = eps_all.iter().position(|&e| e == exp.growth_epsilon).expect("inserted above");
    let h_steps: Vec<usize> = exp.horizons.iter().map(|&h| exp.steps(h)).collect();

    let eps_slope = |members: &[usize]| {
        let y: Vec<f64> = (0..exp.epsilons.len()).map(|e| mean_at(e, t_eps, members)).collect();
        loglog_slope(&exp.epsilons, &y)
    };
    let growth_slope = |members: &[usize]| {
        let y: Vec<f64> = h_steps.iter().map(|&t| mean_at(g, t, members)).collect();
        loglog_slope(&exp.horizons, &y)
    };

    let mut boot = root.substream(u64::MAX);
    let resamples: Vec<Vec<usize>> = (0..exp.bootstrap)
        .map(|_| (0..exp.ensemble).map(|_| boot.below(exp.ensemble)).collect())
        .collect();
    let fit = |f: &dyn Fn(&[usize]) -> Result<f64>| -> Result<SlopeFit> {
        let slope = f(&all)?;
        let mut b: Vec<f64> = resamples.iter().map(|r| f(r)).collect::<Result<_>>()?;
        b.sort_by(f64::total_cmp);
        Ok(SlopeFit {
            slope,
            ci_low: quantile_sorted(&b, 0.025),
            ci_high: quantile_sorted(&b, 0.975),
        })
    };
    let epsilon_fit = fit(&eps_slope)?;
    let growth_fit = fit(&growth_slope)?;

    let mut rows = Vec::new();
    for (e, &eps) in exp.epsilons.iter().enumerate() {
        rows.push(RateRow {
            epsilon: eps,
            horizon: exp.epsilon_horizon,
            strong_error: mean_at(e, t_eps, &all),
        });
    }
    for (&h, &t) in exp.horizons.iter().zip(&h_steps) {
        rows.push(RateRow {
            epsilon: exp.growth_epsilon,
            horizon: h,
            strong_error: mean_at(g, t, &all),
        });
    }
    Ok(RateReport {
        epsilon_fit,
        growth_fit,
        rows,
        ensemble: exp.ensemble,
        seed: exp.seed,
    })
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (pos - i as f64) * (sorted[j] - sorted[i])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    #[serde(default)]
    pub langevin: LangevinParams,
    #[serde(default = "d_ics")]
    pub initial_conditions: usize,
    /// Length of each paired run, in time units.
    pub run_time: f64,
    #[serde(default = "d_threshold")]
    pub threshold: f64,
    pub seed: u64,
    #[serde(default = "d_spacing")]
    pub spacing: usize,
}

fn d_ics() -> usize {
    20
}
fn d_threshold() -> f64 {
    0.5
}

impl HorizonConfig {
    pub fn new(run_time: f64, seed: u64) -> Self {
        HorizonConfig {
            langevin: LangevinParams::default(),
            initial_conditions: d_ics(),
            run_time,
            threshold: d_threshold(),
            seed,
            spacing: d_spacing(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    /// Training length the closure was fitted on.
    pub n_train: usize,
    pub median: f64,
    pub mean: f64,
    /// Per initial condition, in time units.
    pub horizons: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonTable {
    pub threshold: f64,
    pub run_time: f64,
    pub rows: Vec<HorizonRow>,
}

impl HorizonTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "n_train,median,mean")?;
        for r in &self.rows {
            writeln!(f, "{},{:e},{:e}", r.n_train, r.median, r.mean)?;
        }
        f.flush()?;
        Ok(())
    }

    /// Medians nondecreasing along the rows (ordered by training length).
    pub fn is_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].median >= w[0].median)
    }
}

/// First time the closed-loop position leaves a `threshold` tube around the
/// paired truth, per initial condition and per closure. A run that never
/// leaves the tube scores its full length.
pub fn verify_prediction_horizon(cfg: &HorizonConfig, closures: &[(usize, &dyn ClosureEstimator)]) -> Result<HorizonTable> {
    let p = &cfg.langevin;
    p.validate()?;
    if cfg.initial_conditions == 0 || !(cfg.run_time > 0.0) || !(cfg.threshold > 0.0) {
        return Err(Error::InvalidParameter("need initial conditions, a positive run time and threshold".into()));
    }
    let steps = ((cfg.run_time / p.dt).round() as usize).max(1);
    let m_max = closures.iter().map(|(_, e)| e.memory()).max().unwrap_or(0);
    let root = Rng::new(cfg.seed);
    // each member starts from a short truth window so closures with memory get a full history
    let windows: Vec<TimeSeries> = {
        let base = langevin_initial_conditions(p, cfg.initial_conditions, cfg.spacing, cfg.seed)?;
        (0..cfg.initial_conditions)
            .map(|i| {
                let r = base.row(i);
                simulate_langevin_from(p, m_max + 1, (cfg.seed ^ IC_SALT).wrapping_add(1 + i as u64), (r[0], r[1]))
            })
            .collect::<Result<_>>()?
    };
    let noises: Vec<Vec<f64>> = (0..cfg.initial_conditions)
        .map(|i| {
            let mut r = root.substream(1 + i as u64);
            let mut v = vec![0.0; steps];
            r.fill_normal(&mut v);
            v
        })
        .collect();

    let mut rows = Vec::with_capacity(closures.len());
    for &(n_train, est) in closures {
        if est.output_dim() != 1 || est.input_dim() != 2 * (est.memory() + 1) {
            return Err(Error::Shape("horizon check needs an (x, theta) closure with one output".into()));
        }
        let sd = est.residual_variance().first().copied().unwrap_or(0.0).max(0.0).sqrt();
        let m = est.memory();
        let horizons: Vec<Result<f64>> = par::map(cfg.initial_conditions, |i| {
            let w = &windows[i];
            let start = w.n_steps() - 1 - m;
            let init = w.slice(start, w.n_steps())?;
            let (dev, blowup) = paired_deviation(p, est, &init, &noises[i], sd)?;
            let first = dev.iter().position(|&d| d > cfg.threshold);
            let t = match (first, blowup) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => steps,
            };
            Ok(t as f64 * p.dt)
        });
        let horizons: Vec<f64> = horizons.into_iter().collect::<Result<_>>()?;
        rows.push(HorizonRow {
            n_train,
            median: median(&horizons),
            mean: horizons.iter().sum::<f64>() / horizons.len() as f64,
            horizons,
        });
    }
    Ok(HorizonTable {
        threshold: cfg.threshold,
        run_time: steps as f64 * p.dt,
        rows,
    })
}
