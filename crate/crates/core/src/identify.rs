//! Extraction of the identifiable unresolved variable `theta` from resolved
//! trajectories, and training-residual variances.

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::ClosureEstimator;
use crate::par;
use crate::series::{DelayDataset, TimeSeries};
use crate::systems::{
    from_complex, kse, residual_from_theta, resolved_rhs, theta_from_residual, to_complex, ResolvedMap, SystemSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaMethod {
    /// Read directly from recorded unresolved variables.
    Exact,
    /// `theta_t = (x_{t+1} - x_t)/dt - F(x_t)` for additive one-step maps.
    Subtraction,
    /// Forward difference minus the continuous resolved field.
    FiniteDifference,
    /// Exact inversion of the closed-loop discrete map (split step for NLS,
    /// explicit midpoint for KSE).
    SchemeInverse,
}

#[derive(Clone, Debug)]
pub struct ThetaSeries {
    pub values: TimeSeries,
    pub method: ThetaMethod,
}

fn theta_ts(spec: &SystemSpec, x: &TimeSeries, v: Vec<f64>) -> Result<TimeSeries> {
    TimeSeries::new(v, spec.resolved_dim(), x.dt(), spec.theta_names(), x.seed())
}

fn check_input(x: &TimeSeries, spec: &SystemSpec, min_len: usize) -> Result<()> {
    if x.n_vars() != spec.resolved_dim() {
        return Err(Error::Shape(format!(
            "{} columns, {} resolves {}",
            x.n_vars(),
            spec.id(),
            spec.resolved_dim()
        )));
    }
    if x.n_steps() < min_len {
        return Err(Error::InsufficientData(format!("need at least {min_len} samples, got {}", x.n_steps())));
    }
    Ok(())
}

/// `theta_t` for `t = 0..N-2` by direct subtraction through the discrete
/// resolved map.
pub fn extract_theta_subtraction(x: &TimeSeries, spec: &SystemSpec) -> Result<ThetaSeries> {
    if !spec.is_additive() {
        return Err(Error::Unsupported(format!("{} has no additive one-step map", spec.id())));
    }
    check_input(x, spec, 2)?;
    let dt = x.dt();
    let mut v = Vec::with_capacity(x.n_steps() - 1);
    for t in 0..x.n_steps() - 1 {
        let f = resolved_rhs(spec, x.row(t))?;
        v.push((x.get(t + 1, 0) - x.get(t, 0)) / dt - f[0]);
    }
    Ok(ThetaSeries {
        values: theta_ts(spec, x, v)?,
        method: ThetaMethod::Subtraction,
    })
}

/// Forward-difference fit against the continuous resolved field, mapped
/// through the system's theta placement.
pub fn extract_theta_fd(x: &TimeSeries, spec: &SystemSpec) -> Result<ThetaSeries> {
    check_input(x, spec, 3)?;
    let dt = x.dt();
    let d = spec.resolved_dim();
    let mut v = Vec::with_capacity((x.n_steps() - 1) * d);
    for t in 0..x.n_steps() - 1 {
        let f = resolved_rhs(spec, x.row(t))?;
        let r: Vec<f64> = (0..d).map(|j| (x.get(t + 1, j) - x.get(t, j)) / dt - f[j]).collect();
        v.extend(theta_from_residual(spec, &r));
    }
    Ok(ThetaSeries {
        values: theta_ts(spec, x, v)?,
        method: ThetaMethod::FiniteDifference,
    })
}

/// Invert the closed-loop discrete map exactly.
pub fn extract_theta_scheme_inverse(x: &TimeSeries, spec: &SystemSpec) -> Result<ThetaSeries> {
    match spec {
        SystemSpec::Langevin(_) | SystemSpec::Topo(_) => {
            let mut t = extract_theta_subtraction(x, spec)?;
            t.method = ThetaMethod::SchemeInverse;
            Ok(t)
        }
        SystemSpec::Nls(_) => {
            check_input(x, spec, 2)?;
            let dt = x.dt();
            let mut v = Vec::with_capacity(2 * (x.n_steps() - 1));
            for t in 0..x.n_steps() - 1 {
                let u0 = C::new(x.get(t, 0), x.get(t, 1));
                let u1 = C::new(x.get(t + 1, 0), x.get(t + 1, 1));
                let pre = u1 * C::from_polar(1.0, u1.norm_sqr() * dt);
                let th = C::i() * (pre - u0) / dt;
                v.push(th.re);
                v.push(th.im);
            }
            Ok(ThetaSeries {
                values: theta_ts(spec, x, v)?,
                method: ThetaMethod::SchemeInverse,
            })
        }
        SystemSpec::Kse(p) => {
            check_input(x, spec, 2)?;
            let dt = x.dt();
            let n = spec.resolved_dim() / 2;
            let rows: Vec<Vec<f64>> = par::map(x.n_steps() - 1, |t| {
                let v0 = to_complex(x.row(t));
                let v1 = to_complex(x.row(t + 1));
                let mut f0 = vec![C::default(); n];
                kse::kse_resolved_rhs(p, &v0, &mut f0);
                let diff: Vec<C> = (0..n).map(|j| (v1[j] - v0[j]) / dt).collect();
                let mut th: Vec<C> = (0..n).map(|j| diff[j] - f0[j]).collect();
                let mut mid = vec![C::default(); n];
                let mut fm = vec![C::default(); n];
                for _ in 0..200 {
                    for j in 0..n {
                        mid[j] = v0[j] + (f0[j] + th[j]) * (0.5 * dt);
                    }
                    kse::kse_resolved_rhs(p, &mid, &mut fm);
                    let mut change = 0.0f64;
                    let mut size = 0.0f64;
                    for j in 0..n {
                        let new = diff[j] - fm[j];
                        change = change.max((new - th[j]).norm());
                        size = size.max(new.norm());
                        th[j] = new;
                    }
                    if change <= 1e-15 * size.max(1.0) {
                        break;
                    }
                }
                from_complex(&th)
            });
            Ok(ThetaSeries {
                values: theta_ts(spec, x, rows.concat())?,
                method: ThetaMethod::SchemeInverse,
            })
        }
    }
}

pub fn extract_theta(x: &TimeSeries, spec: &SystemSpec, method: ThetaMethod) -> Result<ThetaSeries> {
    match method {
        ThetaMethod::Subtraction => extract_theta_subtraction(x, spec),
        ThetaMethod::FiniteDifference => extract_theta_fd(x, spec),
        ThetaMethod::SchemeInverse => extract_theta_scheme_inverse(x, spec),
        ThetaMethod::Exact => Err(Error::Unsupported(
            "exact theta needs the unresolved variables; use extract_theta_exact".into(),
        )),
    }
}

/// Theta read from a full simulator series: `y` for Langevin, the
/// vorticity functional for the topographic model.
pub fn extract_theta_exact(full: &TimeSeries, spec: &SystemSpec) -> Result<ThetaSeries> {
    let values = match spec {
        SystemSpec::Langevin(_) => {
            let mut t = full.select(&[1])?;
            t = TimeSeries::new(t.into_values(), 1, full.dt(), spec.theta_names(), full.seed())?;
            t
        }
        SystemSpec::Topo(p) => {
            let model = crate::systems::TopoModel::new(p.clone())?;
            crate::systems::topo::theta_series(&model, full)?
        }
        _ => {
            return Err(Error::Unsupported(format!(
                "{} has no closed-form theta functional",
                spec.id()
            )))
        }
    };
    Ok(ThetaSeries {
        values,
        method: ThetaMethod::Exact,
    })
}

/// Trim `x` to the length of `theta` so both index the same time points.
pub fn align(x: &TimeSeries, theta: &ThetaSeries) -> Result<TimeSeries> {
    let n = theta.values.n_steps();
    if n > x.n_steps() {
        return Err(Error::Alignment(format!("theta has {n} steps, x only {}", x.n_steps())));
    }
    if n == x.n_steps() {
        Ok(x.clone())
    } else {
        x.slice(0, n)
    }
}

/// Drive the resolved dynamics with a theta series from `x0`. Uses forward
/// Euler on the continuous field for finite-difference theta and the
/// closed-loop discrete map otherwise (topographic noise set to zero, since
/// subtraction folds it into theta).
pub fn reinsert(x0: &[f64], theta: &ThetaSeries, spec: &SystemSpec) -> Result<TimeSeries> {
    let d = spec.resolved_dim();
    let th = &theta.values;
    let n = th.n_steps() + 1;
    let dt = th.dt();
    let mut x = x0.to_vec();
    let mut vals = Vec::with_capacity(n * d);
    vals.extend_from_slice(&x);
    let mut map = ResolvedMap::new(spec.clone());
    for t in 0..th.n_steps() {
        match theta.method {
            ThetaMethod::FiniteDifference => {
                let f = resolved_rhs(spec, &x)?;
                let r = residual_from_theta(spec, th.row(t));
                for j in 0..d {
                    x[j] += dt * (f[j] + r[j]);
                }
            }
            _ => map.step(&mut x, th.row(t), 0.0).map_err(|e| e.at_step(t + 1))?,
        }
        vals.extend_from_slice(&x);
    }
    let names = (0..d).map(|j| format!("x{j}")).collect();
    TimeSeries::new(vals, d, dt, names, th.seed())
}

/// Mean squared residual per output over the dataset.
pub fn residual_variance<E: ClosureEstimator + ?Sized>(est: &E, data: &DelayDataset) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InsufficientData("empty dataset".into()));
    }
    let d_o = est.output_dim();
    if data.output_dim() != d_o || data.input_dim() != est.input_dim() {
        return Err(Error::Shape(format!(
            "estimator {}->{} on dataset {}->{}",
            est.input_dim(),
            d_o,
            data.input_dim(),
            data.output_dim()
        )));
    }
    let chunks = par::chunks(data.len(), 4096);
    let partial: Vec<Result<Vec<f64>>> = par::map(chunks.len(), |c| {
        let r = chunks[c].clone();
        let di = data.input_dim();
        let mut inputs = Vec::with_capacity(r.len() * di);
        for i in r.clone() {
            inputs.extend_from_slice(data.input(i));
        }
        let mut out = vec![0.0; r.len() * d_o];
        est.predict_batch(&inputs, &mut out)?;
        let mut acc = vec![0.0; d_o];
        for (k, i) in r.enumerate() {
            for j in 0..d_o {
                let e = out[k * d_o + j] - data.target(i)[j];
                acc[j] += e * e;
            }
        }
        Ok(acc)
    });
    let mut total = vec![0.0; d_o];
    for p in partial {
        for (t, a) in total.iter_mut().zip(p?) {
            *t += a;
        }
    }
    Ok(total.into_iter().map(|s| s / data.len() as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{LangevinParams, NlsParams, TopoParams, TopoRegime};

    fn series(v: Vec<f64>, d: usize, dt: f64) -> TimeSeries {
        TimeSeries::with_default_names(v, d, dt, "x", 0).unwrap()
    }

    #[test]
    fn subtraction_zero_and_constant() {
        let p = TopoParams::regime(TopoRegime::Strong);
        let spec = SystemSpec::Topo(p.clone());
        let dt = p.dt_obs;
        for c in [0.0, 0.37] {
            let mut u = vec![1.3];
            for t in 0..50 {
                let x: f64 = u[t];
                u.push(x + dt * (-p.d_bar * (x - p.u_eq()) + c));
            }
            let th = extract_theta_subtraction(&series(u, 1, dt), &spec).unwrap();
            assert_eq!(th.values.n_steps(), 50);
            assert!(th.values.values().iter().all(|v| (v - c).abs() < 1e-12));
        }
    }

    #[test]
    fn subtraction_rejects_nonadditive() {
        let spec = SystemSpec::Nls(NlsParams::default());
        let x = series(vec![0.0; 10], 2, 0.02);
        assert!(matches!(extract_theta_subtraction(&x, &spec), Err(Error::Unsupported(_))));
    }

    #[test]
    fn langevin_subtraction_recovers_y() {
        let p = LangevinParams::default();
        let spec = SystemSpec::Langevin(p.clone());
        let full = crate::systems::simulate_langevin(&p, 2000, 4).unwrap();
        let x = spec.resolved_view(&full).unwrap();
        let th = extract_theta_subtraction(&x, &spec).unwrap();
        for t in 0..1999 {
            assert!((th.values.get(t, 0) - full.get(t, 1)).abs() < 1e-9);
        }
    }

    #[test]
    fn nls_single_mode_fd_vanishes() {
        let spec = SystemSpec::Nls(NlsParams::default());
        let r = 1.2f64;
        let mut errs = Vec::new();
        for dt in [1e-2, 5e-3, 2.5e-3, 1.25e-3] {
            let v: Vec<f64> = (0..20)
                .flat_map(|t| {
                    let z = C::from_polar(r, -r * r * dt * t as f64);
                    [z.re, z.im]
                })
                .collect();
            let th = extract_theta_fd(&series(v, 2, dt), &spec).unwrap();
            errs.push(th.values.values().iter().fold(0.0f64, |m, x| m.max(x.abs())));
        }
        for w in errs.windows(2) {
            assert!(w[1] < 0.6 * w[0]);
        }
    }

    #[test]
    fn nls_scheme_inverse_reinserts() {
        let spec = SystemSpec::Nls(NlsParams::default());
        let mut v = vec![0.4, -1.1];
        for t in 0..60 {
            let z = C::new(v[2 * t], v[2 * t + 1]);
            let z = crate::integrators::nls_reduced_split_step(z, C::new((t as f64).sin(), 0.3), 0.02);
            v.push(z.re);
            v.push(z.im);
        }
        let x = series(v, 2, 0.02);
        let th = extract_theta_scheme_inverse(&x, &spec).unwrap();
        let back = reinsert(x.row(0), &th, &spec).unwrap();
        for (a, b) in back.values().iter().zip(x.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
