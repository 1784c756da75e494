//! The four full models and their resolved counterparts.
//!
//! All resolved quantities are exchanged as real vectors; a complex mode
//! occupies two consecutive entries (real, imaginary).

pub mod kse;
pub mod langevin;
pub mod nls;
pub mod topo;

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::{nls_reduced_split_step, Midpoint};
use crate::series::TimeSeries;

pub use kse::{simulate_kse, KseModel, KseParams};
pub use langevin::{langevin_drift, simulate_langevin, LangevinParams};
pub use nls::{nls_gibbs_sample, simulate_nls, NlsParams};
pub use topo::{simulate_topo, theta_topo, topo_mode_set, TopoModel, TopoParams, TopoRegime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemId {
    Langevin,
    Topo,
    Nls,
    Kse,
}

impl SystemId {
    pub fn name(self) -> &'static str {
        match self {
            SystemId::Langevin => "langevin",
            SystemId::Topo => "topo",
            SystemId::Nls => "nls",
            SystemId::Kse => "kse",
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "langevin" => Ok(SystemId::Langevin),
            "topo" => Ok(SystemId::Topo),
            "nls" => Ok(SystemId::Nls),
            "kse" => Ok(SystemId::Kse),
            other => Err(Error::Unsupported(format!("unknown system id '{other}'"))),
        }
    }
}

/// A fully parameterized system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", content = "params", rename_all = "lowercase")]
pub enum SystemSpec {
    Langevin(LangevinParams),
    Topo(TopoParams),
    Nls(NlsParams),
    Kse(KseParams),
}

impl SystemSpec {
    pub fn id(&self) -> SystemId {
        match self {
            SystemSpec::Langevin(_) => SystemId::Langevin,
            SystemSpec::Topo(_) => SystemId::Topo,
            SystemSpec::Nls(_) => SystemId::Nls,
            SystemSpec::Kse(_) => SystemId::Kse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SystemSpec::Langevin(p) => p.validate(),
            SystemSpec::Topo(p) => p.validate(),
            SystemSpec::Nls(p) => p.validate(),
            SystemSpec::Kse(p) => p.validate(),
        }
    }

    /// Observation interval of the recorded (and resolved) series.
    pub fn dt_obs(&self) -> f64 {
        match self {
            SystemSpec::Langevin(p) => p.dt,
            SystemSpec::Topo(p) => p.dt_obs,
            SystemSpec::Nls(p) => p.dt_obs,
            SystemSpec::Kse(p) => p.dt_obs,
        }
    }

    /// Real width of the resolved state (and of theta).
    pub fn resolved_dim(&self) -> usize {
        match self {
            SystemSpec::Langevin(_) | SystemSpec::Topo(_) => 1,
            SystemSpec::Nls(_) => 2,
            SystemSpec::Kse(p) => 2 * p.resolved_modes,
        }
    }

    /// Columns of the full simulator output holding the resolved state.
    pub fn resolved_columns(&self) -> Vec<usize> {
        match self {
            SystemSpec::Langevin(_) | SystemSpec::Topo(_) => vec![0],
            SystemSpec::Nls(p) => p.zero_mode_columns().to_vec(),
            SystemSpec::Kse(p) => (0..2 * p.resolved_modes).collect(),
        }
    }

    pub fn resolved_view(&self, full: &TimeSeries) -> Result<TimeSeries> {
        full.select(&self.resolved_columns())
    }

    pub fn theta_names(&self) -> Vec<String> {
        match self {
            SystemSpec::Langevin(_) | SystemSpec::Topo(_) => vec!["theta".into()],
            SystemSpec::Nls(_) => vec!["re(theta)".into(), "im(theta)".into()],
            SystemSpec::Kse(p) => (1..=p.resolved_modes)
                .flat_map(|k| [format!("re(theta[{k}])"), format!("im(theta[{k}])")])
                .collect(),
        }
    }

    /// True when the one-step resolved map is `x + dt (F(x) + theta)` up to
    /// additive noise, so theta follows by direct subtraction.
    pub fn is_additive(&self) -> bool {
        matches!(self, SystemSpec::Langevin(_) | SystemSpec::Topo(_))
    }
}

/// Resolved-only vector field `F(x)` (theta set to zero).
pub fn resolved_rhs(spec: &SystemSpec, x: &[f64]) -> Result<Vec<f64>> {
    let d = spec.resolved_dim();
    if x.len() != d {
        return Err(Error::Shape(format!("{} resolved values for {}, expected {d}", x.len(), spec.id())));
    }
    Ok(match spec {
        SystemSpec::Langevin(_) => vec![0.0],
        SystemSpec::Topo(p) => vec![-p.d_bar * (x[0] - p.u_eq())],
        SystemSpec::Nls(_) => {
            let u = C::new(x[0], x[1]);
            let f = -C::i() * u.norm_sqr() * u;
            vec![f.re, f.im]
        }
        SystemSpec::Kse(p) => {
            let v = to_complex(x);
            let mut dv = vec![C::default(); v.len()];
            kse::kse_resolved_rhs(p, &v, &mut dv);
            from_complex(&dv)
        }
    })
}

/// Map a residual `dx/dt - F(x)` to theta. NLS places theta as `-i theta`,
/// so its inverse multiplies by `i`; the others are additive.
pub fn theta_from_residual(spec: &SystemSpec, r: &[f64]) -> Vec<f64> {
    match spec {
        SystemSpec::Nls(_) => {
            let t = C::i() * C::new(r[0], r[1]);
            vec![t.re, t.im]
        }
        _ => r.to_vec(),
    }
}

/// Inverse of [`theta_from_residual`].
pub fn residual_from_theta(spec: &SystemSpec, theta: &[f64]) -> Vec<f64> {
    match spec {
        SystemSpec::Nls(_) => {
            let r = -C::i() * C::new(theta[0], theta[1]);
            vec![r.re, r.im]
        }
        _ => theta.to_vec(),
    }
}

pub(crate) fn to_complex(x: &[f64]) -> Vec<C> {
    x.chunks_exact(2).map(|c| C::new(c[0], c[1])).collect()
}

pub(crate) fn from_complex(v: &[C]) -> Vec<f64> {
    v.iter().flat_map(|z| [z.re, z.im]).collect()
}

/// Discrete resolved map used by the closed loop.
///
/// * Langevin: `x + dt theta`
/// * topographic: `u + dt theta - dt d (u - u_eq) + sqrt(dt) sigma mu^{-1/2} eta`
/// * NLS: [`nls_reduced_split_step`]
/// * KSE: explicit midpoint on the truncated field with theta frozen over the step
#[derive(Clone)]
pub struct ResolvedMap {
    pub spec: SystemSpec,
    dt: f64,
    mid: Midpoint<C>,
    vbuf: Vec<C>,
}

impl ResolvedMap {
    pub fn new(spec: SystemSpec) -> Self {
        let dt = spec.dt_obs();
        let n = spec.resolved_dim() / 2;
        ResolvedMap {
            spec,
            dt,
            mid: Midpoint::new(n),
            vbuf: vec![C::default(); n],
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advance `x` in place. `eta` is the standard-normal mean-flow noise
    /// for the topographic system and ignored elsewhere.
    pub fn step(&mut self, x: &mut [f64], theta: &[f64], eta: f64) -> Result<()> {
        let dt = self.dt;
        match &self.spec {
            SystemSpec::Langevin(_) => x[0] += dt * theta[0],
            SystemSpec::Topo(p) => {
                x[0] += dt * theta[0] - dt * p.d_bar * (x[0] - p.u_eq()) + dt.sqrt() * p.sigma_u() * eta;
            }
            SystemSpec::Nls(_) => {
                let u = nls_reduced_split_step(C::new(x[0], x[1]), C::new(theta[0], theta[1]), dt);
                x[0] = u.re;
                x[1] = u.im;
            }
            SystemSpec::Kse(p) => {
                let th = to_complex(theta);
                for (j, z) in self.vbuf.iter_mut().enumerate() {
                    *z = C::new(x[2 * j], x[2 * j + 1]);
                }
                let p = p.clone();
                self.mid.step(
                    &mut self.vbuf,
                    |v, dv| {
                        kse::kse_resolved_rhs(&p, v, dv);
                        for (d, t) in dv.iter_mut().zip(&th) {
                            *d += t;
                        }
                    },
                    dt,
                )?;
                for (j, z) in self.vbuf.iter().enumerate() {
                    x[2 * j] = z.re;
                    x[2 * j + 1] = z.im;
                }
            }
        }
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite)
        }
    }
}
