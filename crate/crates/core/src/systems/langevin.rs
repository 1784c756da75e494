//! Double-well Langevin dynamics `dx = y dt`, `dy = (x - x^3 - gamma y) dt + sigma_y dW`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::series::TimeSeries;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinParams {
    pub gamma: f64,
    pub sigma_y: f64,
    pub dt: f64,
}

impl Default for LangevinParams {
    fn default() -> Self {
        LangevinParams {
            gamma: 1.0,
            sigma_y: 0.3 * std::f64::consts::SQRT_2,
            dt: 0.01,
        }
    }
}

impl LangevinParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.sigma_y >= 0.0) || !(self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "langevin needs gamma > 0, sigma_y >= 0, dt > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn langevin_drift(x: f64, y: f64, p: &LangevinParams) -> (f64, f64) {
    (y, x - x * x * x - p.gamma * y)
}

/// One Euler-Maruyama step driven by the standard normal `xi`.
#[inline]
pub fn langevin_step(x: f64, y: f64, p: &LangevinParams, xi: f64) -> (f64, f64) {
    let (fx, fy) = langevin_drift(x, y, p);
    (x + p.dt * fx, y + p.dt * fy + p.sigma_y * p.dt.sqrt() * xi)
}

/// Path of `n_steps` samples starting from `init`, driven by `noise`
/// (`noise.len() >= n_steps - 1`).
pub fn simulate_langevin_with_noise(p: &LangevinParams, init: (f64, f64), noise: &[f64], seed: u64) -> Result<TimeSeries> {
    p.validate()?;
    let n_steps = noise.len() + 1;
    let mut v = Vec::with_capacity(2 * n_steps);
    let (mut x, mut y) = init;
    v.push(x);
    v.push(y);
    for (t, &xi) in noise.iter().enumerate() {
        (x, y) = langevin_step(x, y, p, xi);
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::NonFinite.at_step(t + 1));
        }
        v.push(x);
        v.push(y);
    }
    TimeSeries::new(v, 2, p.dt, vec!["x".into(), "y".into()], seed)
}

pub fn simulate_langevin_from(p: &LangevinParams, n_steps: usize, seed: u64, init: (f64, f64)) -> Result<TimeSeries> {
    if n_steps == 0 {
        return Err(Error::InvalidParameter("n_steps must be at least 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut noise = vec![0.0; n_steps - 1];
    rng.fill_normal(&mut noise);
    simulate_langevin_with_noise(p, init, &noise, seed)
}

/// Path started at the right well bottom `(1, 0)`.
pub fn simulate_langevin(p: &LangevinParams, n_steps: usize, seed: u64) -> Result<TimeSeries> {
    simulate_langevin_from(p, n_steps, seed, (1.0, 0.0))
}
