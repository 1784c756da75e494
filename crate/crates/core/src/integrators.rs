//! Fixed-step time-stepping kernels.
//!
//! The allocation-free steppers ([`Rk4`], [`Midpoint`], [`StrangNls`]) own
//! their stage buffers and advance a caller-owned state in place. The free
//! functions are thin pure wrappers for one-off use and tests.

use std::ops::{Add, Mul};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{slot, Fft1};

/// Element type a stepper can advance.
pub trait Scalar: Copy + Default + Send + Sync + Add<Output = Self> + Mul<f64, Output = Self> {
    fn is_finite_val(self) -> bool;
}

impl Scalar for f64 {
    #[inline]
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for Complex64 {
    #[inline]
    fn is_finite_val(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    Rk4,
    Midpoint,
    StrangNls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepperConfig {
    pub scheme: Scheme,
    pub dt: f64,
    #[serde(default)]
    pub noise: Option<Vec<f64>>,
}

impl StepperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if let Some(n) = &self.noise {
            if n.iter().any(|s| !(*s >= 0.0)) {
                return Err(Error::InvalidParameter("noise amplitudes must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

#[inline]
fn all_finite<T: Scalar>(v: &[T]) -> Result<()> {
    if v.iter().all(|x| x.is_finite_val()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// `state + drift(state)·dt + sigma ⊙ sqrt(dt) ⊙ noise`.
pub fn euler_maruyama_step<F>(state: &[f64], mut drift: F, sigma: &[f64], dt: f64, noise: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = state.len();
    if sigma.len() != n || noise.len() != n {
        return Err(Error::Shape(format!(
            "state {n}, sigma {}, noise {}",
            sigma.len(),
            noise.len()
        )));
    }
    let mut d = vec![0.0; n];
    drift(state, &mut d);
    all_finite(&d)?;
    let sq = dt.sqrt();
    Ok((0..n).map(|i| state[i] + d[i] * dt + sigma[i] * sq * noise[i]).collect())
}

/// Classical fourth-order Runge-Kutta with reusable stage buffers.
#[derive(Clone, Debug)]
pub struct Rk4<T> {
    k1: Vec<T>,
    k2: Vec<T>,
    k3: Vec<T>,
    k4: Vec<T>,
    tmp: Vec<T>,
}

impl<T: Scalar> Rk4<T> {
    pub fn new(n: usize) -> Self {
        let z = vec![T::default(); n];
        Rk4 {
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z.clone(),
            tmp: z,
        }
    }

    pub fn step<F>(&mut self, y: &mut [T], mut f: F, dt: f64) -> Result<()>
    where
        F: FnMut(&[T], &mut [T]),
    {
        let h = 0.5 * dt;
        f(y, &mut self.k1);
        for i in 0..y.len() {
            self.tmp[i] = y[i] + self.k1[i] * h;
        }
        f(&self.tmp, &mut self.k2);
        for i in 0..y.len() {
            self.tmp[i] = y[i] + self.k2[i] * h;
        }
        f(&self.tmp, &mut self.k3);
        for i in 0..y.len() {
            self.tmp[i] = y[i] + self.k3[i] * dt;
        }
        f(&self.tmp, &mut self.k4);
        let s = dt / 6.0;
        for i in 0..y.len() {
            y[i] = y[i] + (self.k1[i] + self.k2[i] * 2.0 + self.k3[i] * 2.0 + self.k4[i]) * s;
        }
        all_finite(y)
    }
}

pub fn rk4_step<T: Scalar, F>(state: &[T], f: F, dt: f64) -> Result<Vec<T>>
where
    F: FnMut(&[T], &mut [T]),
{
    let mut y = state.to_vec();
    Rk4::new(state.len()).step(&mut y, f, dt)?;
    Ok(y)
}

/// Explicit midpoint (RK2): `y + dt·f(y + dt/2·f(y))`.
#[derive(Clone, Debug)]
pub struct Midpoint<T> {
    k: Vec<T>,
    tmp: Vec<T>,
}

impl<T: Scalar> Midpoint<T> {
    pub fn new(n: usize) -> Self {
        Midpoint {
            k: vec![T::default(); n],
            tmp: vec![T::default(); n],
        }
    }

    pub fn step<F>(&mut self, y: &mut [T], mut f: F, dt: f64) -> Result<()>
    where
        F: FnMut(&[T], &mut [T]),
    {
        f(y, &mut self.k);
        for i in 0..y.len() {
            self.tmp[i] = y[i] + self.k[i] * (0.5 * dt);
        }
        f(&self.tmp, &mut self.k);
        for i in 0..y.len() {
            y[i] = y[i] + self.k[i] * dt;
        }
        all_finite(y)
    }
}

pub fn midpoint_step<T: Scalar, F>(state: &[T], f: F, dt: f64) -> Result<Vec<T>>
where
    F: FnMut(&[T], &mut [T]),
{
    let mut y = state.to_vec();
    Midpoint::new(state.len()).step(&mut y, f, dt)?;
    Ok(y)
}

/// Strang splitting for `i u_t = -u_xx + |u|^2 u` on the modes `|k| <= K`.
///
/// Spectra are ordered `k = -K..=K`. The nonlinear sub-flow is a pointwise
/// phase rotation evaluated on a `2K+1` point collocation grid, which maps the
/// retained modes one-to-one and so conserves the discrete mass exactly.
#[derive(Clone)]
pub struct StrangNls {
    k_max: usize,
    fft: Fft1,
    buf: Vec<Complex64>,
}

impl StrangNls {
    pub fn new(k_max: usize) -> Self {
        let n = 2 * k_max + 1;
        StrangNls {
            k_max,
            fft: Fft1::new(n),
            buf: vec![Complex64::default(); n],
        }
    }

    pub fn n_modes(&self) -> usize {
        2 * self.k_max + 1
    }

    fn half_linear(&self, u: &mut [Complex64], dt: f64) {
        let kk = self.k_max as i64;
        for (j, v) in u.iter_mut().enumerate() {
            let k = j as i64 - kk;
            *v *= Complex64::from_polar(1.0, -((k * k) as f64) * 0.5 * dt);
        }
    }

    pub fn step(&mut self, u: &mut [Complex64], dt: f64) -> Result<()> {
        let n = self.n_modes();
        if u.len() != n {
            return Err(Error::Shape(format!("spectrum of {} modes, grid expects {n}", u.len())));
        }
        let kk = self.k_max as i64;
        self.half_linear(u, dt);
        for (j, v) in u.iter().enumerate() {
            self.buf[slot(j as i64 - kk, n)] = *v;
        }
        self.fft.inverse(&mut self.buf);
        for v in self.buf.iter_mut() {
            *v *= Complex64::from_polar(1.0, -v.norm_sqr() * dt);
        }
        self.fft.forward(&mut self.buf);
        let inv_n = 1.0 / n as f64;
        for (j, v) in u.iter_mut().enumerate() {
            *v = self.buf[slot(j as i64 - kk, n)] * inv_n;
        }
        self.half_linear(u, dt);
        all_finite(u)
    }
}

pub fn strang_nls_step(u_hat: &[Complex64], dt: f64) -> Result<Vec<Complex64>> {
    if u_hat.len() % 2 == 0 {
        return Err(Error::Shape(format!("spectrum length {} is not 2K+1", u_hat.len())));
    }
    let mut u = u_hat.to_vec();
    StrangNls::new(u_hat.len() / 2).step(&mut u, dt)?;
    Ok(u)
}

/// Reduced NLS step for the zero mode: Euler for `du/dt = -i theta`, then
/// the exact rotation `u e^{-i|u|^2 dt}`.
#[inline]
pub fn nls_reduced_split_step(u0: Complex64, theta: Complex64, dt: f64) -> Complex64 {
    let v = u0 - Complex64::i() * theta * dt;
    v * Complex64::from_polar(1.0, -v.norm_sqr() * dt)
}
