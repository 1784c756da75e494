//! Kuramoto-Sivashinsky equation in Fourier form,
//! `dv_k/dt = (q_k^2 - q_k^4) v_k - (i q_k / 2) sum_l v_l v_{k-l}`,
//! `q_k = 2 pi k / L`, Galerkin-truncated to `1 <= |k| <= K/2` with `v_0 = 0`.
//!
//! States store `v_1..v_{K/2}`; negative modes are conjugates.

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::series::TimeSeries;
use crate::spectral::{slot, Fft1};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KseParams {
    pub length: f64,
    /// Total truncation `K`; modes `|k| <= K/2` are kept.
    pub k_total: usize,
    pub dt_inner: f64,
    pub dt_obs: f64,
    pub resolved_modes: usize,
    pub transient: f64,
    /// Collocation points for the quadratic product; must exceed `3K/2`.
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Amplitude of the random initial condition.
    #[serde(default = "default_init_amp")]
    pub init_amp: f64,
}

fn default_grid() -> usize {
    150
}

fn default_init_amp() -> f64 {
    0.01
}

/// Modes whose amplitude exceeds this are treated as a blowup.
pub const BLOWUP_THRESHOLD: f64 = 10.0;

impl Default for KseParams {
    fn default() -> Self {
        KseParams {
            length: 2.0 * std::f64::consts::PI / 0.085f64.sqrt(),
            k_total: 96,
            dt_inner: 0.005,
            dt_obs: 0.05,
            resolved_modes: 6,
            transient: 500.0,
            grid: default_grid(),
            init_amp: default_init_amp(),
        }
    }
}

impl KseParams {
    pub fn n_modes(&self) -> usize {
        self.k_total / 2
    }

    pub fn q(&self, k: i64) -> f64 {
        2.0 * std::f64::consts::PI * k as f64 / self.length
    }

    /// Linear growth rate `q_k^2 - q_k^4`.
    pub fn growth(&self, k: i64) -> f64 {
        let q2 = self.q(k).powi(2);
        q2 - q2 * q2
    }

    pub fn substeps(&self) -> Result<usize> {
        let r = self.dt_obs / self.dt_inner;
        let n = r.round();
        if n < 1.0 || (r - n).abs() > 1e-9 * r {
            return Err(Error::InvalidParameter(format!(
                "dt_obs {} is not an integer multiple of dt_inner {}",
                self.dt_obs, self.dt_inner
            )));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0) || self.n_modes() == 0 {
            return Err(Error::InvalidParameter(format!("invalid KSE parameters {self:?}")));
        }
        if self.resolved_modes == 0 || self.resolved_modes > self.n_modes() {
            return Err(Error::InvalidParameter(format!(
                "resolved_modes {} outside 1..={}",
                self.resolved_modes,
                self.n_modes()
            )));
        }
        if 2 * self.grid <= 3 * self.k_total {
            return Err(Error::InvalidParameter(format!(
                "grid {} aliases quadratic products of |k| <= {}",
                self.grid,
                self.n_modes()
            )));
        }
        self.substeps().map(|_| ())
    }
}

#[derive(Clone)]
pub struct KseModel {
    pub params: KseParams,
    lin: Vec<f64>,
    half_q: Vec<f64>,
    fft: Fft1,
    buf: Vec<C>,
}

impl KseModel {
    pub fn new(params: KseParams) -> Result<Self> {
        params.validate()?;
        let n = params.n_modes();
        let lin = (1..=n as i64).map(|k| params.growth(k)).collect();
        let half_q = (1..=n as i64).map(|k| 0.5 * params.q(k)).collect();
        let fft = Fft1::new(params.grid);
        let buf = vec![C::default(); params.grid];
        Ok(KseModel { params, lin, half_q, fft, buf })
    }

    pub fn n_modes(&self) -> usize {
        self.lin.len()
    }

    /// Pseudo-spectral right-hand side for `v_1..v_n`.
    pub fn rhs(&mut self, v: &[C], dv: &mut [C]) {
        self.nonlinear(v, dv);
        for ((d, z), l) in dv.iter_mut().zip(v).zip(&self.lin) {
            *d += z * l;
        }
    }

    /// Quadratic term `-(i q_k/2) (v*v)_k` alone.
    pub fn nonlinear(&mut self, v: &[C], dv: &mut [C]) {
        let g = self.params.grid;
        let n = self.lin.len();
        self.buf.fill(C::default());
        for (j, z) in v.iter().enumerate() {
            let k = j as i64 + 1;
            self.buf[slot(k, g)] = *z;
            self.buf[slot(-k, g)] = z.conj();
        }
        self.fft.inverse(&mut self.buf);
        for z in self.buf.iter_mut() {
            *z = C::new(z.re * z.re, 0.0);
        }
        self.fft.forward(&mut self.buf);
        let inv = 1.0 / g as f64;
        for j in 0..n {
            dv[j] = -C::i() * self.half_q[j] * (self.buf[j + 1] * inv);
        }
    }

    /// Same right-hand side by direct double sum over the retained modes.
    pub fn rhs_direct(&self, v: &[C], dv: &mut [C]) {
        let n = v.len() as i64;
        let at = |l: i64| -> C {
            if l == 0 || l.abs() > n {
                C::default()
            } else if l > 0 {
                v[(l - 1) as usize]
            } else {
                v[(-l - 1) as usize].conj()
            }
        };
        for k in 1..=n {
            let mut s = C::default();
            for l in -n..=n {
                s += at(l) * at(k - l);
            }
            let j = (k - 1) as usize;
            dv[j] = v[j] * self.lin[j] - C::i() * self.half_q[j] * s;
        }
    }

    pub fn random_state(&self, rng: &mut Rng) -> Vec<C> {
        let a = self.params.init_amp;
        (1..=self.n_modes())
            .map(|k| {
                let w = a * (-((k * k) as f64) / 8.0).exp() / std::f64::consts::SQRT_2;
                C::new(w * rng.normal(), w * rng.normal())
            })
            .collect()
    }

    /// Advance by `n_inner` integrating-factor RK4 steps; fails if a mode
    /// exceeds the blowup threshold. The linear part is integrated exactly:
    /// plain RK4 at this step is unstable for the strongly damped top modes.
    pub fn advance(&mut self, v: &mut [C], n_inner: usize, ws: &mut IfRk4) -> Result<()> {
        let h = self.params.dt_inner;
        ws.prepare(&self.lin, h);
        for _ in 0..n_inner {
            ws.step(v, h, |y, dy| self.nonlinear(y, dy));
            if !v.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return Err(Error::NonFinite);
            }
        }
        if v.iter().any(|z| z.norm() >= BLOWUP_THRESHOLD) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    pub fn var_names(&self) -> Vec<String> {
        (1..=self.n_modes())
            .flat_map(|k| [format!("re(v[{k}])"), format!("im(v[{k}])")])
            .collect()
    }

    /// Record `n_obs` observations from `v0` (no spin-up).
    pub fn run_from(&mut self, v0: &[C], n_obs: usize, seed: u64) -> Result<TimeSeries> {
        let sub = self.params.substeps()?;
        let mut v = v0.to_vec();
        let mut ws = IfRk4::new(v.len());
        let mut vals = Vec::with_capacity(n_obs * 2 * v.len());
        push(&v, &mut vals);
        for t in 1..n_obs {
            self.advance(&mut v, sub, &mut ws).map_err(|e| e.at_step(t))?;
            push(&v, &mut vals);
        }
        TimeSeries::new(vals, 2 * v.len(), self.params.dt_obs, self.var_names(), seed)
    }

    /// Spin up from a random state for `transient` time units.
    pub fn spun_up_state(&mut self, seed: u64) -> Result<Vec<C>> {
        let mut rng = Rng::new(seed);
        let mut v = self.random_state(&mut rng);
        let sub = self.params.substeps()?;
        let mut ws = IfRk4::new(v.len());
        let spin = (self.params.transient / self.params.dt_obs).round() as usize;
        for t in 0..spin {
            self.advance(&mut v, sub, &mut ws).map_err(|e| e.at_step(t))?;
        }
        Ok(v)
    }
}

/// Lawson RK4 for `dv/dt = diag(lin) v + N(v)`: classical RK4 applied to
/// `e^{-lin t} v`, so the linear flow is exact.
#[derive(Clone, Debug, Default)]
pub struct IfRk4 {
    e_half: Vec<f64>,
    e_full: Vec<f64>,
    h: f64,
    k: [Vec<C>; 4],
    y: Vec<C>,
}

impl IfRk4 {
    pub fn new(n: usize) -> Self {
        IfRk4 {
            k: std::array::from_fn(|_| vec![C::default(); n]),
            y: vec![C::default(); n],
            ..Default::default()
        }
    }

    fn prepare(&mut self, lin: &[f64], h: f64) {
        if self.h != h || self.e_full.len() != lin.len() {
            self.e_half = lin.iter().map(|l| (0.5 * h * l).exp()).collect();
            self.e_full = lin.iter().map(|l| (h * l).exp()).collect();
            self.h = h;
        }
    }

    fn step<F: FnMut(&[C], &mut [C])>(&mut self, v: &mut [C], h: f64, mut nl: F) {
        let n = v.len();
        let (e2, e) = (&self.e_half, &self.e_full);
        let [k1, k2, k3, k4] = &mut self.k;
        nl(v, k1);
        for j in 0..n {
            self.y[j] = e2[j] * (v[j] + 0.5 * h * k1[j]);
        }
        nl(&self.y, k2);
        for j in 0..n {
            self.y[j] = e2[j] * v[j] + 0.5 * h * k2[j];
        }
        nl(&self.y, k3);
        for j in 0..n {
            self.y[j] = e[j] * v[j] + h * e2[j] * k3[j];
        }
        nl(&self.y, k4);
        for j in 0..n {
            v[j] = e[j] * v[j] + h / 6.0 * (e[j] * k1[j] + 2.0 * e2[j] * (k2[j] + k3[j]) + k4[j]);
        }
    }
}

fn push(v: &[C], out: &mut Vec<f64>) {
    for z in v {
        out.push(z.re);
        out.push(z.im);
    }
}

pub fn unpack(row: &[f64]) -> Vec<C> {
    row.chunks_exact(2).map(|c| C::new(c[0], c[1])).collect()
}

/// Simulate from a small random smooth state, discard the transient and
/// record `n_obs` observations of all modes.
pub fn simulate_kse(p: &KseParams, n_obs: usize, seed_init: u64) -> Result<TimeSeries> {
    if n_obs == 0 {
        return Err(Error::InvalidParameter("n_obs must be at least 1".into()));
    }
    let mut model = KseModel::new(p.clone())?;
    let v = model.spun_up_state(seed_init)?;
    model.run_from(&v, n_obs, seed_init)
}

/// Truncated right-hand side on the first `v.len()` modes:
/// `(q_k^2 - q_k^4) v_k - (i q_k/2) sum_{1<=|l|,|k-l|<=n} v_l v_{k-l}`.
pub fn kse_resolved_rhs(p: &KseParams, v: &[C], dv: &mut [C]) {
    let n = v.len() as i64;
    let at = |l: i64| -> C {
        if l == 0 || l.abs() > n {
            C::default()
        } else if l > 0 {
            v[(l - 1) as usize]
        } else {
            v[(-l - 1) as usize].conj()
        }
    };
    for k in 1..=n {
        let mut s = C::default();
        for l in (k - n).max(-n)..=n.min(k + n) {
            s += at(l) * at(k - l);
        }
        let j = (k - 1) as usize;
        dv[j] = v[j] * p.growth(k) - C::i() * (0.5 * p.q(k)) * s;
    }
}
