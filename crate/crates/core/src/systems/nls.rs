//! Cubic NLS `i u_t = -u_xx + |u|^2 u` on `[0, 2pi)`, truncated to `|k| <= K`.
//!
//! Spectra are stored `k = -K..=K`; in files each mode occupies the two
//! columns `re(u[k]), im(u[k])`.

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::StrangNls;
use crate::rng::Rng;
use crate::series::TimeSeries;
use crate::spectral::{slot, Fft1};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NlsParams {
    pub k_modes: usize,
    pub dt_obs: f64,
    pub kbt: f64,
    #[serde(default = "default_inner")]
    pub dt_inner: f64,
}

fn default_inner() -> f64 {
    0.002
}

impl Default for NlsParams {
    fn default() -> Self {
        NlsParams {
            k_modes: 32,
            dt_obs: 0.02,
            kbt: 10.0,
            dt_inner: default_inner(),
        }
    }
}

impl NlsParams {
    pub fn n_modes(&self) -> usize {
        2 * self.k_modes + 1
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
        if self.k_modes == 0 || !(self.kbt > 0.0) {
            return Err(Error::InvalidParameter(format!("invalid NLS parameters {self:?}")));
        }
        self.substeps().map(|_| ())
    }

    /// Column pair holding `u_0` in a full-spectrum series.
    pub fn zero_mode_columns(&self) -> [usize; 2] {
        [2 * self.k_modes, 2 * self.k_modes + 1]
    }
}

pub fn nls_mass(u: &[C]) -> f64 {
    u.iter().map(|z| z.norm_sqr()).sum()
}

pub fn nls_e2(u: &[C]) -> f64 {
    let kk = (u.len() / 2) as i64;
    u.iter()
        .enumerate()
        .map(|(j, z)| {
            let k = (j as i64 - kk) as f64;
            k * k * z.norm_sqr()
        })
        .sum()
}

/// Quartic energy `E4 = 1/2 mean_x |u(x)|^4` of the truncated field, exact
/// on a zero-padded grid of `4K+1` points.
#[derive(Clone)]
pub struct QuarticEnergy {
    k_modes: usize,
    fft: Fft1,
    buf: Vec<C>,
}

impl QuarticEnergy {
    pub fn new(k_modes: usize) -> Self {
        let n = 4 * k_modes + 1;
        QuarticEnergy {
            k_modes,
            fft: Fft1::new(n),
            buf: vec![C::default(); n],
        }
    }

    pub fn eval(&mut self, u: &[C]) -> f64 {
        let n = self.buf.len();
        let kk = self.k_modes as i64;
        self.buf.fill(C::default());
        for (j, z) in u.iter().enumerate() {
            self.buf[slot(j as i64 - kk, n)] = *z;
        }
        self.fft.inverse(&mut self.buf);
        0.5 * self.buf.iter().map(|z| z.norm_sqr().powi(2)).sum::<f64>() / n as f64
    }
}

pub fn nls_e4(u: &[C]) -> f64 {
    QuarticEnergy::new(u.len() / 2).eval(u)
}

pub fn nls_energy(u: &[C]) -> f64 {
    nls_e2(u) + nls_e4(u)
}

pub fn var_names(k_modes: usize) -> Vec<String> {
    let kk = k_modes as i64;
    (-kk..=kk)
        .flat_map(|k| [format!("re(u[{k}])"), format!("im(u[{k}])")])
        .collect()
}

pub fn pack(u: &[C], row: &mut Vec<f64>) {
    for z in u {
        row.push(z.re);
        row.push(z.im);
    }
}

pub fn unpack(row: &[f64]) -> Vec<C> {
    row.chunks_exact(2).map(|c| C::new(c[0], c[1])).collect()
}

/// Record `n_obs` spectra every `dt_obs`, the first being `u_init`.
pub fn simulate_nls(p: &NlsParams, n_obs: usize, u_init: &[C]) -> Result<TimeSeries> {
    p.validate()?;
    if u_init.len() != p.n_modes() {
        return Err(Error::Shape(format!("initial spectrum has {} modes, expected {}", u_init.len(), p.n_modes())));
    }
    if n_obs == 0 {
        return Err(Error::InvalidParameter("n_obs must be at least 1".into()));
    }
    let sub = p.substeps()?;
    let mut st = StrangNls::new(p.k_modes);
    let mut u = u_init.to_vec();
    let mut vals = Vec::with_capacity(n_obs * 2 * p.n_modes());
    pack(&u, &mut vals);
    for t in 1..n_obs {
        for _ in 0..sub {
            st.step(&mut u, p.dt_inner).map_err(|e| e.at_step(t))?;
        }
        pack(&u, &mut vals);
    }
    TimeSeries::new(vals, 2 * p.n_modes(), p.dt_obs, var_names(p.k_modes), 0)
}

/// `log pi(to) - log pi(from)` for the Gibbs density `exp(-E/kBT)`.
pub fn metropolis_log_ratio(p: &NlsParams, from: &[C], to: &[C]) -> f64 {
    -(nls_energy(to) - nls_energy(from)) / p.kbt
}

#[derive(Clone, Debug)]
pub struct GibbsDraws {
    pub samples: Vec<Vec<C>>,
    /// Acceptance rate after burn-in.
    pub acceptance: f64,
    /// Tuned global proposal multiplier.
    pub scale: f64,
}

/// Random-walk Metropolis targeting `exp(-(E2 + E4)/kBT)`.
///
/// Each proposal perturbs every coefficient with an independent complex
/// Gaussian whose per-mode width follows the quadratic part of the energy.
/// The global multiplier is adapted during burn-in towards 0.3 acceptance and
/// frozen afterwards. Returns `n_samples` states spaced `n_thin` iterations
/// apart.
pub fn nls_gibbs_chain(p: &NlsParams, seed: u64, n_burn: usize, n_thin: usize, n_samples: usize) -> Result<GibbsDraws> {
    p.validate()?;
    let kk = p.k_modes as i64;
    let n = p.n_modes();
    let mut rng = Rng::new(seed);
    let mut quartic = QuarticEnergy::new(p.k_modes);
    // Effective stiffness: k^2 plus a rough mean-field contribution of E4.
    let stiff: Vec<f64> = (0..n)
        .map(|j| {
            let k = (j as i64 - kk) as f64;
            k * k + 2.0 * p.kbt.sqrt() + 1.0
        })
        .collect();
    let width: Vec<f64> = stiff.iter().map(|s| (p.kbt / (2.0 * s)).sqrt()).collect();
    let mut u: Vec<C> = width.iter().map(|w| C::new(w * rng.normal(), w * rng.normal())).collect();
    let mut energy = nls_e2(&u) + quartic.eval(&u);
    let mut prop = u.clone();
    let mut scale = 2.4 / (2.0 * n as f64).sqrt();
    let (mut acc_win, mut win) = (0usize, 0usize);
    let (mut acc_post, mut n_post) = (0usize, 0usize);
    let mut samples = Vec::with_capacity(n_samples);
    let total = n_burn + n_thin.max(1) * n_samples;
    for it in 0..total {
        for j in 0..n {
            let w = width[j] * scale;
            prop[j] = u[j] + C::new(w * rng.normal(), w * rng.normal());
        }
        let e_new = nls_e2(&prop) + quartic.eval(&prop);
        let accept = rng.uniform().ln() < -(e_new - energy) / p.kbt;
        if accept {
            std::mem::swap(&mut u, &mut prop);
            energy = e_new;
        }
        if it < n_burn {
            acc_win += accept as usize;
            win += 1;
            if win == 200 {
                let rate = acc_win as f64 / win as f64;
                scale *= ((rate - 0.3) * 2.0).exp();
                acc_win = 0;
                win = 0;
            }
        } else {
            acc_post += accept as usize;
            n_post += 1;
            if (it + 1 - n_burn) % n_thin.max(1) == 0 {
                samples.push(u.clone());
            }
        }
    }
    let acceptance = if n_post > 0 { acc_post as f64 / n_post as f64 } else { f64::NAN };
    if !(0.1..=0.7).contains(&acceptance) {
        log::warn!("Gibbs sampler acceptance {acceptance:.3} outside [0.1, 0.7] after tuning");
    }
    if !energy.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(GibbsDraws { samples, acceptance, scale })
}

/// One post-burn-in, thinned draw from the Gibbs measure.
pub fn nls_gibbs_sample(p: &NlsParams, seed: u64, n_burn: usize, n_thin: usize) -> Result<(Vec<C>, f64)> {
    let d = nls_gibbs_chain(p, seed, n_burn, n_thin, 1)?;
    Ok((d.samples.into_iter().next().expect("one sample requested"), d.acceptance))
}
