//! Stochastic 57-mode topographic mean-flow model.
//!
//! Fourier convention `f(x) = sum_k f_k e^{i k.x}` on `[0, 2pi)^2`, stream
//! function `psi_k = -omega_k / |k|^2`, potential vorticity `q = omega + h`.
//! Only half-plane representatives of `omega` are stored; `omega_{-k}` is the
//! complex conjugate by construction.
//!
//! ```text
//! du/dt       = theta - d (u - u_eq) + sigma mu^{-1/2} dW_0
//! theta       = i sum_k (k_x/|k|^2) h_k conj(omega_k)
//! domega_k/dt = -[grad^perp psi . grad q]_k + i k_x (beta/|k|^2 - u) omega_k
//!               - i k_x h_k u - d (omega_k - omega_eq,k) + sigma_k dW_k
//! ```

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::Rk4;
use crate::rng::Rng;
use crate::series::TimeSeries;
use crate::spectral::{slot, Fft2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopoRegime {
    Weak,
    Intermediate,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopoParams {
    pub k_cutoff: u32,
    pub beta: f64,
    pub mu: f64,
    pub d_bar: f64,
    pub h_amp: f64,
    /// Forcing scale; `None` means `sqrt(2 d_bar)` so that `sigma^2/(2 d_bar) = 1`.
    #[serde(default)]
    pub sigma: Option<f64>,
    pub dt_inner: f64,
    pub dt_obs: f64,
    /// Spin-up discarded before recording, in time units.
    #[serde(default = "default_transient")]
    pub transient: f64,
}

fn default_transient() -> f64 {
    1000.0
}

impl TopoParams {
    pub fn regime(r: TopoRegime) -> Self {
        let s2 = std::f64::consts::SQRT_2;
        let (h_amp, d_bar) = match r {
            TopoRegime::Weak => (3.0 * s2 / 4.0, 0.5),
            TopoRegime::Intermediate => (5.0 * s2 / 4.0, 0.1),
            TopoRegime::Strong => (7.0 * s2 / 4.0, 0.1),
        };
        TopoParams {
            k_cutoff: 17,
            beta: 1.0,
            mu: 2.0,
            d_bar,
            h_amp,
            sigma: None,
            dt_inner: 2.5e-3,
            dt_obs: 0.05,
            transient: default_transient(),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| (2.0 * self.d_bar).sqrt())
    }

    pub fn u_eq(&self) -> f64 {
        -self.beta / self.mu
    }

    /// Amplitude of the mean-flow noise, `sigma mu^{-1/2}`.
    pub fn sigma_u(&self) -> f64 {
        self.sigma() / self.mu.sqrt()
    }

    /// Inner steps per observation.
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
        if self.k_cutoff < 1 || !(self.mu > 0.0) || !(self.d_bar >= 0.0) || !(self.sigma() >= 0.0) {
            return Err(Error::InvalidParameter(format!("invalid topographic parameters {self:?}")));
        }
        if !(self.transient >= 0.0) {
            return Err(Error::InvalidParameter("transient must be nonnegative".into()));
        }
        self.substeps().map(|_| ())
    }
}

/// Half-plane representatives of `1 <= kx^2 + ky^2 <= k_cutoff`
/// (`kx > 0`, or `kx == 0` and `ky > 0`), sorted by `|k|^2`.
pub fn topo_mode_set(k_cutoff: u32) -> Vec<(i32, i32)> {
    let r = (k_cutoff as f64).sqrt() as i32 + 1;
    let mut v = Vec::new();
    for kx in 0..=r {
        for ky in -r..=r {
            let k2 = (kx * kx + ky * ky) as u32;
            if (1..=k_cutoff).contains(&k2) && (kx > 0 || ky > 0) {
                v.push((kx, ky));
            }
        }
    }
    v.sort_by_key(|&(kx, ky)| (kx * kx + ky * ky, -kx, -ky));
    v
}

const MAX_REPS: usize = 64;

#[derive(Clone, Copy, Debug)]
struct Triad {
    n: usize,
    p: usize,
    r: usize,
    coef: f64,
}

/// Precomputed mode tables for one parameter set.
#[derive(Clone, Debug)]
pub struct TopoModel {
    pub params: TopoParams,
    reps: Vec<(i32, i32)>,
    k2: Vec<f64>,
    h_hat: Vec<C>,
    omega_eq: Vec<C>,
    sigma_k: Vec<f64>,
    theta_coef: Vec<C>,
    triads: Vec<Triad>,
}

impl TopoModel {
    pub fn new(params: TopoParams) -> Result<Self> {
        params.validate()?;
        let reps = topo_mode_set(params.k_cutoff);
        let nr = reps.len();
        if nr > MAX_REPS {
            return Err(Error::InvalidParameter(format!(
                "k_cutoff {} gives {nr} modes, at most {MAX_REPS} supported",
                params.k_cutoff
            )));
        }
        let k2: Vec<f64> = reps.iter().map(|&(x, y)| (x * x + y * y) as f64).collect();
        // h = H (cos x + sin x): h_(1,0) = H (1 - i)/2.
        let h_hat: Vec<C> = reps
            .iter()
            .map(|&k| if k == (1, 0) { C::new(0.5, -0.5) * params.h_amp } else { C::default() })
            .collect();
        let omega_eq = (0..nr).map(|j| -h_hat[j] * k2[j] / (params.mu + k2[j])).collect();
        let sigma = params.sigma();
        let sigma_k = k2.iter().map(|&q| sigma / (1.0 + params.mu / q).sqrt()).collect();
        // theta = sum over pairs of 2 Re(i kx/|k|^2 h_k conj(omega_k)).
        let theta_coef = (0..nr)
            .map(|j| C::i() * h_hat[j] * (2.0 * reps[j].0 as f64 / k2[j]))
            .collect();

        let signed = Self::signed_of(&reps);
        let index = |k: (i32, i32)| signed.iter().position(|&s| s == k);
        let mut triads = Vec::new();
        for (n, &nk) in reps.iter().enumerate() {
            for (p, &pk) in signed.iter().enumerate() {
                let rk = (nk.0 - pk.0, nk.1 - pk.1);
                if let Some(r) = index(rk) {
                    let coef = (pk.0 * rk.1 - pk.1 * rk.0) as f64;
                    if coef != 0.0 {
                        triads.push(Triad { n, p, r, coef });
                    }
                }
            }
        }
        Ok(TopoModel {
            params,
            reps,
            k2,
            h_hat,
            omega_eq,
            sigma_k,
            theta_coef,
            triads,
        })
    }

    fn signed_of(reps: &[(i32, i32)]) -> Vec<(i32, i32)> {
        reps.iter().copied().chain(reps.iter().map(|&(x, y)| (-x, -y))).collect()
    }

    pub fn reps(&self) -> &[(i32, i32)] {
        &self.reps
    }

    /// Representatives followed by their negatives.
    pub fn signed_modes(&self) -> Vec<(i32, i32)> {
        Self::signed_of(&self.reps)
    }

    pub fn n_modes(&self) -> usize {
        self.reps.len()
    }

    /// Real degrees of freedom including the mean flow.
    pub fn dof(&self) -> usize {
        1 + 2 * self.reps.len()
    }

    pub fn h_hat(&self) -> &[C] {
        &self.h_hat
    }
    pub fn omega_eq(&self) -> &[C] {
        &self.omega_eq
    }
    pub fn sigma_k(&self) -> &[f64] {
        &self.sigma_k
    }
    pub fn k2(&self) -> &[f64] {
        &self.k2
    }

    /// Expand representatives to the signed ordering of [`Self::signed_modes`].
    pub fn expand(&self, omega: &[C]) -> Vec<C> {
        omega.iter().copied().chain(omega.iter().map(|w| w.conj())).collect()
    }

    #[inline]
    pub fn theta_from_reps(&self, omega: &[C]) -> f64 {
        self.theta_coef
            .iter()
            .zip(omega)
            .map(|(a, w)| a.re * w.re + a.im * w.im)
            .sum()
    }

    /// Nonlinear advection `-[grad^perp psi . grad q]` projected onto the
    /// representatives, by direct triad summation.
    pub fn advection(&self, omega: &[C], out: &mut [C]) {
        let nr = self.reps.len();
        let mut psi = [C::default(); 2 * MAX_REPS];
        let mut q = [C::default(); 2 * MAX_REPS];
        for j in 0..nr {
            let p = -omega[j] / self.k2[j];
            let qq = omega[j] + self.h_hat[j];
            psi[j] = p;
            psi[j + nr] = p.conj();
            q[j] = qq;
            q[j + nr] = qq.conj();
        }
        out[..nr].fill(C::default());
        for t in &self.triads {
            out[t.n] += psi[t.p] * q[t.r] * t.coef;
        }
    }

    /// Deterministic right-hand side; `s[0]` holds `u` (imaginary part
    /// ignored), `s[1..]` the representatives.
    pub fn rhs(&self, s: &[C], ds: &mut [C]) {
        let p = &self.params;
        let u = s[0].re;
        let omega = &s[1..];
        let theta = self.theta_from_reps(omega);
        ds[0] = C::new(theta - p.d_bar * (u - p.u_eq()), 0.0);
        let out = &mut ds[1..];
        self.advection(omega, out);
        for j in 0..self.reps.len() {
            let kx = self.reps[j].0 as f64;
            out[j] += C::i() * kx * (p.beta / self.k2[j] - u) * omega[j]
                - C::i() * kx * self.h_hat[j] * u
                - (omega[j] - self.omega_eq[j]) * p.d_bar;
        }
    }

    /// Draw `(u, omega)` from the linearized equilibrium: Gaussian about the
    /// means with `var(u) = sigma_u^2/(2d)` and `E|omega_k - omega_eq|^2 = sigma_k^2/(2d)`.
    pub fn random_state(&self, rng: &mut Rng) -> Vec<C> {
        let p = &self.params;
        let d = p.d_bar.max(1e-12);
        let mut s = vec![C::default(); 1 + self.reps.len()];
        s[0] = C::new(p.u_eq() + p.sigma_u() / (2.0 * d).sqrt() * rng.normal(), 0.0);
        for j in 0..self.reps.len() {
            let a = self.sigma_k[j] / (4.0 * d).sqrt();
            s[1 + j] = self.omega_eq[j] + C::new(a * rng.normal(), a * rng.normal());
        }
        s
    }

    /// Advance `s` by `n_inner` RK4 sub-steps with Euler-Maruyama noise.
    pub fn advance(&self, s: &mut [C], n_inner: usize, rk: &mut Rk4<C>, rng: &mut Rng) -> Result<()> {
        let dt = self.params.dt_inner;
        let su = self.params.sigma_u() * dt.sqrt();
        let half = (0.5 * dt).sqrt();
        for _ in 0..n_inner {
            rk.step(s, |y, dy| self.rhs(y, dy), dt)?;
            if su > 0.0 {
                s[0].re += su * rng.normal();
                for j in 0..self.reps.len() {
                    let a = self.sigma_k[j] * half;
                    s[1 + j] += C::new(a * rng.normal(), a * rng.normal());
                }
            }
        }
        Ok(())
    }

    pub fn var_names(&self) -> Vec<String> {
        let mut v = vec!["u".to_string()];
        for &(x, y) in &self.reps {
            v.push(format!("re(w[{x},{y}])"));
            v.push(format!("im(w[{x},{y}])"));
        }
        v
    }

    /// Pack a state as a real row `[u, re w_1, im w_1, ...]`.
    pub fn pack(&self, s: &[C], row: &mut Vec<f64>) {
        row.push(s[0].re);
        for w in &s[1..] {
            row.push(w.re);
            row.push(w.im);
        }
    }

    pub fn unpack(&self, row: &[f64]) -> Vec<C> {
        let mut s = vec![C::new(row[0], 0.0)];
        s.extend(row[1..].chunks_exact(2).map(|c| C::new(c[0], c[1])));
        s
    }

    /// Record `n_obs` observations starting from `s0` (no spin-up).
    pub fn run_from(&self, s0: &[C], n_obs: usize, rng: &mut Rng, seed: u64) -> Result<TimeSeries> {
        let sub = self.params.substeps()?;
        let mut s = s0.to_vec();
        let mut rk = Rk4::new(s.len());
        let mut vals = Vec::with_capacity(n_obs * self.dof());
        self.pack(&s, &mut vals);
        for t in 1..n_obs {
            self.advance(&mut s, sub, &mut rk, rng).map_err(|e| e.at_step(t))?;
            self.pack(&s, &mut vals);
        }
        TimeSeries::new(vals, self.dof(), self.params.dt_obs, self.var_names(), seed)
    }

    /// Pseudo-spectral evaluation of the advection term on an `n x n` grid,
    /// used to cross-check [`Self::advection`]. Fails if a physical field
    /// picks up an imaginary part above `1e-10`.
    pub fn advection_pseudospectral(&self, omega: &[C], n: usize, fft: &mut Fft2) -> Result<Vec<C>> {
        let signed = self.signed_modes();
        let full = self.expand(omega);
        let nr = self.reps.len();
        let mut fields = vec![vec![C::default(); n * n]; 4];
        for (j, &(kx, ky)) in signed.iter().enumerate() {
            let k2 = (kx * kx + ky * ky) as f64;
            let psi = -full[j] / k2;
            let h = if j < nr { self.h_hat[j] } else { self.h_hat[j - nr].conj() };
            let q = full[j] + h;
            let idx = slot(ky as i64, n) * n + slot(kx as i64, n);
            fields[0][idx] = C::i() * kx as f64 * psi;
            fields[1][idx] = C::i() * ky as f64 * psi;
            fields[2][idx] = C::i() * kx as f64 * q;
            fields[3][idx] = C::i() * ky as f64 * q;
        }
        let mut scale = 0.0f64;
        for f in fields.iter_mut() {
            fft.inverse(f);
            scale = f.iter().fold(scale, |m, z| m.max(z.norm()));
        }
        let tol = 1e-10 * scale.max(1.0);
        if fields.iter().flatten().any(|z| z.im.abs() > tol) {
            return Err(Error::Consistency("physical field is not real; conjugate symmetry broken".into()));
        }
        // -(-psi_y q_x + psi_x q_y)
        let mut prod: Vec<C> = (0..n * n)
            .map(|i| C::new(fields[1][i].re * fields[2][i].re - fields[0][i].re * fields[3][i].re, 0.0))
            .collect();
        fft.forward(&mut prod);
        let norm = 1.0 / (n * n) as f64;
        let cut = n as i64 / 3;
        Ok(self
            .reps
            .iter()
            .map(|&(kx, ky)| {
                debug_assert!((kx as i64).abs() <= cut && (ky as i64).abs() <= cut);
                prod[slot(ky as i64, n) * n + slot(kx as i64, n)] * norm
            })
            .collect())
    }
}

/// Identifiable variable from the full signed spectrum (ordering of
/// [`TopoModel::signed_modes`]). Checks conjugate symmetry first.
pub fn theta_topo(omega_signed: &[C], model: &TopoModel) -> Result<f64> {
    let nr = model.n_modes();
    if omega_signed.len() != 2 * nr {
        return Err(Error::Shape(format!("{} signed modes, expected {}", omega_signed.len(), 2 * nr)));
    }
    let scale = omega_signed.iter().fold(1.0f64, |m, z| m.max(z.norm()));
    for j in 0..nr {
        if (omega_signed[j + nr] - omega_signed[j].conj()).norm() > 1e-10 * scale {
            return Err(Error::Consistency(format!("omega_-k != conj(omega_k) for mode {:?}", model.reps[j])));
        }
    }
    let signed = model.signed_modes();
    let mut acc = C::default();
    for (j, &(kx, ky)) in signed.iter().enumerate() {
        let h = if j < nr { model.h_hat[j] } else { model.h_hat[j - nr].conj() };
        acc += C::i() * (kx as f64 / (kx * kx + ky * ky) as f64) * h * omega_signed[j].conj();
    }
    if acc.im.abs() > 1e-12 * scale.max(acc.re.abs()) {
        return Err(Error::Consistency(format!("theta has imaginary residue {}", acc.im)));
    }
    Ok(acc.re)
}

/// Simulate, discarding the spin-up, and record `n_obs` observations of
/// `(u, omega)` at `dt_obs`.
pub fn simulate_topo(p: &TopoParams, n_obs: usize, seed: u64) -> Result<TimeSeries> {
    if n_obs == 0 {
        return Err(Error::InvalidParameter("n_obs must be at least 1".into()));
    }
    let model = TopoModel::new(p.clone())?;
    let mut rng = Rng::new(seed);
    let mut s = model.random_state(&mut rng);
    let sub = p.substeps()?;
    let spin = (p.transient / p.dt_obs).round() as usize;
    let mut rk = Rk4::new(s.len());
    for t in 0..spin {
        model.advance(&mut s, sub, &mut rk, &mut rng).map_err(|e| e.at_step(t))?;
    }
    model.run_from(&s, n_obs, &mut rng, seed)
}

/// `theta_t` computed from the recorded vorticity columns of a full series.
pub fn theta_series(model: &TopoModel, full: &TimeSeries) -> Result<TimeSeries> {
    if full.n_vars() != model.dof() {
        return Err(Error::Shape(format!("{} columns, expected {}", full.n_vars(), model.dof())));
    }
    let v = (0..full.n_steps())
        .map(|t| model.theta_from_reps(&model.unpack(full.row(t))[1..]))
        .collect();
    TimeSeries::new(v, 1, full.dt(), vec!["theta".into()], full.seed())
}
