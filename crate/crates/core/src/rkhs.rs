//! Tensor-product Hermite expansion of the conditional expectation.
//!
//! Inputs are standardized per dimension and expanded in normalized
//! probabilists' Hermite polynomials `He_n(x)/sqrt(n!)`, which are orthonormal
//! under the standard Gaussian. The retained multi-indices satisfy per-dimension
//! caps and a total-degree cap. Coefficients solve a ridge-regularized least
//! squares problem whose Gram matrix is accumulated in row blocks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{ClosureEstimator, EstimatorKind};
use crate::io;
use crate::linalg;
use crate::series::{DelayDataset, DelayVector};

pub const FORMAT_VERSION: u32 = 1;
const REFINE_STEPS: usize = 2;

/// Normalized probabilists' Hermite polynomial `He_n(x)/sqrt(n!)`.
pub fn hermite_eval(n: usize, x: f64) -> f64 {
    let mut h = vec![0.0; n + 1];
    hermite_all(n, x, &mut h);
    h[n]
}

/// `out[j] = He_j(x)/sqrt(j!)` for `j = 0..=nmax`, by the normalized recurrence
/// `h_{n+1} = (x h_n - sqrt(n) h_{n-1}) / sqrt(n+1)`.
#[inline]
pub fn hermite_all(nmax: usize, x: f64, out: &mut [f64]) {
    out[0] = 1.0;
    if nmax == 0 {
        return;
    }
    out[1] = x;
    for n in 1..nmax {
        out[n + 1] = (x * out[n] - (n as f64).sqrt() * out[n - 1]) / ((n + 1) as f64).sqrt();
    }
}

/// All multi-indices with `alpha_i <= degrees[i]` and `sum alpha <= total`,
/// in graded order (constant first).
pub fn multi_indices(degrees: &[usize], total: usize) -> Vec<Vec<u16>> {
    let mut out = Vec::new();
    let mut cur = vec![0u16; degrees.len()];
    for t in 0..=total {
        fill(degrees, 0, t, &mut cur, &mut out);
    }
    out
}

fn fill(degrees: &[usize], i: usize, left: usize, cur: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
    if i == degrees.len() {
        if left == 0 {
            out.push(cur.clone());
        }
        return;
    }
    for a in (0..=degrees[i].min(left)).rev() {
        cur[i] = a as u16;
        fill(degrees, i + 1, left - a, cur, out);
    }
    cur[i] = 0;
}

/// Behaviour for inputs outside the standardized training range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extrapolation {
    /// Evaluate the polynomial as is.
    Polynomial,
    /// Clamp each standardized coordinate to its training min/max.
    Clamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RkhsOptions {
    /// Per-input-dimension maximum degree; a single entry applies to all.
    pub degrees: Vec<usize>,
    /// Total-degree cap; defaults to `max(degrees)`.
    #[serde(default)]
    pub total_degree: Option<usize>,
    #[serde(default = "default_ridge")]
    pub ridge_rel: f64,
    #[serde(default = "default_extrapolation")]
    pub extrapolation: Extrapolation,
    /// When false, the identity standardizer is used.
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default = "default_block")]
    pub block_rows: usize,
}

fn default_ridge() -> f64 {
    1e-8
}
fn default_extrapolation() -> Extrapolation {
    Extrapolation::Polynomial
}
fn default_true() -> bool {
    true
}
fn default_block() -> usize {
    4096
}

impl RkhsOptions {
    pub fn new(degrees: Vec<usize>) -> Self {
        RkhsOptions {
            degrees,
            total_degree: None,
            ridge_rel: default_ridge(),
            extrapolation: default_extrapolation(),
            standardize: true,
            block_rows: default_block(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HermiteManifest {
    pub format_version: u32,
    pub kind: EstimatorKind,
    pub degrees: Vec<usize>,
    pub total_degree: usize,
    pub m: usize,
    pub d_x: usize,
    pub d_theta_in: usize,
    pub output_dim: usize,
    pub n_basis: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub extrapolation: Extrapolation,
    pub residual_variance: Vec<f64>,
    pub ridge: f64,
}

#[derive(Clone, Debug)]
pub struct HermiteModel {
    pub degrees: Vec<usize>,
    pub total_degree: usize,
    pub m: usize,
    pub d_x: usize,
    pub d_theta_in: usize,
    pub output_dim: usize,
    /// Flattened `n_basis × dim` multi-indices.
    index: Vec<u16>,
    n_basis: usize,
    /// `n_basis × output_dim`, row-major.
    pub coeffs: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Standardized training range per dimension.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub extrapolation: Extrapolation,
    pub residual_variance: Vec<f64>,
    pub ridge: f64,
}

impl HermiteModel {
    fn build_index(degrees: &[usize], total: usize) -> (Vec<u16>, usize) {
        let mi = multi_indices(degrees, total);
        let n = mi.len();
        (mi.into_iter().flatten().collect(), n)
    }

    pub fn dim(&self) -> usize {
        self.degrees.len()
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn multi_index(&self, b: usize) -> &[u16] {
        let d = self.dim();
        &self.index[b * d..(b + 1) * d]
    }

    fn max_degree(&self) -> usize {
        self.degrees.iter().copied().max().unwrap_or(0)
    }

    /// Standardize `z`, returning whether any coordinate left the training range.
    fn standardize(&self, z: &[f64], s: &mut [f64]) -> bool {
        let mut outside = false;
        for i in 0..z.len() {
            let mut v = (z[i] - self.mean[i]) / self.scale[i];
            if v < self.lo[i] || v > self.hi[i] {
                outside = true;
                if self.extrapolation == Extrapolation::Clamp {
                    v = v.clamp(self.lo[i], self.hi[i]);
                }
            }
            s[i] = v;
        }
        outside
    }

    /// Hermite tables `(dim × (maxdeg+1))` for standardized `s`.
    fn tables(&self, s: &[f64], tab: &mut [f64]) {
        let w = self.max_degree() + 1;
        for (i, &x) in s.iter().enumerate() {
            hermite_all(self.degrees[i], x, &mut tab[i * w..(i + 1) * w]);
        }
    }

    fn basis_row(&self, tab: &[f64], row: &mut [f64]) {
        let d = self.dim();
        let w = self.max_degree() + 1;
        for (b, r) in row.iter_mut().enumerate() {
            let mi = &self.index[b * d..(b + 1) * d];
            let mut v = 1.0;
            for i in 0..d {
                v *= tab[i * w + mi[i] as usize];
            }
            *r = v;
        }
    }

    /// Evaluate and report whether the input was outside the training range.
    pub fn predict_checked(&self, z: &[f64], out: &mut [f64]) -> Result<bool> {
        let d = self.dim();
        if z.len() != d || out.len() != self.output_dim {
            return Err(Error::Shape(format!(
                "input {} / output {} for a model of {d} -> {}",
                z.len(),
                out.len(),
                self.output_dim
            )));
        }
        let w = self.max_degree() + 1;
        let mut s = vec![0.0; d];
        let mut tab = vec![0.0; d * w];
        let outside = self.standardize(z, &mut s);
        self.tables(&s, &mut tab);
        out.fill(0.0);
        let d_o = self.output_dim;
        for b in 0..self.n_basis {
            let mi = &self.index[b * d..(b + 1) * d];
            let mut v = 1.0;
            for i in 0..d {
                v *= tab[i * w + mi[i] as usize];
            }
            let c = &self.coeffs[b * d_o..(b + 1) * d_o];
            for j in 0..d_o {
                out[j] += v * c[j];
            }
        }
        Ok(outside)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let man = HermiteManifest {
            format_version: FORMAT_VERSION,
            kind: EstimatorKind::Rkhs,
            degrees: self.degrees.clone(),
            total_degree: self.total_degree,
            m: self.m,
            d_x: self.d_x,
            d_theta_in: self.d_theta_in,
            output_dim: self.output_dim,
            n_basis: self.n_basis,
            mean: self.mean.clone(),
            scale: self.scale.clone(),
            lo: self.lo.clone(),
            hi: self.hi.clone(),
            extrapolation: self.extrapolation,
            residual_variance: self.residual_variance.clone(),
            ridge: self.ridge,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&man)?)?;
        io::write_f64_bin(&dir.join("coeffs.bin"), &self.coeffs)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man: HermiteManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        if man.format_version != FORMAT_VERSION || man.kind != EstimatorKind::Rkhs {
            return Err(Error::Format(format!(
                "not an rkhs checkpoint of version {FORMAT_VERSION}"
            )));
        }
        let (index, n_basis) = Self::build_index(&man.degrees, man.total_degree);
        if n_basis != man.n_basis {
            return Err(Error::Format(format!("manifest says {} basis functions, degrees give {n_basis}", man.n_basis)));
        }
        let coeffs = io::read_f64_bin(&dir.join("coeffs.bin"), n_basis * man.output_dim)?;
        Ok(HermiteModel {
            degrees: man.degrees,
            total_degree: man.total_degree,
            m: man.m,
            d_x: man.d_x,
            d_theta_in: man.d_theta_in,
            output_dim: man.output_dim,
            index,
            n_basis,
            coeffs,
            mean: man.mean,
            scale: man.scale,
            lo: man.lo,
            hi: man.hi,
            extrapolation: man.extrapolation,
            residual_variance: man.residual_variance,
            ridge: man.ridge,
        })
    }
}

impl ClosureEstimator for HermiteModel {
    fn kind(&self) -> EstimatorKind {
        EstimatorKind::Rkhs
    }
    fn memory(&self) -> usize {
        self.m
    }
    fn input_dim(&self) -> usize {
        self.dim()
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn residual_variance(&self) -> &[f64] {
        &self.residual_variance
    }
    fn predict_into(&self, input: &[f64], out: &mut [f64]) -> Result<()> {
        self.predict_checked(input, out).map(|_| ())
    }
    fn predict_batch(&self, inputs: &[f64], out: &mut [f64]) -> Result<()> {
        let (di, d_o) = (self.dim(), self.output_dim);
        if di == 0 || inputs.len() % di != 0 || out.len() != inputs.len() / di * d_o {
            return Err(Error::Shape(format!(
                "batch of {} values for input dim {di}, output buffer {}",
                inputs.len(),
                out.len()
            )));
        }
        let rows = inputs.len() / di;
        let chunks = crate::par::chunks(rows, 64);
        let parts: Vec<Result<Vec<f64>>> = crate::par::map(chunks.len(), |c| {
            let r = chunks[c].clone();
            let mut o = vec![0.0; r.len() * d_o];
            for (k, row) in r.clone().enumerate() {
                self.predict_checked(&inputs[row * di..(row + 1) * di], &mut o[k * d_o..(k + 1) * d_o])?;
            }
            Ok(o)
        });
        for (r, part) in chunks.iter().zip(parts) {
            out[r.start * d_o..r.end * d_o].copy_from_slice(&part?);
        }
        Ok(())
    }
}

/// Evaluate a fitted model on a delay vector; logs a warning when the input
/// lies outside the standardized training range.
pub fn rkhs_predict(model: &HermiteModel, z: &DelayVector) -> Result<Vec<f64>> {
    let flat = z.flatten();
    let mut out = vec![0.0; model.output_dim];
    if model.predict_checked(&flat, &mut out)? {
        log::warn!("rkhs input outside the training range; extrapolating");
    }
    Ok(out)
}

/// Least-squares fit of the truncated Hermite expansion.
pub fn fit_rkhs(data: &DelayDataset, opts: &RkhsOptions) -> Result<HermiteModel> {
    let dim = data.input_dim();
    let degrees: Vec<usize> = match opts.degrees.len() {
        1 => vec![opts.degrees[0]; dim],
        n if n == dim => opts.degrees.clone(),
        n => {
            return Err(Error::Shape(format!("{n} degrees for {dim} input dimensions")));
        }
    };
    let total = opts.total_degree.unwrap_or_else(|| degrees.iter().copied().max().unwrap_or(0));
    let (index, n_basis) = HermiteModel::build_index(&degrees, total);
    let n = data.len();
    if n < n_basis {
        return Err(Error::InsufficientData(format!("{n} pairs for {n_basis} basis functions")));
    }
    let d_o = data.output_dim();

    let (mean, mut scale) = if opts.standardize {
        moments(data)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    for (i, s) in scale.iter_mut().enumerate() {
        if !(*s > 0.0) {
            log::warn!("input dimension {i} is constant over the training set");
            *s = 1.0;
        }
    }
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in 0..n {
        for (i, &z) in data.input(p).iter().enumerate() {
            let s = (z - mean[i]) / scale[i];
            lo[i] = lo[i].min(s);
            hi[i] = hi[i].max(s);
        }
    }
    let mut model = HermiteModel {
        degrees,
        total_degree: total,
        m: data.m(),
        d_x: data.d_x(),
        d_theta_in: data.d_theta_in(),
        output_dim: d_o,
        index,
        n_basis,
        coeffs: vec![0.0; n_basis * d_o],
        mean,
        scale,
        lo,
        hi,
        extrapolation: Extrapolation::Polynomial,
        residual_variance: vec![0.0; d_o],
        ridge: 0.0,
    };

    let p = n_basis;
    let mut g = vec![0.0; p * p];
    let mut rhs = vec![0.0; p * d_o];
    let block = opts.block_rows.max(1);
    let w = model.max_degree() + 1;
    let mut phi = vec![0.0; block.min(n) * p];
    let mut tgt = vec![0.0; block.min(n) * d_o];
    let mut s = vec![0.0; dim];
    let mut tab = vec![0.0; dim * w];
    for r in crate::par::chunks(n, block) {
        let rows = r.len();
        for (k, i) in r.clone().enumerate() {
            model.standardize(data.input(i), &mut s);
            model.tables(&s, &mut tab);
            model.basis_row(&tab, &mut phi[k * p..(k + 1) * p]);
            tgt[k * d_o..(k + 1) * d_o].copy_from_slice(data.target(i));
        }
        linalg::gram_accumulate(&phi[..rows * p], rows, p, &mut g);
        linalg::matmul_tn(p, rows, d_o, 1.0, &phi[..rows * p], &tgt[..rows * d_o], 1.0, &mut rhs);
    }
    linalg::symmetrize_from_upper(&mut g, p);

    let lam_max = linalg::max_eigenvalue(&g, p, 500);
    let mut ridge = opts.ridge_rel * lam_max;
    let mut chol = g.clone();
    for attempt in 0..8 {
        chol.copy_from_slice(&g);
        for i in 0..p {
            chol[i * p + i] += ridge;
        }
        match linalg::cholesky(&mut chol, p) {
            Ok(()) => break,
            Err(e) if attempt < 7 => {
                log::warn!("Gram matrix ill-conditioned ({e}); raising ridge from {ridge:e}");
                ridge = (ridge * 100.0).max(1e-300);
            }
            Err(e) => return Err(e),
        }
    }
    let b = rhs.clone();
    linalg::cholesky_solve(&chol, p, &mut rhs, d_o);
    // Iterated Tikhonov: removes the ridge bias on well-conditioned directions
    // while leaving directions below the floor suppressed.
    let mut r = vec![0.0; p * d_o];
    for _ in 0..REFINE_STEPS {
        r.copy_from_slice(&b);
        linalg::matmul(p, p, d_o, -1.0, &g, &rhs, 1.0, &mut r);
        linalg::cholesky_solve(&chol, p, &mut r, d_o);
        rhs.iter_mut().zip(&r).for_each(|(c, d)| *c += d);
    }
    model.coeffs = rhs;
    model.ridge = ridge;
    model.residual_variance = crate::identify::residual_variance(&model, data)?;
    model.extrapolation = opts.extrapolation;
    Ok(model)
}

fn moments(data: &DelayDataset) -> (Vec<f64>, Vec<f64>) {
    let dim = data.input_dim();
    let n = data.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in 0..data.len() {
        for (m, z) in mean.iter_mut().zip(data.input(p)) {
            *m += z;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for p in 0..data.len() {
        for ((v, z), m) in var.iter_mut().zip(data.input(p)).zip(&mean) {
            *v += (z - m) * (z - m);
        }
    }
    (mean, var.into_iter().map(|v| (v / n).sqrt()).collect())
}
