//! LSTM closure over `m+1` delay cells with an affine readout.
//!
//! Parameters live in one flat vector so the optimizer and the gradient are
//! plain slices. Gate order inside the stacked weight matrix is
//! forget, input, output, candidate.

mod net;
mod train;

pub use net::{forward_batch, loss_and_grad};
pub use train::{train, LogRow, LstmManifest, LstmModel, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::series::DelayVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmArch {
    /// Per-cell input width.
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub m: usize,
}

impl LstmArch {
    pub fn cells(&self) -> usize {
        self.m + 1
    }
    /// Flattened input width `(m+1) d_in`.
    pub fn input_dim(&self) -> usize {
        self.cells() * self.d_in
    }
    /// Width of the concatenated `[h; z]` cell input.
    pub fn concat(&self) -> usize {
        self.d_hidden + self.d_in
    }
    pub fn n_params(&self) -> usize {
        let h = self.d_hidden;
        4 * h * self.concat() + 4 * h + self.d_out * h + self.d_out
    }
    fn offsets(&self) -> [usize; 4] {
        let h = self.d_hidden;
        let w = 0;
        let b = w + 4 * h * self.concat();
        let wr = b + 4 * h;
        let br = wr + self.d_out * h;
        [w, b, wr, br]
    }
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.d_out == 0 {
            return Err(Error::InvalidParameter(format!("degenerate LSTM shape {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub arch: LstmArch,
    pub values: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(arch: LstmArch) -> Self {
        LstmParams {
            arch,
            values: vec![0.0; arch.n_params()],
        }
    }

    /// Uniform weights in `±1/sqrt(d_hidden)`, zero biases except the forget
    /// gate bias, which starts at 1.
    pub fn init(arch: LstmArch, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(arch);
        let k = 1.0 / (arch.d_hidden as f64).sqrt();
        let [w, b, wr, br] = arch.offsets();
        for v in &mut p.values[w..b] {
            *v = k * (2.0 * rng.uniform() - 1.0);
        }
        for v in &mut p.values[b..b + arch.d_hidden] {
            *v = 1.0;
        }
        for v in &mut p.values[wr..br] {
            *v = k * (2.0 * rng.uniform() - 1.0);
        }
        p
    }

    /// Stacked gate weights, `4 d_hidden × (d_hidden + d_in)`.
    pub fn w_gates(&self) -> &[f64] {
        let [w, b, _, _] = self.arch.offsets();
        &self.values[w..b]
    }
    pub fn b_gates(&self) -> &[f64] {
        let [_, b, wr, _] = self.arch.offsets();
        &self.values[b..wr]
    }
    /// Readout weights, `d_out × d_hidden`.
    pub fn w_out(&self) -> &[f64] {
        let [_, _, wr, br] = self.arch.offsets();
        &self.values[wr..br]
    }
    pub fn b_out(&self) -> &[f64] {
        let [_, _, _, br] = self.arch.offsets();
        &self.values[br..]
    }
    pub fn b_gates_mut(&mut self) -> &mut [f64] {
        let [_, b, wr, _] = self.arch.offsets();
        &mut self.values[b..wr]
    }
    pub fn b_out_mut(&mut self) -> &mut [f64] {
        let [_, _, _, br] = self.arch.offsets();
        &mut self.values[br..]
    }
    pub fn w_gates_mut(&mut self) -> &mut [f64] {
        let [w, b, _, _] = self.arch.offsets();
        &mut self.values[w..b]
    }
    pub fn w_out_mut(&mut self) -> &mut [f64] {
        let [_, _, wr, br] = self.arch.offsets();
        &mut self.values[wr..br]
    }

    /// Rebuild from the four tensors.
    pub fn from_parts(arch: LstmArch, w: &[f64], b: &[f64], wr: &[f64], br: &[f64]) -> Result<Self> {
        let mut values = Vec::with_capacity(arch.n_params());
        values.extend_from_slice(w);
        values.extend_from_slice(b);
        values.extend_from_slice(wr);
        values.extend_from_slice(br);
        if values.len() != arch.n_params() {
            return Err(Error::Shape(format!(
                "{} parameter values for an architecture with {}",
                values.len(),
                arch.n_params()
            )));
        }
        Ok(LstmParams { arch, values })
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One cell update `(h, C) -> (h', C')` for a single sample.
pub fn lstm_cell(h: &[f64], c: &[f64], z: &[f64], p: &LstmParams) -> (Vec<f64>, Vec<f64>) {
    let a = p.arch;
    let hd = a.d_hidden;
    let k = a.concat();
    assert!(h.len() == hd && c.len() == hd && z.len() == a.d_in, "cell shape mismatch");
    let w = p.w_gates();
    let b = p.b_gates();
    let pre = |row: usize| -> f64 {
        let wr = &w[row * k..(row + 1) * k];
        b[row] + wr[..hd].iter().zip(h).map(|(x, y)| x * y).sum::<f64>() + wr[hd..].iter().zip(z).map(|(x, y)| x * y).sum::<f64>()
    };
    let mut h2 = vec![0.0; hd];
    let mut c2 = vec![0.0; hd];
    for j in 0..hd {
        let f = sigmoid(pre(j));
        let i = sigmoid(pre(hd + j));
        let o = sigmoid(pre(2 * hd + j));
        let g = pre(3 * hd + j).tanh();
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

/// Run the `m+1` cells oldest first from zero state and apply the readout.
pub fn lstm_forward(z: &DelayVector, p: &LstmParams) -> Result<Vec<f64>> {
    let a = p.arch;
    if z.m != a.m || z.d_x() + z.d_theta() != a.d_in {
        return Err(Error::Shape(format!(
            "delay vector m={} width {} for an LSTM with m={} d_in={}",
            z.m,
            z.d_x() + z.d_theta(),
            a.m,
            a.d_in
        )));
    }
    let flat = z.flatten();
    let mut h = vec![0.0; a.d_hidden];
    let mut c = vec![0.0; a.d_hidden];
    for cell in flat.chunks_exact(a.d_in) {
        (h, c) = lstm_cell(&h, &c, cell, p);
    }
    Ok(readout(&h, p))
}

fn readout(h: &[f64], p: &LstmParams) -> Vec<f64> {
    let hd = p.arch.d_hidden;
    p.w_out()
        .chunks_exact(hd)
        .zip(p.b_out())
        .map(|(row, b)| b + row.iter().zip(h).map(|(x, y)| x * y).sum::<f64>())
        .collect()
}

/// Mean over the batch of the squared error summed over output components.
/// `inputs` holds flattened delay vectors row by row.
pub fn mse_loss(p: &LstmParams, inputs: &[f64], targets: &[f64]) -> Result<f64> {
    let n = batch_len(p, inputs, targets)?;
    let mut out = vec![0.0; targets.len()];
    forward_batch(p, inputs, &mut out)?;
    let sse: f64 = out.iter().zip(targets).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / n as f64)
}

/// Exact reverse-mode gradient of [`mse_loss`], same layout as the parameters.
pub fn bptt_grad(p: &LstmParams, inputs: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    batch_len(p, inputs, targets)?;
    let mut g = vec![0.0; p.values.len()];
    loss_and_grad(p, inputs, targets, &mut g)?;
    Ok(g)
}

pub(crate) fn batch_len(p: &LstmParams, inputs: &[f64], targets: &[f64]) -> Result<usize> {
    let a = p.arch;
    let di = a.input_dim();
    if inputs.is_empty() || inputs.len() % di != 0 {
        return Err(Error::Shape(format!("{} input values for rows of {di}", inputs.len())));
    }
    let n = inputs.len() / di;
    if targets.len() != n * a.d_out {
        return Err(Error::Shape(format!("{} targets for {n} rows of {}", targets.len(), a.d_out)));
    }
    Ok(n)
}
