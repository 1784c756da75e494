//! Batched forward and backward passes.
//!
//! A batch is processed one cell at a time: the `[h; z]` rows of all samples
//! form a matrix that multiplies the stacked gate weights in a single GEMM.
//! Gradients are computed over fixed-size chunks of the batch and summed in
//! chunk order.

use super::{batch_len, sigmoid, LstmParams};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn};
use crate::par;

const CHUNK: usize = 32;

/// Forward pass without a tape; `out` receives `rows × d_out` predictions.
pub fn forward_batch(p: &LstmParams, inputs: &[f64], out: &mut [f64]) -> Result<()> {
    let a = p.arch;
    let di = a.input_dim();
    if di == 0 || inputs.len() % di != 0 || out.len() != inputs.len() / di * a.d_out {
        return Err(Error::Shape(format!(
            "{} inputs with rows of {di}, output buffer {}",
            inputs.len(),
            out.len()
        )));
    }
    let rows = inputs.len() / di;
    if rows <= CHUNK {
        return forward_chunk(p, inputs, rows, out);
    }
    let chunks = par::chunks(rows, CHUNK);
    let parts: Vec<Result<Vec<f64>>> = par::map(chunks.len(), |c| {
        let r = chunks[c].clone();
        let mut o = vec![0.0; r.len() * a.d_out];
        forward_chunk(p, &inputs[r.start * di..r.end * di], r.len(), &mut o)?;
        Ok(o)
    });
    for (r, part) in chunks.iter().zip(parts) {
        out[r.start * a.d_out..r.end * a.d_out].copy_from_slice(&part?);
    }
    Ok(())
}

fn load_cell(x: &mut [f64], h: &[f64], inputs: &[f64], rows: usize, t: usize, p: &LstmParams) {
    let a = p.arch;
    let (hd, k, din, di) = (a.d_hidden, a.concat(), a.d_in, a.input_dim());
    for r in 0..rows {
        x[r * k..r * k + hd].copy_from_slice(&h[r * hd..(r + 1) * hd]);
        x[r * k + hd..(r + 1) * k].copy_from_slice(&inputs[r * di + t * din..r * di + (t + 1) * din]);
    }
}

fn gate_preactivations(pre: &mut [f64], x: &[f64], rows: usize, p: &LstmParams) {
    let a = p.arch;
    let g4 = 4 * a.d_hidden;
    for r in 0..rows {
        pre[r * g4..(r + 1) * g4].copy_from_slice(p.b_gates());
    }
    matmul_nt(rows, a.concat(), g4, 1.0, x, p.w_gates(), 1.0, pre);
}

fn check_hidden(h: &[f64]) -> Result<()> {
    for &v in h {
        if v.is_nan() {
            return Err(Error::NonFinite);
        }
        if v.abs() > 1.0 {
            return Err(Error::Consistency(format!("hidden state {v} outside [-1, 1]")));
        }
    }
    Ok(())
}

fn readout(h: &[f64], rows: usize, p: &LstmParams, out: &mut [f64]) {
    let a = p.arch;
    for r in 0..rows {
        out[r * a.d_out..(r + 1) * a.d_out].copy_from_slice(p.b_out());
    }
    matmul_nt(rows, a.d_hidden, a.d_out, 1.0, h, p.w_out(), 1.0, out);
}

fn forward_chunk(p: &LstmParams, inputs: &[f64], rows: usize, out: &mut [f64]) -> Result<()> {
    let a = p.arch;
    let (hd, k, g4) = (a.d_hidden, a.concat(), 4 * a.d_hidden);
    let mut h = vec![0.0; rows * hd];
    let mut c = vec![0.0; rows * hd];
    let mut x = vec![0.0; rows * k];
    let mut pre = vec![0.0; rows * g4];
    for t in 0..a.cells() {
        load_cell(&mut x, &h, inputs, rows, t, p);
        gate_preactivations(&mut pre, &x, rows, p);
        for r in 0..rows {
            let g = &pre[r * g4..(r + 1) * g4];
            for j in 0..hd {
                let f = sigmoid(g[j]);
                let i = sigmoid(g[hd + j]);
                let o = sigmoid(g[2 * hd + j]);
                let cand = g[3 * hd + j].tanh();
                let cj = &mut c[r * hd + j];
                *cj = f * *cj + i * cand;
                h[r * hd + j] = o * cj.tanh();
            }
        }
    }
    check_hidden(&h)?;
    readout(&h, rows, p, out);
    Ok(())
}

/// Accumulate the gradient of the batch MSE into `grad` and return the
/// per-output sums of squared errors. The loss is the sum of the returned
/// vector divided by the number of rows.
pub fn loss_and_grad(p: &LstmParams, inputs: &[f64], targets: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
    let n = batch_len(p, inputs, targets)?;
    if grad.len() != p.values.len() {
        return Err(Error::Shape(format!("gradient buffer {} for {} parameters", grad.len(), p.values.len())));
    }
    let a = p.arch;
    let (di, d_o) = (a.input_dim(), a.d_out);
    let scale = 2.0 / n as f64;
    let chunks = par::chunks(n, CHUNK);
    let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = par::map(chunks.len(), |c| {
        let r = chunks[c].clone();
        let mut g = vec![0.0; p.values.len()];
        let sse = chunk_grad(
            p,
            &inputs[r.start * di..r.end * di],
            &targets[r.start * d_o..r.end * d_o],
            r.len(),
            scale,
            &mut g,
        )?;
        Ok((sse, g))
    });
    let mut sse = vec![0.0; d_o];
    for part in parts {
        let (s, g) = part?;
        sse.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok(sse)
}

fn chunk_grad(p: &LstmParams, inputs: &[f64], targets: &[f64], rows: usize, scale: f64, grad: &mut [f64]) -> Result<Vec<f64>> {
    let a = p.arch;
    let (hd, k, g4, d_o, cells) = (a.d_hidden, a.concat(), 4 * a.d_hidden, a.d_out, a.cells());
    let bh = rows * hd;

    // tape: concatenated inputs, activated gates, cell states (with C_0), tanh(C)
    let mut xs = vec![0.0; cells * rows * k];
    let mut gates = vec![0.0; cells * rows * g4];
    let mut cs = vec![0.0; (cells + 1) * bh];
    let mut tcs = vec![0.0; cells * bh];
    let mut h = vec![0.0; bh];
    for t in 0..cells {
        let x = &mut xs[t * rows * k..(t + 1) * rows * k];
        load_cell(x, &h, inputs, rows, t, p);
        let gt = &mut gates[t * rows * g4..(t + 1) * rows * g4];
        gate_preactivations(gt, x, rows, p);
        let (c_prev, c_next) = cs.split_at_mut((t + 1) * bh);
        let c_prev = &c_prev[t * bh..];
        let c_next = &mut c_next[..bh];
        let tc = &mut tcs[t * bh..(t + 1) * bh];
        for r in 0..rows {
            let g = &mut gt[r * g4..(r + 1) * g4];
            for j in 0..hd {
                let f = sigmoid(g[j]);
                let i = sigmoid(g[hd + j]);
                let o = sigmoid(g[2 * hd + j]);
                let cand = g[3 * hd + j].tanh();
                g[j] = f;
                g[hd + j] = i;
                g[2 * hd + j] = o;
                g[3 * hd + j] = cand;
                let q = r * hd + j;
                c_next[q] = f * c_prev[q] + i * cand;
                tc[q] = c_next[q].tanh();
                h[q] = o * tc[q];
            }
        }
    }
    check_hidden(&h)?;

    let mut y = vec![0.0; rows * d_o];
    readout(&h, rows, p, &mut y);
    let mut sse = vec![0.0; d_o];
    let mut dy = vec![0.0; rows * d_o];
    for r in 0..rows {
        for j in 0..d_o {
            let e = y[r * d_o + j] - targets[r * d_o + j];
            sse[j] += e * e;
            dy[r * d_o + j] = scale * e;
        }
    }
    if sse.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }

    let [ow, ob, owr, obr] = a.offsets();
    {
        let (gw_all, rest) = grad.split_at_mut(ob);
        let (gb, rest) = rest.split_at_mut(owr - ob);
        let (gwr, gbr) = rest.split_at_mut(obr - owr);
        let gw = &mut gw_all[ow..];
        matmul_tn(d_o, rows, hd, 1.0, &dy, &h, 1.0, gwr);
        for r in 0..rows {
            for j in 0..d_o {
                gbr[j] += dy[r * d_o + j];
            }
        }
        let mut dh = vec![0.0; bh];
        matmul(rows, d_o, hd, 1.0, &dy, p.w_out(), 0.0, &mut dh);
        let mut dc = vec![0.0; bh];
        let mut dp = vec![0.0; rows * g4];
        let mut dx = vec![0.0; rows * k];
        for t in (0..cells).rev() {
            let gt = &gates[t * rows * g4..(t + 1) * rows * g4];
            let c_prev = &cs[t * bh..(t + 1) * bh];
            let tc = &tcs[t * bh..(t + 1) * bh];
            for r in 0..rows {
                let g = &gt[r * g4..(r + 1) * g4];
                let d = &mut dp[r * g4..(r + 1) * g4];
                for j in 0..hd {
                    let q = r * hd + j;
                    let (f, i, o, cand) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                    let dcv = dc[q] + dh[q] * o * (1.0 - tc[q] * tc[q]);
                    d[j] = dcv * c_prev[q] * f * (1.0 - f);
                    d[hd + j] = dcv * cand * i * (1.0 - i);
                    d[2 * hd + j] = dh[q] * tc[q] * o * (1.0 - o);
                    d[3 * hd + j] = dcv * i * (1.0 - cand * cand);
                    dc[q] = dcv * f;
                }
            }
            let x = &xs[t * rows * k..(t + 1) * rows * k];
            matmul_tn(g4, rows, k, 1.0, &dp, x, 1.0, gw);
            for r in 0..rows {
                for (b, v) in gb.iter_mut().zip(&dp[r * g4..(r + 1) * g4]) {
                    *b += v;
                }
            }
            if t > 0 {
                matmul(rows, g4, k, 1.0, &dp, p.w_gates(), 0.0, &mut dx);
                for r in 0..rows {
                    dh[r * hd..(r + 1) * hd].copy_from_slice(&dx[r * k..r * k + hd]);
                }
            }
        }
    }
    Ok(sse)
}
