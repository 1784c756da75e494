//! FFT plans with owned scratch buffers.
//!
//! Conventions: `forward` computes `X_k = sum_j x_j e^{-2 pi i jk/n}` and
//! `inverse` computes `x_j = sum_k X_k e^{+2 pi i jk/n}`; neither normalizes.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Fft1 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl Fft1 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Fft1 {
            n,
            fwd,
            inv,
            scratch: vec![Complex64::default(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn forward(&mut self, buf: &mut [Complex64]) {
        self.fwd.process_with_scratch(buf, &mut self.scratch);
    }

    pub fn inverse(&mut self, buf: &mut [Complex64]) {
        self.inv.process_with_scratch(buf, &mut self.scratch);
    }
}

/// 2-D transform on a row-major `ny × nx` grid (index `iy * nx + ix`).
#[derive(Clone)]
pub struct Fft2 {
    nx: usize,
    ny: usize,
    rows: Fft1,
    cols: Fft1,
    col: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(nx: usize, ny: usize) -> Self {
        Fft2 {
            nx,
            ny,
            rows: Fft1::new(nx),
            cols: Fft1::new(ny),
            col: vec![Complex64::default(); ny],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn forward(&mut self, buf: &mut [Complex64]) {
        self.apply(buf, true)
    }

    pub fn inverse(&mut self, buf: &mut [Complex64]) {
        self.apply(buf, false)
    }

    fn apply(&mut self, buf: &mut [Complex64], fwd: bool) {
        let (nx, ny) = (self.nx, self.ny);
        for r in buf.chunks_exact_mut(nx) {
            if fwd {
                self.rows.forward(r)
            } else {
                self.rows.inverse(r)
            }
        }
        for ix in 0..nx {
            for iy in 0..ny {
                self.col[iy] = buf[iy * nx + ix];
            }
            if fwd {
                self.cols.forward(&mut self.col)
            } else {
                self.cols.inverse(&mut self.col)
            }
            for iy in 0..ny {
                buf[iy * nx + ix] = self.col[iy];
            }
        }
    }
}

/// Storage slot of signed wavenumber `k` in a length-`n` FFT buffer.
#[inline]
pub fn slot(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}
