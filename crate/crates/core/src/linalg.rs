//! Dense kernels on row-major `f64` buffers: GEMM, Gram accumulation,
//! blocked Cholesky and a power iteration.

use crate::error::{Error, Result};
use crate::par;

/// `C = alpha A B + beta C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose extents cover the strided ranges;
    // every public wrapper below checks lengths first.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// `C (m×n) = alpha A (m×k) B (k×n) + beta C`, all row-major and contiguous.
pub fn matmul(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `C (m×n) = alpha A^T B + beta C` where `A` is `k×m` and `B` is `k×n`.
pub fn matmul_tn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    gemm(m, k, n, alpha, a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `C (m×n) = alpha A B^T + beta C` where `A` is `m×k` and `B` is `n×k`.
pub fn matmul_nt(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    gemm(m, k, n, alpha, a, k as isize, 1, b, 1, k as isize, beta, c, n as isize, 1);
}

const PANEL: usize = 256;

/// Upper-triangular panels of `G += Phi^T Phi` for a `rows × p` block.
/// Panel products are computed independently (possibly in parallel) and
/// added in a fixed order, so the result does not depend on the thread count.
/// Call [`symmetrize_from_upper`] once accumulation is finished.
pub fn gram_accumulate(phi: &[f64], rows: usize, p: usize, g: &mut [f64]) {
    assert!(phi.len() >= rows * p && g.len() >= p * p);
    let panels = par::chunks(p, PANEL);
    let pairs: Vec<(usize, usize)> = (0..panels.len())
        .flat_map(|i| (i..panels.len()).map(move |j| (i, j)))
        .collect();
    let blocks = par::map(pairs.len(), |q| {
        let (i, j) = pairs[q];
        let (ri, rj) = (panels[i].clone(), panels[j].clone());
        let mut out = vec![0.0; ri.len() * rj.len()];
        gemm(
            ri.len(),
            rows,
            rj.len(),
            1.0,
            &phi[ri.start..],
            1,
            p as isize,
            &phi[rj.start..],
            p as isize,
            1,
            0.0,
            &mut out,
            rj.len() as isize,
            1,
        );
        out
    });
    for (q, blk) in blocks.into_iter().enumerate() {
        let (i, j) = pairs[q];
        let (ri, rj) = (panels[i].clone(), panels[j].clone());
        for (a, r) in ri.clone().enumerate() {
            let row = &mut g[r * p + rj.start..r * p + rj.end];
            for (dst, src) in row.iter_mut().zip(&blk[a * rj.len()..(a + 1) * rj.len()]) {
                *dst += src;
            }
        }
    }
}

/// Copy the upper panel blocks written by [`gram_accumulate`] to the lower triangle.
pub fn symmetrize_from_upper(g: &mut [f64], p: usize) {
    let panels = par::chunks(p, PANEL);
    for (i, ri) in panels.iter().enumerate() {
        for rj in &panels[i..] {
            for r in ri.clone() {
                for c in rj.clone() {
                    if c > r || rj.start > ri.start {
                        g[c * p + r] = g[r * p + c];
                    }
                }
            }
        }
    }
}

/// In-place lower Cholesky factor of a symmetric positive definite matrix.
/// The strict upper triangle is zeroed.
pub fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    const NB: usize = 64;
    let mut j0 = 0;
    while j0 < n {
        let nb = NB.min(n - j0);
        // Factor the diagonal block.
        for j in j0..j0 + nb {
            let mut d = a[j * n + j];
            for k in j0..j {
                d -= a[j * n + k] * a[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Consistency(format!("matrix not positive definite at pivot {j} ({d:e})")));
            }
            let d = d.sqrt();
            a[j * n + j] = d;
            for i in j + 1..j0 + nb {
                let mut s = a[i * n + j];
                for k in j0..j {
                    s -= a[i * n + k] * a[j * n + k];
                }
                a[i * n + j] = s / d;
            }
        }
        let rest = n - j0 - nb;
        if rest > 0 {
            // Panel: L21 = A21 L11^{-T}, row by row.
            for i in j0 + nb..n {
                for j in j0..j0 + nb {
                    let mut s = a[i * n + j];
                    for k in j0..j {
                        s -= a[i * n + k] * a[j * n + k];
                    }
                    a[i * n + j] = s / a[j * n + j];
                }
            }
            // Trailing update A22 -= L21 L21^T.
            let off = (j0 + nb) * n;
            let (head, tail) = a.split_at_mut(off);
            let _ = head;
            let l21: Vec<f64> = (0..rest)
                .flat_map(|r| tail[r * n + j0..r * n + j0 + nb].to_vec())
                .collect();
            gemm(
                rest,
                nb,
                rest,
                -1.0,
                &l21,
                nb as isize,
                1,
                &l21,
                1,
                nb as isize,
                1.0,
                &mut tail[j0 + nb..],
                n as isize,
                1,
            );
        }
        j0 += nb;
    }
    for i in 0..n {
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Solve `L L^T X = B` in place; `b` is `n × nrhs` row-major.
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], nrhs: usize) {
    for c in 0..nrhs {
        for i in 0..n {
            let mut s = b[i * nrhs + c];
            for k in 0..i {
                s -= l[i * n + k] * b[k * nrhs + c];
            }
            b[i * nrhs + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * nrhs + c];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k * nrhs + c];
            }
            b[i * nrhs + c] = s / l[i * n + i];
        }
    }
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
pub fn max_eigenvalue(a: &[f64], n: usize, iters: usize) -> f64 {
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618).fract()).collect();
    let mut w = vec![0.0; n];
    let mut lam = 0.0;
    for _ in 0..iters {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        matmul(n, n, 1, 1.0, a, &v, 0.0, &mut w);
        let new = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        std::mem::swap(&mut v, &mut w);
        if (new - lam).abs() <= 1e-10 * new.abs() {
            return new;
        }
        lam = new;
    }
    lam
}
