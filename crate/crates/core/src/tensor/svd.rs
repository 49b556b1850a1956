//! Truncated singular value decomposition.
//!
//! The backend is a one-sided Jacobi (Hestenes) SVD: plane rotations
//! orthogonalize the columns of the working matrix, so `U * diag(s) * Vt`
//! reproduces the input to machine precision by construction, including for
//! exactly rank-deficient matrices. (General-purpose implicit-QR SVDs were
//! observed returning inconsistent factor triples on such inputs, which this
//! toolkit depends on: Kronecker-structured weights must factor to bond
//! dimension one, exactly.)
//!
//! Truncation keeps at most `max_rank` singular values and drops any that
//! fall below a relative threshold. The threshold is the larger of the
//! caller's `rel_tol` and a machine-noise floor `eps * max(m, n)` (the same
//! default rank tolerance LAPACK-style libraries use), so exactly
//! rank-deficient matrices report their true rank even at `rel_tol = 0`.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Maximum number of Jacobi sweeps before the decomposition is declared
/// non-convergent. Well-conditioned inputs need fewer than ten.
const MAX_SWEEPS: usize = 60;

/// A pair of columns counts as orthogonal when their normalized inner
/// product is below this multiple of machine epsilon.
const CONVERGENCE_FACTOR: f64 = 4.0;

/// Relative magnitude below which a singular value is treated as numerical
/// noise: `eps * max(m, n)`, scaled by the largest singular value.
pub fn noise_floor(m: usize, n: usize) -> f64 {
    f64::EPSILON * m.max(n) as f64
}

/// Result of [`truncated_svd`]: `a ~= u * diag(singular_values) * vt` with
/// `rank_kept` columns retained.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// Left singular vectors, `(m, rank_kept)`, `f64`, orthonormal columns.
    pub u: DenseTensor,
    /// Retained singular values, non-increasing and non-negative.
    pub singular_values: Vec<f64>,
    /// Right singular vectors transposed, `(rank_kept, n)`, `f64`.
    pub vt: DenseTensor,
    pub rank_kept: usize,
    /// Sum of the squares of the discarded singular values; the squared
    /// Frobenius error of the truncated reconstruction.
    pub discarded_weight: f64,
}

/// Thin SVD of a tall-or-square matrix held column-major.
struct JacobiThin {
    /// `m * p` column-major left vectors, `p = n`.
    u: Vec<f64>,
    /// `p` singular values, descending.
    s: Vec<f64>,
    /// `n * p` column-major right vectors (columns are the `v_j`).
    v: Vec<f64>,
}

/// One-sided Jacobi SVD of an `m x n` matrix with `m >= n`, column-major
/// input. Sweeps rotate column pairs of the work matrix (and of an identity
/// accumulating `V`) until all pairs are numerically orthogonal; singular
/// values are then column norms and `U` the normalized columns.
fn jacobi_svd_tall(mut w: Vec<f64>, m: usize, n: usize) -> Result<JacobiThin> {
    debug_assert!(m >= n);
    debug_assert_eq!(w.len(), m * n);
    let mut v = vec![0.0f64; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    let tol = CONVERGENCE_FACTOR * f64::EPSILON;
    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0f64, 0.0f64, 0.0f64);
                {
                    let (wp, wq) = (&w[p * m..(p + 1) * m], &w[q * m..(q + 1) * m]);
                    for i in 0..m {
                        alpha += wp[i] * wp[i];
                        beta += wq[i] * wq[i];
                        gamma += wp[i] * wq[i];
                    }
                }
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (beta - alpha) / (2.0 * gamma);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // Rotate the pair of columns in both W and V.
                for (buf, len) in [(&mut w, m), (&mut v, n)] {
                    let (head, tail) = buf.split_at_mut(q * len);
                    let colp = &mut head[p * len..(p + 1) * len];
                    let colq = &mut tail[..len];
                    for i in 0..len {
                        let (a, b) = (colp[i], colq[i]);
                        colp[i] = c * a - s * b;
                        colq[i] = s * a + c * b;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD of a {m}x{n} matrix did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    // Singular values, descending with original-index tiebreak for
    // determinism.
    let mut order: Vec<(f64, usize)> = (0..n)
        .map(|j| {
            let col = &w[j * m..(j + 1) * m];
            (col.iter().map(|x| x * x).sum::<f64>().sqrt(), j)
        })
        .collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut u = vec![0.0f64; m * n];
    let mut s = vec![0.0f64; n];
    let mut v_sorted = vec![0.0f64; n * n];
    for (rank_pos, &(sigma, j)) in order.iter().enumerate() {
        s[rank_pos] = sigma;
        let ucol = &mut u[rank_pos * m..(rank_pos + 1) * m];
        if sigma > f64::MIN_POSITIVE {
            let col = &w[j * m..(j + 1) * m];
            for i in 0..m {
                ucol[i] = col[i] / sigma;
            }
        } else {
            // Exactly null direction (e.g. the zero matrix): any unit vector
            // keeps the factor shapes valid; the value it multiplies is 0.
            ucol[rank_pos % m] = 1.0;
        }
        v_sorted[rank_pos * n..(rank_pos + 1) * n].copy_from_slice(&v[j * n..(j + 1) * n]);
    }

    Ok(JacobiThin { u, s, v: v_sorted })
}

pub(crate) struct TruncatedF64 {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub vt: Vec<f64>,
    pub rank: usize,
    pub discarded: f64,
}

/// Raw-buffer truncated SVD used by both the public op and the tensor-train
/// sweep. `data` is `m x n` row-major.
pub(crate) fn svd_truncate_f64(
    data: &[f64],
    m: usize,
    n: usize,
    max_rank: usize,
    rel_tol: f64,
) -> Result<TruncatedF64> {
    debug_assert_eq!(data.len(), m * n);
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "matrix contains non-finite entries".into(),
        ));
    }

    // Work in the tall orientation; for wide inputs decompose the transpose
    // and swap the roles of U and V afterwards.
    let transposed = m < n;
    let (tm, tn) = if transposed { (n, m) } else { (m, n) };
    // Column-major `tm x tn` copy of the (possibly transposed) input. The
    // transpose of a row-major matrix is its column-major reinterpretation,
    // so both branches read straight through `data`.
    let mut work = vec![0.0f64; m * n];
    if transposed {
        work.copy_from_slice(data);
    } else {
        for i in 0..m {
            for j in 0..n {
                work[j * m + i] = data[i * n + j];
            }
        }
    }
    let thin = jacobi_svd_tall(work, tm, tn)?;
    let p = tn; // == min(m, n)

    let sv = &thin.s;
    let threshold = sv[0] * rel_tol.max(noise_floor(m, n));
    let above = sv.iter().filter(|&&s| s > threshold).count();
    let rank = above.min(max_rank).min(p).max(1);
    let discarded: f64 = (rank..p).map(|i| sv[i] * sv[i]).sum();

    // Assemble row-major thin factors for the original orientation. Without
    // the transpose, U comes from `thin.u` and Vt rows from `thin.v`
    // columns; with it, the roles swap.
    let (left_cols, right_cols) = if transposed {
        (&thin.v, &thin.u)
    } else {
        (&thin.u, &thin.v)
    };
    let mut u = vec![0.0f64; m * rank];
    for j in 0..rank {
        let col = &left_cols[j * m..(j + 1) * m];
        for i in 0..m {
            u[i * rank + j] = col[i];
        }
    }
    let mut vt = vec![0.0f64; rank * n];
    for j in 0..rank {
        let col = &right_cols[j * n..(j + 1) * n];
        vt[j * n..(j + 1) * n].copy_from_slice(col);
    }

    // Deterministic sign convention: the largest-magnitude entry of each left
    // singular vector is non-negative (first occurrence wins ties).
    for j in 0..rank {
        let mut best_i = 0;
        let mut best = -1.0f64;
        for i in 0..m {
            let mag = u[i * rank + j].abs();
            if mag > best {
                best = mag;
                best_i = i;
            }
        }
        if u[best_i * rank + j] < 0.0 {
            for i in 0..m {
                u[i * rank + j] = -u[i * rank + j];
            }
            for c in 0..n {
                vt[j * n + c] = -vt[j * n + c];
            }
        }
    }

    Ok(TruncatedF64 {
        u,
        s: sv.iter().take(rank).copied().collect(),
        vt,
        rank,
        discarded,
    })
}

/// Truncated SVD of a 2-D float tensor, computed in `f64`.
///
/// Keeps `min(max_rank, r_eff)` singular values where `r_eff` counts values
/// above `max(rel_tol, eps * max(m, n))` relative to the largest, clamped to
/// at least one so every matrix (including all zeros) has a representation.
pub fn truncated_svd(a: &DenseTensor, max_rank: usize, rel_tol: f64) -> Result<SvdResult> {
    if a.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "truncated_svd needs a 2-D tensor, got shape {:?}",
            a.shape()
        )));
    }
    if !a.dtype().is_float() {
        return Err(Error::InvalidArgument(format!(
            "truncated_svd needs a float tensor, got {}",
            a.dtype().name()
        )));
    }
    if max_rank == 0 {
        return Err(Error::InvalidArgument("max_rank must be at least 1".into()));
    }
    if !(rel_tol.is_finite() && rel_tol >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rel_tol must be finite and non-negative, got {rel_tol}"
        )));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let wide = a.to_f64_vec();
    let t = svd_truncate_f64(&wide, m, n, max_rank, rel_tol)?;
    Ok(SvdResult {
        u: DenseTensor::from_f64(&[m, t.rank], t.u.clone())?,
        singular_values: t.s.clone(),
        vt: DenseTensor::from_f64(&[t.rank, n], t.vt.clone())?,
        rank_kept: t.rank,
        discarded_weight: t.discarded,
    })
}
