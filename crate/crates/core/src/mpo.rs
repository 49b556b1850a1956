//! Matrix product operator (MPO) factorization of weight matrices.
//!
//! A matrix `W` of shape `(M, N)` with `M = m_1 * ... * m_k` and
//! `N = n_1 * ... * n_k` is reshaped to the 2k-index tensor
//! `W[i_1 .. i_k, j_1 .. j_k]`, the row and column indices are interleaved
//! site by site as `(i_1, j_1), .., (i_k, j_k)`, and the result is factored
//! into a chain of `k` four-index cores by a left-to-right sweep of truncated
//! SVDs. Core `c` has shape `(b_{c-1}, m_c, n_c, b_c)` with boundary bonds
//! `b_0 = b_k = 1`; every interior bond is at most `max_bond`.
//!
//! The sweep makes the cores left-canonical (each core, flattened over its
//! first three axes, has orthonormal columns), which is what makes the
//! accumulated truncation error certificate valid: the squared Frobenius
//! error of the reconstruction is exactly the sum of discarded squared
//! singular values across the sweep, so `truncation_error` is an upper bound
//! on (and for a single cut equal to) the true error.
//!
//! Interleaving matters: a Kronecker product `A (x) B` becomes an outer
//! product in the interleaved ordering and factors with bond dimension 1,
//! whereas grouping all row indices before column indices would saturate the
//! bond instead.

use crate::error::{Error, Result};
use crate::linalg::matmul;
use crate::tensor::{balanced_factorization, permute_f64, svd_truncate_f64, DenseTensor, Dtype};

/// How a matrix's row and column indices split across tensor-train sites.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexScheme {
    row_factors: Vec<usize>,
    col_factors: Vec<usize>,
}

impl IndexScheme {
    /// Pair up explicit row/column factorizations. Both lists must have the
    /// same length `k >= 1` and all entries must be positive.
    pub fn new(row_factors: Vec<usize>, col_factors: Vec<usize>) -> Result<IndexScheme> {
        if row_factors.is_empty() || row_factors.len() != col_factors.len() {
            return Err(Error::InvalidArgument(format!(
                "row and column factor lists must have equal positive length, got {} and {}",
                row_factors.len(),
                col_factors.len()
            )));
        }
        if row_factors.iter().chain(&col_factors).any(|&f| f == 0) {
            return Err(Error::InvalidArgument(
                "index scheme factors must be positive".into(),
            ));
        }
        Ok(IndexScheme {
            row_factors,
            col_factors,
        })
    }

    /// Balanced automatic scheme: factor `rows` and `cols` into `k` parts
    /// each via [`balanced_factorization`].
    pub fn auto(rows: usize, cols: usize, k: usize) -> Result<IndexScheme> {
        if rows == 0 || cols == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "auto scheme needs positive rows, cols, k; got {rows}, {cols}, {k}"
            )));
        }
        IndexScheme::new(
            balanced_factorization(rows, k),
            balanced_factorization(cols, k),
        )
    }

    pub fn row_factors(&self) -> &[usize] {
        &self.row_factors
    }

    pub fn col_factors(&self) -> &[usize] {
        &self.col_factors
    }

    /// Number of tensor-train sites, `k`.
    pub fn num_cores(&self) -> usize {
        self.row_factors.len()
    }

    /// Total row count `M` (product of row factors).
    pub fn rows(&self) -> usize {
        self.row_factors.iter().product()
    }

    /// Total column count `N` (product of column factors).
    pub fn cols(&self) -> usize {
        self.col_factors.iter().product()
    }

    /// Per-site combined dimensions `m_i * n_i`.
    fn site_dims(&self) -> Vec<usize> {
        self.row_factors
            .iter()
            .zip(&self.col_factors)
            .map(|(&m, &n)| m * n)
            .collect()
    }

    /// Largest bond dimension any decomposition under this scheme can need:
    /// the maximum over interior cuts of `min(left site-dim product, right
    /// site-dim product)`. Decomposing with this cap is lossless.
    pub fn saturating_bond(&self) -> usize {
        let d = self.site_dims();
        let k = d.len();
        let mut best = 1usize;
        let mut left = 1usize;
        for c in 0..k.saturating_sub(1) {
            left *= d[c];
            let right: usize = d[c + 1..].iter().product();
            best = best.max(left.min(right));
        }
        best
    }
}

/// One four-index tensor-train core with axes
/// `(left_bond, row_phys, col_phys, right_bond)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MpoCore {
    tensor: DenseTensor,
}

impl MpoCore {
    pub fn new(tensor: DenseTensor) -> Result<MpoCore> {
        if tensor.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "an MPO core has 4 axes, got shape {:?}",
                tensor.shape()
            )));
        }
        if !tensor.dtype().is_float() {
            return Err(Error::InvalidArgument(format!(
                "MPO cores must be float tensors, got {}",
                tensor.dtype().name()
            )));
        }
        Ok(MpoCore { tensor })
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.tensor
    }

    pub fn left_bond(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn row_dim(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn col_dim(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn right_bond(&self) -> usize {
        self.tensor.shape()[3]
    }
}

/// A weight matrix in tensor-train form: the chain of cores plus the scheme
/// and truncation bookkeeping needed to reason about it.
#[derive(Clone, Debug, PartialEq)]
pub struct MpoLayer {
    cores: Vec<MpoCore>,
    scheme: IndexScheme,
    max_bond: usize,
    truncation_error: f64,
}

impl MpoLayer {
    /// Reassemble a layer from stored parts, validating the chain: core
    /// count and physical dimensions match the scheme, adjacent bonds agree,
    /// boundary bonds are 1, no bond exceeds `max_bond`, and all cores share
    /// one float dtype.
    pub fn from_parts(
        cores: Vec<DenseTensor>,
        scheme: IndexScheme,
        max_bond: usize,
        truncation_error: f64,
    ) -> Result<MpoLayer> {
        let k = scheme.num_cores();
        if cores.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "scheme has {k} sites but {} cores were provided",
                cores.len()
            )));
        }
        if max_bond == 0 {
            return Err(Error::InvalidArgument("max_bond must be at least 1".into()));
        }
        if !(truncation_error.is_finite() && truncation_error >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "truncation_error must be finite and non-negative, got {truncation_error}"
            )));
        }
        let cores: Vec<MpoCore> = cores.into_iter().map(MpoCore::new).collect::<Result<_>>()?;
        let dtype = cores[0].tensor().dtype();
        for (c, core) in cores.iter().enumerate() {
            if core.tensor().dtype() != dtype {
                return Err(Error::InvalidArgument(
                    "all MPO cores must share one dtype".into(),
                ));
            }
            if core.row_dim() != scheme.row_factors[c] || core.col_dim() != scheme.col_factors[c] {
                return Err(Error::ShapeMismatch(format!(
                    "core {c} has physical dims ({}, {}) but the scheme expects ({}, {})",
                    core.row_dim(),
                    core.col_dim(),
                    scheme.row_factors[c],
                    scheme.col_factors[c]
                )));
            }
            if core.left_bond() > max_bond || core.right_bond() > max_bond {
                return Err(Error::InvalidArgument(format!(
                    "core {c} bond exceeds max_bond {max_bond}"
                )));
            }
        }
        if cores[0].left_bond() != 1 || cores[k - 1].right_bond() != 1 {
            return Err(Error::ShapeMismatch(
                "boundary bond dimensions must be 1".into(),
            ));
        }
        for c in 0..k - 1 {
            if cores[c].right_bond() != cores[c + 1].left_bond() {
                return Err(Error::ShapeMismatch(format!(
                    "bond mismatch between cores {c} and {}: {} vs {}",
                    c + 1,
                    cores[c].right_bond(),
                    cores[c + 1].left_bond()
                )));
            }
        }
        Ok(MpoLayer {
            cores,
            scheme,
            max_bond,
            truncation_error,
        })
    }

    pub fn cores(&self) -> &[MpoCore] {
        &self.cores
    }

    pub fn scheme(&self) -> &IndexScheme {
        &self.scheme
    }

    /// Bond dimension cap the layer was decomposed (or declared) with.
    pub fn max_bond(&self) -> usize {
        self.max_bond
    }

    /// Interior bond dimensions, length `k - 1`.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.cores[..self.cores.len() - 1]
            .iter()
            .map(|c| c.right_bond())
            .collect()
    }

    /// Upper bound on the Frobenius reconstruction error accumulated during
    /// the decomposition sweep: `sqrt(sum of discarded squared singular
    /// values)`. Exactly the error when only one cut truncates.
    pub fn truncation_error(&self) -> f64 {
        self.truncation_error
    }

    pub fn dtype(&self) -> Dtype {
        self.cores[0].tensor().dtype()
    }

    /// Shape `(M, N)` of the matrix the layer represents.
    pub fn original_shape(&self) -> (usize, usize) {
        (self.scheme.rows(), self.scheme.cols())
    }

    /// Total stored elements across all cores.
    pub fn param_count(&self) -> usize {
        self.cores.iter().map(|c| c.tensor().len()).sum()
    }

    /// Re-store every core in `dtype` (float casts only). The recorded
    /// truncation error is unchanged; storage rounding is accounted for
    /// separately by verification tolerances.
    pub fn cast(&self, dtype: Dtype) -> Result<MpoLayer> {
        let cores = self
            .cores
            .iter()
            .map(|c| c.tensor().cast(dtype))
            .collect::<Result<Vec<_>>>()?;
        MpoLayer::from_parts(cores, self.scheme.clone(), self.max_bond, self.truncation_error)
    }

    /// Mutable view of core `idx`'s elements; requires an `f64` layer. Only
    /// values can change, never shapes, so chain invariants are preserved.
    pub fn core_f64_mut(&mut self, idx: usize) -> Result<&mut [f64]> {
        let core = self
            .cores
            .get_mut(idx)
            .ok_or_else(|| Error::InvalidArgument(format!("no core {idx}")))?;
        core.tensor
            .as_f64_slice_mut()
            .ok_or_else(|| Error::InvalidArgument("core_f64_mut needs an f64 layer".into()))
    }
}

/// Predict the stored element count of a decomposition under `scheme` with
/// bond cap `chi`, assuming every truncated SVD keeps the full `chi` (or its
/// structural maximum, whichever is smaller). An upper bound on the real
/// count, used to refuse tensorizations that would inflate a layer.
pub fn estimate_tensorized_params(scheme: &IndexScheme, chi: usize) -> usize {
    let d = scheme.site_dims();
    let k = d.len();
    let mut params = 0usize;
    let mut b_prev = 1usize;
    for i in 0..k {
        let b_next = if i == k - 1 {
            1
        } else {
            let right: usize = d[i + 1..].iter().product();
            chi.min(b_prev * d[i]).min(right)
        };
        params += b_prev * d[i] * b_next;
        b_prev = b_next;
    }
    params
}

/// Interleaving permutation `(i_1 .. i_k, j_1 .. j_k) -> (i_1, j_1, .., i_k, j_k)`.
fn interleave_perm(k: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(2 * k);
    for i in 0..k {
        perm.push(i);
        perm.push(k + i);
    }
    perm
}

/// Inverse of [`interleave_perm`]: site-paired axes back to grouped rows
/// then columns.
fn deinterleave_perm(k: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(2 * k);
    for i in 0..k {
        perm.push(2 * i);
    }
    for i in 0..k {
        perm.push(2 * i + 1);
    }
    perm
}

/// Factor a 2-D float tensor into an [`MpoLayer`] under `scheme` with bond
/// cap `max_bond` and relative singular-value cutoff `rel_tol`.
///
/// Numerics run in `f64`; the cores are stored back in the input's dtype.
pub fn decompose(
    w: &DenseTensor,
    scheme: &IndexScheme,
    max_bond: usize,
    rel_tol: f64,
) -> Result<MpoLayer> {
    if w.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "decompose needs a 2-D tensor, got shape {:?}",
            w.shape()
        )));
    }
    if !w.dtype().is_float() {
        return Err(Error::InvalidArgument(format!(
            "decompose needs a float tensor, got {}",
            w.dtype().name()
        )));
    }
    if max_bond == 0 {
        return Err(Error::InvalidArgument("max_bond must be at least 1".into()));
    }
    if !(rel_tol.is_finite() && rel_tol >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rel_tol must be finite and non-negative, got {rel_tol}"
        )));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    if scheme.rows() != rows || scheme.cols() != cols {
        return Err(Error::ShapeMismatch(format!(
            "scheme covers a {}x{} matrix but the tensor is {rows}x{cols}",
            scheme.rows(),
            scheme.cols()
        )));
    }

    let k = scheme.num_cores();
    let wide = w.to_f64_vec();

    // Reshape to (m_1 .. m_k, n_1 .. n_k) and interleave sites.
    let mut grouped_shape: Vec<usize> = scheme.row_factors().to_vec();
    grouped_shape.extend_from_slice(scheme.col_factors());
    let (_, mut cur) = permute_f64(&wide, &grouped_shape, &interleave_perm(k));

    // Collapse each (m_i, n_i) pair into one site dimension.
    let site_dims = scheme.site_dims();
    debug_assert_eq!(site_dims.iter().product::<usize>(), cur.len());

    let mut cores: Vec<DenseTensor> = Vec::with_capacity(k);
    let mut left_bond = 1usize;
    let mut discarded_total = 0.0f64;
    for i in 0..k - 1 {
        let m = left_bond * site_dims[i];
        let n: usize = site_dims[i + 1..].iter().product();
        let t = svd_truncate_f64(&cur, m, n, max_bond, rel_tol)?;
        cores.push(DenseTensor::from_f64(
            &[
                left_bond,
                scheme.row_factors()[i],
                scheme.col_factors()[i],
                t.rank,
            ],
            t.u,
        )?);
        // Carry diag(s) * vt into the remainder of the sweep.
        let mut rest = t.vt;
        for (j, &s) in t.s.iter().enumerate() {
            for c in rest[j * n..(j + 1) * n].iter_mut() {
                *c *= s;
            }
        }
        cur = rest;
        discarded_total += t.discarded;
        left_bond = t.rank;
    }
    cores.push(DenseTensor::from_f64(
        &[
            left_bond,
            scheme.row_factors()[k - 1],
            scheme.col_factors()[k - 1],
            1,
        ],
        cur,
    )?);

    let mut layer = MpoLayer::from_parts(cores, scheme.clone(), max_bond, discarded_total.sqrt())?;
    if w.dtype() != Dtype::F64 {
        layer = layer.cast(w.dtype())?;
    }
    Ok(layer)
}

/// Contract the chain back into a dense `(M, N)` matrix in `f64`.
pub fn reconstruct(layer: &MpoLayer) -> Result<DenseTensor> {
    let k = layer.cores.len();
    let scheme = layer.scheme();
    let site_dims = scheme.site_dims();

    // Left-to-right contraction over the bond indices. The accumulator is
    // (prefix of site dims) x (current bond).
    let first = &layer.cores[0];
    let mut cur: Vec<f64> = first.tensor().to_f64_vec();
    let mut prefix = site_dims[0];
    let mut bond = first.right_bond();
    for (core, &site) in layer.cores[1..].iter().zip(&site_dims[1..]) {
        let right = core.right_bond();
        let core_mat = core.tensor().to_f64_vec(); // (bond) x (site * right)
        cur = matmul(&cur, prefix, bond, &core_mat, site * right);
        prefix *= site;
        bond = right;
    }
    debug_assert_eq!(bond, 1);

    // cur is the interleaved tensor (m_1, n_1, .., m_k, n_k); restore the
    // grouped ordering and flatten.
    let mut interleaved_shape = Vec::with_capacity(2 * k);
    for i in 0..k {
        interleaved_shape.push(scheme.row_factors()[i]);
        interleaved_shape.push(scheme.col_factors()[i]);
    }
    let (_, grouped) = permute_f64(&cur, &interleaved_shape, &deinterleave_perm(k));
    DenseTensor::from_f64(&[scheme.rows(), scheme.cols()], grouped)
}

/// Intermediates captured during [`apply_with_cache`], consumed by
/// [`apply_backward`] to run exact reverse-mode differentiation through the
/// chain without ever forming the dense matrix.
#[derive(Debug)]
pub struct ApplyCache {
    steps: Vec<StepRecord>,
    batch: usize,
}

#[derive(Debug)]
struct StepRecord {
    /// Contraction state entering this site, laid out as
    /// `(bond_in, n_site, rest_cols, batch, rows_done)`.
    acc_in: Vec<f64>,
    bond_in: usize,
    m: usize,
    n: usize,
    bond_out: usize,
    rest: usize,
    rows_done: usize,
}

fn forward(
    layer: &MpoLayer,
    x: &DenseTensor,
    want_cache: bool,
) -> Result<(DenseTensor, Option<ApplyCache>)> {
    let (rows, cols) = layer.original_shape();
    if x.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "apply needs a 2-D input, got shape {:?}",
            x.shape()
        )));
    }
    if x.shape()[0] != cols {
        return Err(Error::ShapeMismatch(format!(
            "layer maps {cols} -> {rows} but the input has {} rows",
            x.shape()[0]
        )));
    }
    if !x.dtype().is_float() {
        return Err(Error::InvalidArgument(format!(
            "apply needs a float input, got {}",
            x.dtype().name()
        )));
    }
    let batch = x.shape()[1];
    let k = layer.cores.len();

    // acc layout: (bond, remaining col factors, batch, finished row factors),
    // flattened row-major. Start: bond 1, all columns remaining, no rows done.
    let mut acc: Vec<f64> = x.to_f64_vec();
    let mut rest: usize = cols; // product of unconsumed n_t, including current site
    let mut rows_done = 1usize;
    let mut bond_in = 1usize;
    let mut steps = Vec::with_capacity(if want_cache { k } else { 0 });

    for c in 0..k {
        let core = &layer.cores[c];
        let (m, n) = (core.row_dim(), core.col_dim());
        let bond_out = core.right_bond();
        rest /= n; // columns remaining after this site

        // Core (a, m, n, b) -> matrix (m*b) x (a*n).
        let core_buf = core.tensor().to_f64_vec();
        let (_, kmat) = permute_f64(&core_buf, &[bond_in, m, n, bond_out], &[1, 3, 0, 2]);

        if want_cache {
            steps.push(StepRecord {
                acc_in: acc.clone(),
                bond_in,
                m,
                n,
                bond_out,
                rest,
                rows_done,
            });
        }

        // (m*b, a*n) @ (a*n, rest*batch*rows_done) = (m, b, rest, batch, rows_done)
        let cols_flat = rest * batch * rows_done;
        let out = matmul(&kmat, m * bond_out, bond_in * n, &acc, cols_flat);
        // -> (b, rest, batch, rows_done, m): bond leads, this site's row
        // factor joins the finished group.
        let (_, next) = permute_f64(
            &out,
            &[m, bond_out, rest, batch, rows_done],
            &[1, 2, 3, 4, 0],
        );
        acc = next;
        rows_done *= m;
        bond_in = bond_out;
    }
    debug_assert_eq!(bond_in, 1);
    debug_assert_eq!(rows_done, rows);

    // acc is (batch, rows); emit (rows, batch).
    let (_, y) = permute_f64(&acc, &[batch, rows], &[1, 0]);
    let y = DenseTensor::from_f64(&[rows, batch], y)?;
    let cache = want_cache.then_some(ApplyCache { steps, batch });
    Ok((y, cache))
}

/// Apply the layer to a batch without reconstructing the dense matrix:
/// `y = W x` for `x` of shape `(N, batch)`, producing `(M, batch)` in `f64`.
pub fn apply(layer: &MpoLayer, x: &DenseTensor) -> Result<DenseTensor> {
    forward(layer, x, false).map(|(y, _)| y)
}

/// [`apply`] that additionally captures the intermediates needed for
/// [`apply_backward`].
pub fn apply_with_cache(layer: &MpoLayer, x: &DenseTensor) -> Result<(DenseTensor, ApplyCache)> {
    forward(layer, x, true).map(|(y, c)| (y, c.expect("cache requested")))
}

/// Gradients from one [`apply_with_cache`] call: `d loss / d core` for each
/// core (axes matching the core) and `d loss / d x`.
pub struct ApplyGrads {
    pub core_grads: Vec<DenseTensor>,
    pub input_grad: DenseTensor,
}

/// Exact reverse-mode gradients through the chain contraction.
///
/// `grad_y` is `d loss / d y` with `y`'s shape `(M, batch)`. Every step of
/// the forward contraction is a matrix product and an axis permutation, so
/// the backward pass is the transposed products in reverse order; gradients
/// are exact up to floating-point roundoff, not approximations.
pub fn apply_backward(
    layer: &MpoLayer,
    cache: &ApplyCache,
    grad_y: &DenseTensor,
) -> Result<ApplyGrads> {
    let (rows, cols) = layer.original_shape();
    let batch = cache.batch;
    if grad_y.shape() != [rows, batch] {
        return Err(Error::ShapeMismatch(format!(
            "grad_y shape {:?} does not match output ({rows}, {batch})",
            grad_y.shape()
        )));
    }
    let k = layer.cores.len();
    if cache.steps.len() != k {
        return Err(Error::InvalidArgument(
            "cache does not belong to this layer".into(),
        ));
    }

    // Undo the final (batch, rows) -> (rows, batch) transpose.
    let gy = grad_y.to_f64_vec();
    let (_, mut d_acc) = permute_f64(&gy, &[rows, batch], &[1, 0]);

    let mut core_grads: Vec<DenseTensor> = Vec::with_capacity(k);
    for c in (0..k).rev() {
        let rec = &cache.steps[c];
        let (a, m, n, b) = (rec.bond_in, rec.m, rec.n, rec.bond_out);
        let (rest, rows_done) = (rec.rest, rec.rows_done);
        let cols_flat = rest * batch * rows_done;

        // d_acc is the gradient of this step's output, laid out
        // (b, rest, batch, rows_done, m); undo the post-matmul permute.
        let (_, d_out) = permute_f64(
            &d_acc,
            &[b, rest, batch, rows_done, m],
            &[4, 0, 1, 2, 3],
        );

        // out = kmat @ acc_in  =>  d_kmat = d_out @ acc_in^T,
        //                          d_acc_in = kmat^T @ d_out.
        let (_, acc_in_t) = permute_f64(&rec.acc_in, &[a * n, cols_flat], &[1, 0]);
        let d_kmat = matmul(&d_out, m * b, cols_flat, &acc_in_t, a * n);

        let core_buf = layer.cores[c].tensor().to_f64_vec();
        let (_, kmat) = permute_f64(&core_buf, &[a, m, n, b], &[1, 3, 0, 2]);
        let (_, kmat_t) = permute_f64(&kmat, &[m * b, a * n], &[1, 0]);
        let d_acc_in = matmul(&kmat_t, a * n, m * b, &d_out, cols_flat);

        // d_kmat has kmat's layout (m, b, a, n); undo the core permute.
        let (_, d_core) = permute_f64(&d_kmat, &[m, b, a, n], &[2, 0, 3, 1]);
        core_grads.push(DenseTensor::from_f64(&[a, m, n, b], d_core)?);

        d_acc = d_acc_in;
    }
    core_grads.reverse();

    let input_grad = DenseTensor::from_f64(&[cols, batch], d_acc)?;
    Ok(ApplyGrads {
        core_grads,
        input_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::frobenius_norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseTensor::from_f64(shape, data).unwrap()
    }

    fn rel_error(a: &DenseTensor, b: &DenseTensor) -> f64 {
        let av = a.to_f64_vec();
        let bv = b.to_f64_vec();
        let diff: f64 = av
            .iter()
            .zip(&bv)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        diff / frobenius_norm(a).unwrap().max(1e-300)
    }

    /// Oracle: dense reconstruction by explicit index summation over the
    /// bond indices, sharing nothing with the contraction in `reconstruct`.
    fn reconstruct_oracle(layer: &MpoLayer) -> DenseTensor {
        let scheme = layer.scheme();
        let k = scheme.num_cores();
        let (rows, cols) = layer.original_shape();
        let rf = scheme.row_factors();
        let cf = scheme.col_factors();
        let cores: Vec<Vec<f64>> = layer.cores().iter().map(|c| c.tensor().to_f64_vec()).collect();
        let dims: Vec<(usize, usize, usize, usize)> = layer
            .cores()
            .iter()
            .map(|c| (c.left_bond(), c.row_dim(), c.col_dim(), c.right_bond()))
            .collect();
        let mut out = vec![0.0f64; rows * cols];
        for row in 0..rows {
            // decompose row into (i_1 .. i_k), row-major
            let mut is = vec![0usize; k];
            let mut rem = row;
            for s in (0..k).rev() {
                is[s] = rem % rf[s];
                rem /= rf[s];
            }
            for col in 0..cols {
                let mut js = vec![0usize; k];
                let mut rem = col;
                for s in (0..k).rev() {
                    js[s] = rem % cf[s];
                    rem /= cf[s];
                }
                // contract: vector over bond index, updated site by site
                let mut vec_acc = vec![1.0f64];
                for s in 0..k {
                    let (a, _m, n, b) = dims[s];
                    let core = &cores[s];
                    let mut next = vec![0.0f64; b];
                    for (ai, &v) in vec_acc.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let base = ((ai * dims[s].1 + is[s]) * n + js[s]) * b;
                        for (bi, slot) in next.iter_mut().enumerate() {
                            *slot += v * core[base + bi];
                        }
                    }
                    let _ = a;
                    vec_acc = next;
                }
                out[row * cols + col] = vec_acc[0];
            }
        }
        DenseTensor::from_f64(&[rows, cols], out).unwrap()
    }

    #[test]
    fn identity_4x4_interleaved_is_bond_one() {
        let mut eye = vec![0.0f64; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let w = DenseTensor::from_f64(&[4, 4], eye).unwrap();
        let scheme = IndexScheme::new(vec![2, 2], vec![2, 2]).unwrap();
        let layer = decompose(&w, &scheme, 4, 0.0).unwrap();
        assert_eq!(layer.bond_dims(), vec![1]);
        assert!(layer.truncation_error() <= 1e-12);
        let back = reconstruct(&layer).unwrap();
        assert!(rel_error(&w, &back) <= 1e-12);
    }

    #[test]
    fn kronecker_products_are_bond_one() {
        // Explicit Kronecker builder as the structural oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a = random_tensor(&mut rng, &[3, 2]);
            let b = random_tensor(&mut rng, &[4, 5]);
            let (am, an) = (3, 2);
            let (bm, bn) = (4, 5);
            let av = a.to_f64_vec();
            let bv = b.to_f64_vec();
            let mut kron = vec![0.0f64; am * bm * an * bn];
            for i in 0..am {
                for j in 0..an {
                    for p in 0..bm {
                        for q in 0..bn {
                            kron[(i * bm + p) * (an * bn) + (j * bn + q)] =
                                av[i * an + j] * bv[p * bn + q];
                        }
                    }
                }
            }
            let w = DenseTensor::from_f64(&[am * bm, an * bn], kron).unwrap();
            let scheme = IndexScheme::new(vec![am, bm], vec![an, bn]).unwrap();
            let layer = decompose(&w, &scheme, 16, 0.0).unwrap();
            assert_eq!(layer.bond_dims(), vec![1], "kronecker should be bond 1");
            let back = reconstruct(&layer).unwrap();
            assert!(rel_error(&w, &back) <= 1e-12);
        }
    }

    #[test]
    fn full_bond_decomposition_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &(m, n, k) in &[(12usize, 12usize, 2usize), (8, 27, 3), (30, 16, 2)] {
            let w = random_tensor(&mut rng, &[m, n]);
            let scheme = IndexScheme::auto(m, n, k).unwrap();
            let layer = decompose(&w, &scheme, scheme.saturating_bond(), 0.0).unwrap();
            let back = reconstruct(&layer).unwrap();
            assert!(
                rel_error(&w, &back) <= 1e-12,
                "({m},{n},k={k}): rel error {}",
                rel_error(&w, &back)
            );
            assert!(layer.truncation_error() <= 1e-10);
        }
    }

    #[test]
    fn reconstruct_matches_index_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for &(m, n, k, chi) in &[(12usize, 12usize, 2usize, 3usize), (8, 27, 3, 2), (16, 16, 2, 4)]
        {
            let w = random_tensor(&mut rng, &[m, n]);
            let scheme = IndexScheme::auto(m, n, k).unwrap();
            let layer = decompose(&w, &scheme, chi, 0.0).unwrap();
            let fast = reconstruct(&layer).unwrap();
            let slow = reconstruct_oracle(&layer);
            assert!(
                rel_error(&slow, &fast) <= 1e-12,
                "contraction disagrees with index-summation oracle"
            );
        }
    }

    #[test]
    fn truncation_error_bounds_true_error_and_single_cut_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // k = 2: exactly one cut, so the certificate is the exact error.
        let w = random_tensor(&mut rng, &[12, 12]);
        let scheme = IndexScheme::auto(12, 12, 2).unwrap();
        for chi in [1usize, 2, 4, 8] {
            let layer = decompose(&w, &scheme, chi, 0.0).unwrap();
            let back = reconstruct(&layer).unwrap();
            let true_err = {
                let wv = w.to_f64_vec();
                let bv = back.to_f64_vec();
                wv.iter()
                    .zip(&bv)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            };
            assert!(
                (true_err - layer.truncation_error()).abs() <= 1e-9 * true_err.max(1e-12),
                "chi={chi}: certificate {} vs true {true_err}",
                layer.truncation_error()
            );
        }
        // k = 3: multiple cuts, certificate is an upper bound.
        let w = random_tensor(&mut rng, &[27, 8]);
        let scheme = IndexScheme::auto(27, 8, 3).unwrap();
        for chi in [1usize, 2, 3] {
            let layer = decompose(&w, &scheme, chi, 0.0).unwrap();
            let back = reconstruct(&layer).unwrap();
            let true_err = {
                let wv = w.to_f64_vec();
                let bv = back.to_f64_vec();
                wv.iter()
                    .zip(&bv)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            };
            assert!(
                true_err <= layer.truncation_error() * (1.0 + 1e-9) + 1e-12,
                "chi={chi}: true error {true_err} exceeds certificate {}",
                layer.truncation_error()
            );
        }
    }

    #[test]
    fn certificate_is_monotone_in_bond_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let w = random_tensor(&mut rng, &[24, 24]);
        let scheme = IndexScheme::auto(24, 24, 3).unwrap();
        let mut last = f64::INFINITY;
        for chi in 1..=8 {
            let layer = decompose(&w, &scheme, chi, 0.0).unwrap();
            let err = layer.truncation_error();
            assert!(
                err <= last + 1e-12,
                "certificate rose from {last} to {err} at chi={chi}"
            );
            last = err;
        }
    }

    #[test]
    fn cores_are_left_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w = random_tensor(&mut rng, &[16, 16]);
        let scheme = IndexScheme::auto(16, 16, 2).unwrap();
        let layer = decompose(&w, &scheme, 3, 0.0).unwrap();
        // Every core except the last, reshaped to (a*m*n, b), has orthonormal
        // columns.
        for core in &layer.cores()[..layer.cores().len() - 1] {
            let buf = core.tensor().to_f64_vec();
            let rows = core.left_bond() * core.row_dim() * core.col_dim();
            let b = core.right_bond();
            for c1 in 0..b {
                for c2 in 0..b {
                    let dot: f64 = (0..rows).map(|r| buf[r * b + c1] * buf[r * b + c2]).sum();
                    let want = if c1 == c2 { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() <= 1e-12, "gram[{c1},{c2}] = {dot}");
                }
            }
        }
    }

    #[test]
    fn param_count_follows_closed_form_for_square_216() {
        // For a 216x216 matrix split (6,6,6)x(6,6,6) with saturated uniform
        // bond chi: 36*chi + 36*chi^2 + 36*chi = 2*36*chi + 36*chi^2.
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let w = random_tensor(&mut rng, &[216, 216]);
        let scheme = IndexScheme::auto(216, 216, 3).unwrap();
        assert_eq!(scheme.row_factors(), &[6, 6, 6]);
        for chi in [1usize, 2, 4, 8, 16, 32] {
            let layer = decompose(&w, &scheme, chi, 0.0).unwrap();
            assert_eq!(layer.param_count(), 2 * 36 * chi + 36 * chi * chi);
            assert_eq!(estimate_tensorized_params(&scheme, chi), layer.param_count());
        }
    }

    #[test]
    fn k1_scheme_is_a_single_core_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let w = random_tensor(&mut rng, &[5, 7]);
        let scheme = IndexScheme::new(vec![5], vec![7]).unwrap();
        let layer = decompose(&w, &scheme, 1, 0.0).unwrap();
        assert_eq!(layer.cores().len(), 1);
        assert_eq!(layer.bond_dims(), Vec::<usize>::new());
        assert_eq!(layer.truncation_error(), 0.0);
        let back = reconstruct(&layer).unwrap();
        assert!(rel_error(&w, &back) <= 1e-15);
    }

    #[test]
    fn apply_matches_reconstruct_then_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for &(m, n, k, chi, batch) in &[
            (12usize, 12usize, 2usize, 3usize, 4usize),
            (8, 27, 3, 2, 5),
            (16, 16, 2, 16, 1),
        ] {
            let w = random_tensor(&mut rng, &[m, n]);
            let scheme = IndexScheme::auto(m, n, k).unwrap();
            let layer = decompose(&w, &scheme, chi, 0.0).unwrap();
            let x = random_tensor(&mut rng, &[n, batch]);
            let fast = apply(&layer, &x).unwrap();
            // Oracle: dense reconstruction (via the independently-checked
            // oracle path) times x, computed with a plain triple loop.
            let dense = reconstruct_oracle(&layer).to_f64_vec();
            let xv = x.to_f64_vec();
            let mut want = vec![0.0f64; m * batch];
            for i in 0..m {
                for bcol in 0..batch {
                    let mut accv = 0.0;
                    for j in 0..n {
                        accv += dense[i * n + j] * xv[j * batch + bcol];
                    }
                    want[i * batch + bcol] = accv;
                }
            }
            let got = fast.to_f64_vec();
            let scale = want.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
            let diff = got
                .iter()
                .zip(&want)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!(diff / scale <= 1e-12, "apply mismatch: {diff}");
        }
    }

    #[test]
    fn apply_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (m, n, k, chi, batch) = (16, 6, 2, 2, 3);
        let w = random_tensor(&mut rng, &[m, n]);
        let scheme = IndexScheme::auto(m, n, k).unwrap();
        let mut layer = decompose(&w, &scheme, chi, 0.0).unwrap();
        let x = random_tensor(&mut rng, &[n, batch]);
        // loss = sum of c .* y for fixed random c
        let c = random_tensor(&mut rng, &[m, batch]);
        let cv = c.to_f64_vec();

        let loss = |layer: &MpoLayer, x: &DenseTensor| -> f64 {
            let y = apply(layer, x).unwrap().to_f64_vec();
            y.iter().zip(&cv).map(|(a, b)| a * b).sum()
        };

        let (_, cache) = apply_with_cache(&layer, &x).unwrap();
        let grads = apply_backward(&layer, &cache, &c).unwrap();

        let h = 1e-5;
        // Core gradients.
        for ci in 0..layer.cores().len() {
            let count = layer.cores()[ci].tensor().len();
            let probes = [0usize, count / 2, count - 1];
            for &p in &probes {
                let orig = layer.cores()[ci].tensor().to_f64_vec()[p];
                layer.core_f64_mut(ci).unwrap()[p] = orig + h;
                let up = loss(&layer, &x);
                layer.core_f64_mut(ci).unwrap()[p] = orig - h;
                let down = loss(&layer, &x);
                layer.core_f64_mut(ci).unwrap()[p] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.core_grads[ci].to_f64_vec()[p];
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                    "core {ci} entry {p}: fd {fd} vs analytic {an}"
                );
            }
        }
        // Input gradient.
        let xv = x.to_f64_vec();
        for p in [0usize, xv.len() / 2, xv.len() - 1] {
            let mut bumped = xv.clone();
            bumped[p] = xv[p] + h;
            let up = loss(&layer, &DenseTensor::from_f64(&[n, batch], bumped.clone()).unwrap());
            bumped[p] = xv[p] - h;
            let down = loss(&layer, &DenseTensor::from_f64(&[n, batch], bumped).unwrap());
            let fd = (up - down) / (2.0 * h);
            let an = grads.input_grad.to_f64_vec()[p];
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                "input entry {p}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn saturating_bond_matches_cut_products() {
        let s = IndexScheme::new(vec![6, 6, 6], vec![6, 6, 6]).unwrap();
        // cuts: min(36, 1296) = 36 and min(1296, 36) = 36
        assert_eq!(s.saturating_bond(), 36);
        let s = IndexScheme::new(vec![2, 2], vec![2, 2]).unwrap();
        assert_eq!(s.saturating_bond(), 4);
        let s = IndexScheme::new(vec![5], vec![7]).unwrap();
        assert_eq!(s.saturating_bond(), 1);
        let s = IndexScheme::new(vec![4, 3, 2], vec![1, 1, 1]).unwrap();
        // cuts: min(4, 6)=4, min(12, 2)=2
        assert_eq!(s.saturating_bond(), 4);
    }

    #[test]
    fn decomposition_at_saturating_bond_has_no_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let w = random_tensor(&mut rng, &[16, 16]);
        let scheme = IndexScheme::auto(16, 16, 2).unwrap();
        let layer = decompose(&w, &scheme, scheme.saturating_bond(), 0.0).unwrap();
        assert_eq!(layer.truncation_error(), 0.0);
    }

    #[test]
    fn dtype_round_trip_through_f32_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let w64 = random_tensor(&mut rng, &[12, 12]);
        let w32 = w64.cast(Dtype::F32).unwrap();
        let scheme = IndexScheme::auto(12, 12, 2).unwrap();
        let layer = decompose(&w32, &scheme, scheme.saturating_bond(), 0.0).unwrap();
        assert_eq!(layer.dtype(), Dtype::F32);
        let back = reconstruct(&layer).unwrap();
        assert!(rel_error(&w32, &back) <= 1e-6);
    }

    #[test]
    fn from_parts_validates_the_chain() {
        let scheme = IndexScheme::new(vec![2, 2], vec![2, 2]).unwrap();
        let good0 = DenseTensor::from_f64(&[1, 2, 2, 3], vec![0.0; 12]).unwrap();
        let good1 = DenseTensor::from_f64(&[3, 2, 2, 1], vec![0.0; 12]).unwrap();
        assert!(MpoLayer::from_parts(
            vec![good0.clone(), good1.clone()],
            scheme.clone(),
            4,
            0.0
        )
        .is_ok());
        // bond mismatch
        let bad1 = DenseTensor::from_f64(&[2, 2, 2, 1], vec![0.0; 8]).unwrap();
        assert!(MpoLayer::from_parts(vec![good0.clone(), bad1], scheme.clone(), 4, 0.0).is_err());
        // boundary bond not 1
        let bad0 = DenseTensor::from_f64(&[2, 2, 2, 3], vec![0.0; 24]).unwrap();
        let tail = DenseTensor::from_f64(&[3, 2, 2, 1], vec![0.0; 12]).unwrap();
        assert!(MpoLayer::from_parts(vec![bad0, tail], scheme.clone(), 4, 0.0).is_err());
        // bond exceeding max_bond
        assert!(MpoLayer::from_parts(vec![good0.clone(), good1.clone()], scheme.clone(), 2, 0.0)
            .is_err());
        // wrong core count
        assert!(MpoLayer::from_parts(vec![good0], scheme, 4, 0.0).is_err());
    }

    #[test]
    fn decompose_validates_inputs() {
        let w = DenseTensor::from_f64(&[4, 4], vec![0.0; 16]).unwrap();
        let scheme = IndexScheme::new(vec![2, 2], vec![2, 2]).unwrap();
        assert!(decompose(&w, &scheme, 0, 0.0).is_err());
        assert!(decompose(&w, &scheme, 4, -1.0).is_err());
        let wrong = IndexScheme::new(vec![2, 3], vec![2, 2]).unwrap();
        assert!(decompose(&w, &wrong, 4, 0.0).is_err());
        let cube = DenseTensor::from_f64(&[2, 2, 4], vec![0.0; 16]).unwrap();
        assert!(decompose(&cube, &scheme, 4, 0.0).is_err());
        let int = DenseTensor::from_i8(&[4, 4], vec![0; 16]).unwrap();
        assert!(decompose(&int, &scheme, 4, 0.0).is_err());
    }

    #[test]
    fn apply_validates_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let w = random_tensor(&mut rng, &[4, 6]);
        let scheme = IndexScheme::auto(4, 6, 2).unwrap();
        let layer = decompose(&w, &scheme, 4, 0.0).unwrap();
        let bad_rows = random_tensor(&mut rng, &[4, 2]);
        assert!(apply(&layer, &bad_rows).is_err());
        let bad_rank = random_tensor(&mut rng, &[6]);
        assert!(apply(&layer, &bad_rank).is_err());
    }
}
