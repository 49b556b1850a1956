//! Internal dense matrix product on raw row-major buffers.

use ndarray::ArrayView2;

/// `c = a @ b` where `a` is `m x k` and `b` is `k x n`, all row-major.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let av = ArrayView2::from_shape((m, k), a).expect("row-major m x k");
    let bv = ArrayView2::from_shape((k, n), b).expect("row-major k x n");
    av.dot(&bv).into_raw_vec_and_offset().0
}
