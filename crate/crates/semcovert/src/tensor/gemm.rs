//! f64 GEMM on ndarray views, backed by `matrixmultiply`.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

/// c = alpha * (a @ b) + beta * c. Accepts arbitrary strides, so transposed
/// views can be passed without copying.
pub fn gemm_into(
    c: &mut ArrayViewMut2<f64>,
    alpha: f64,
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    beta: f64,
) {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "gemm inner dims {k} vs {k2}");
    assert_eq!(c.dim(), (m, n), "gemm output dims");
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a.strides()[0],
            a.strides()[1],
            b.as_ptr(),
            b.strides()[0],
            b.strides()[1],
            beta,
            c.as_mut_ptr(),
            c.strides()[0],
            c.strides()[1],
        );
    }
}

/// a @ b as a fresh array.
pub fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    gemm_into(&mut out.view_mut(), 1.0, a, b, 0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn matches_naive_matmul() {
        let a = arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = arr2(&[[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]]);
        let c = matmul(&a.view(), &b.view());
        assert_eq!(c, arr2(&[[58.0, 64.0], [139.0, 154.0]]));
    }

    #[test]
    fn transposed_views_work() {
        let a = arr2(&[[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]]);
        let b = arr2(&[[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]]);
        let c = matmul(&a.t(), &b.view());
        assert_eq!(c, arr2(&[[58.0, 64.0], [139.0, 154.0]]));
    }
}
