//! Strided f64 matrix multiply used by the conv and dense layers.

/// Row/column strides of a matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    /// Row-major `rows x cols` matrix.
    pub fn row_major(cols: usize) -> Self {
        Strides { row: cols, col: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Strides { row: 1, col: cols }
    }
}

fn max_offset(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * s.row + (cols - 1) * s.col
    }
}

/// `c = a · b + beta · c` where `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || max_offset(m, k, sa) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || max_offset(k, n, sb) < b.len(), "gemm: rhs out of bounds");
    assert!(max_offset(m, n, sc) < c.len(), "gemm: output out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 1.0).collect();
        let bt: Vec<f64> = (0..n * k).map(|v| (v as f64).sin()).collect(); // n x k
        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &a,
            Strides::row_major(k),
            &bt,
            Strides::transposed(k),
            0.0,
            &mut c,
            Strides::row_major(n),
        );
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * bt[j * k + p]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }
}
