//! Strided matrix product over flat slices, backed by `matrixmultiply`.

/// Strides of a matrix view: (row stride, column stride).
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }

    fn max_offset(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c(m×n)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(av.max_offset(m, k) < a.len(), "gemm: lhs view out of bounds");
        assert!(bv.max_offset(k, n) < b.len(), "gemm: rhs view out of bounds");
    }
    assert!(cv.max_offset(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: every index touched by the kernel lies within the slices (asserted above).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
