//! Strided matrix-multiply kernel shared by the tape operations.

/// A strided 2-D view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(off: usize, cols: usize) -> Self {
        Self { off, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows x cols` block starting at `off`.
    pub fn transposed(off: usize, cols: usize) -> Self {
        Self { off, rs: 1, cs: cols }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = a * b + beta * c` where `a` is `m x k` and `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
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
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[cv.off + i * cv.rs + j * cv.cs] *= beta;
            }
        }
        return;
    }
    assert!(av.last_index(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(bv.last_index(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: every index touched by the kernel lies inside the slices, as
    // checked by the bounds assertions above; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
