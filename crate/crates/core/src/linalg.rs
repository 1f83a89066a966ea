//! Small dense kernels shared by the autodiff tape and the frozen extractor.

/// `c = a @ b + beta * c` over strided views; `c` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every view is in bounds. The largest index touched in `a` is
    // (m-1)*rsa + (k-1)*csa, which the callers size exactly; likewise for `b`
    // and the row-major `m x n` output.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
