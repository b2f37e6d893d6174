//! Row-major single-precision GEMM wrappers. Each accumulates into `out`.

fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    out: &mut [f32],
) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && out.len() >= m * n,
        "gemm operand too short"
    );
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index sgemm touches through the
    // given strides, and `out` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[M,N] += a[M,K] * b[K,N]`
pub(crate) fn mm(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    sgemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out);
}

/// `out[M,N] += a[M,K] * b[N,K]^T`
pub(crate) fn mm_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    sgemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), out);
}

/// `out[K,N] += a[M,K]^T * b[M,N]`
pub(crate) fn mm_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    sgemm(k, m, n, a, (1, k as isize), b, (n as isize, 1), out);
}
