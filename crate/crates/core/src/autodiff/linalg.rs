/// `C = op(A) · op(B)` where `op` optionally transposes.
///
/// `a` is stored row-major as `a_rows × a_cols`, likewise `b`. Returns the
/// output dimensions and row-major data.
pub(crate) fn matmul(
    a: &[f64],
    (a_rows, a_cols): (usize, usize),
    ta: bool,
    b: &[f64],
    (b_rows, b_cols): (usize, usize),
    tb: bool,
) -> (usize, usize, Vec<f64>) {
    let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (k2, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
    debug_assert_eq!(k, k2);
    let (rsa, csa) = if ta { (1, a_cols) } else { (a_cols, 1) };
    let (rsb, csb) = if tb { (1, b_cols) } else { (b_cols, 1) };
    let mut c = vec![0.0; m * n];
    // SAFETY: the strides describe exactly the `a_rows × a_cols` and
    // `b_rows × b_cols` row-major buffers (possibly read transposed), and
    // `c` holds `m × n` elements written with row stride `n`.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    (m, n, c)
}
