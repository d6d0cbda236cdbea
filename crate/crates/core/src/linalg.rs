//! Row-major dense kernels used by the field MLPs. All matrices are contiguous.

/// `out (n x fo) = input (n x fi) * w (fi x fo) + b`.
pub(crate) fn dense_forward(
    input: &[f64],
    n: usize,
    fi: usize,
    w: &[f64],
    b: &[f64],
    fo: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(input.len(), n * fi);
    debug_assert_eq!(w.len(), fi * fo);
    debug_assert_eq!(out.len(), n * fo);
    for row in out.chunks_exact_mut(fo) {
        row.copy_from_slice(b);
    }
    if n == 0 || fi == 0 || fo == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            n,
            fi,
            fo,
            1.0,
            input.as_ptr(),
            fi as isize,
            1,
            w.as_ptr(),
            fo as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            fo as isize,
            1,
        );
    }
}

/// `dw += input^T * d_out`, `db += colsum(d_out)`.
pub(crate) fn dense_grad_params(
    input: &[f64],
    n: usize,
    fi: usize,
    d_out: &[f64],
    fo: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    debug_assert_eq!(dw.len(), fi * fo);
    for row in d_out.chunks_exact(fo) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    if n == 0 || fi == 0 || fo == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            fi,
            n,
            fo,
            1.0,
            input.as_ptr(),
            1,
            fi as isize,
            d_out.as_ptr(),
            fo as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            fo as isize,
            1,
        );
    }
}

/// `d_in (n x fi) = d_out (n x fo) * w^T`.
pub(crate) fn dense_grad_input(
    d_out: &[f64],
    n: usize,
    fo: usize,
    w: &[f64],
    fi: usize,
    d_in: &mut [f64],
) {
    debug_assert_eq!(d_in.len(), n * fi);
    if n == 0 || fi == 0 {
        return;
    }
    if fo == 0 {
        d_in.fill(0.0);
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            n,
            fo,
            fi,
            1.0,
            d_out.as_ptr(),
            fo as isize,
            1,
            w.as_ptr(),
            1,
            fo as isize,
            0.0,
            d_in.as_mut_ptr(),
            fi as isize,
            1,
        );
    }
}
