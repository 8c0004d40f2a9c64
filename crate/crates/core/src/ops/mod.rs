//! Forward/backward kernels used by [`crate::Tape`]. All kernels operate on
//! contiguous row-major slices; shape validation happens on the tape side.

pub mod attention;
pub mod conv;
pub mod norm;
pub mod pool;
pub mod resize;

pub use conv::Conv2dSpec;

/// Row and column stride of a matrix view.
pub(crate) type Strides = (usize, usize);

/// `C = A·B + beta·C` for row-major operands. `trans_a` / `trans_b` read the
/// stored matrix as its transpose, so `A` is stored `k×m` when `trans_a`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    let sa = if trans_a { (1, m) } else { (k, 1) };
    let sb = if trans_b { (1, k) } else { (n, 1) };
    gemm_strided(m, k, n, a, sa, b, sb, beta, c, (n, 1));
}

fn covers(len: usize, rows: usize, cols: usize, (rs, cs): Strides) -> bool {
    rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < len
}

/// `C = A·B + beta·C` where every operand is a strided view into a slice.
/// Panics if a view reaches outside its slice.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    beta: f32,
    c: &mut [f32],
    sc: Strides,
) {
    assert!(
        covers(a.len(), m, k, sa) && covers(b.len(), k, n, sb) && covers(c.len(), m, n, sc),
        "gemm view out of bounds"
    );
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * sc.0 + j * sc.1] *= beta;
            }
        }
        return;
    }
    // SAFETY: the assertion above keeps every addressed element of the three
    // views inside its slice, and `c` is borrowed mutably so it cannot alias.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}
