//! Thin wrapper over the `matrixmultiply` kernels for row-major buffers.

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a_t` means `a` is stored as `k×m`; `b_t` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    if m <= SKINNY_ROWS || m * k * n <= SMALL_VOLUME {
        direct(m, k, n, a, a_t, b, b_t, c, beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made through these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below these sizes packing costs more than it saves.
const SKINNY_ROWS: usize = 4;
const SMALL_VOLUME: usize = 32 * 32 * 32;

#[allow(clippy::too_many_arguments)]
fn direct(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    let a_at = |i: usize, l: usize| if a_t { a[l * m + i] } else { a[i * k + l] };
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == 0.0 {
            row.fill(0.0);
        } else if beta != 1.0 {
            row.iter_mut().for_each(|v| *v *= beta);
        }
        if b_t {
            for (j, out) in row.iter_mut().enumerate() {
                let bj = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (l, &bv) in bj.iter().enumerate() {
                    acc += a_at(i, l) * bv;
                }
                *out += acc;
            }
        } else {
            for l in 0..k {
                let av = a_at(i, l);
                let bl = &b[l * n..(l + 1) * n];
                for (o, &bv) in row.iter_mut().zip(bl) {
                    *o += av * bv;
                }
            }
        }
    }
}
