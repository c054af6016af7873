//! Row-major matrix product kernels.

/// Below this many multiply-adds a plain loop beats the packing overhead of
/// the blocked kernel.
const SMALL_GEMM: usize = 4096;

/// `c (+)= op(a) · op(b)` where `op` optionally transposes. `a` is stored
/// row-major as `m×k` (or `k×m` when `trans_a`), `b` as `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };

    if m * k * n <= SMALL_GEMM {
        let c = &mut c[..m * n];
        if !accumulate {
            c.fill(0.0);
        }
        match (trans_a, trans_b) {
            (false, false) => {
                for (i, crow) in c.chunks_exact_mut(n).enumerate() {
                    let arow = &a[i * k..(i + 1) * k];
                    for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
                        for (cv, bv) in crow.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
            }
            (false, true) => {
                for (i, crow) in c.chunks_exact_mut(n).enumerate() {
                    let arow = &a[i * k..(i + 1) * k];
                    for (cv, brow) in crow.iter_mut().zip(b.chunks_exact(k)) {
                        *cv += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            (true, false) => {
                for (acol, brow) in a.chunks_exact(m).zip(b.chunks_exact(n)).take(k) {
                    for (&av, crow) in acol.iter().zip(c.chunks_exact_mut(n)) {
                        for (cv, bv) in crow.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
            }
            (true, true) => {
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for p in 0..k {
                            acc += a[i * rsa + p * csa] * b[p * rsb + j * csb];
                        }
                        c[i * n + j] += acc;
                    }
                }
            }
        }
        return;
    }

    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays in
    // bounds of the three slices, and `c` does not alias `a` or `b`.
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
