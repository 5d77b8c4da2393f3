//! Row-major f64 GEMM kernels used by both the plain tensor API and the
//! backward rules. All kernels accumulate into `c`.
//!
//! Summation order is fixed by the loop structure, so results are
//! bit-reproducible for identical inputs.

/// Register tile width in output columns.
const TILE: usize = 16;

/// Accumulates a 4×`TILE` block of `c` held in registers. `a_at(r, p)`
/// reads the left operand; each element sums over `p` in order.
#[inline(always)]
fn tile4(c: &mut [f64], a_at: impl Fn(usize, usize) -> f64, b: &[f64], i: usize, j: usize, k: usize, n: usize) {
    let mut acc = [[0.0f64; TILE]; 4];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + TILE]);
    }
    for p in 0..k {
        let bv: &[f64; TILE] = b[p * n + j..p * n + j + TILE].try_into().unwrap();
        for (r, row) in acc.iter_mut().enumerate() {
            let av = a_at(r, p);
            for (x, y) in row.iter_mut().zip(bv) {
                *x += av * y;
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..(i + r) * n + j + TILE].copy_from_slice(row);
    }
}

/// Shared driver for the `nn` and `tn` layouts.
#[inline(always)]
fn gemm_rows(a_at: impl Fn(usize, usize) -> f64 + Copy, b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let full = n / TILE * TILE;
    let rows4 = m / 4 * 4;
    // Column tiles outermost so a `k`×`TILE` slice of `b` is reused by every
    // row block while it is still in cache.
    for j in (0..full).step_by(TILE) {
        for i in (0..rows4).step_by(4) {
            tile4(c, |r, p| a_at(i + r, p), b, i, j, k, n);
        }
    }
    for r in 0..rows4 {
        for j in full..n {
            let mut x = c[r * n + j];
            for p in 0..k {
                x += a_at(r, p) * b[p * n + j];
            }
            c[r * n + j] = x;
        }
    }
    let mut i = rows4;
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a_at(i, p);
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
        i += 1;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_rows(|r, p| a[r * k + p], b, c, m, k, n);
}

fn row_of(x: &[f64], i: usize, k: usize) -> &[f64] {
    &x[i * k..(i + 1) * k]
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |x, i| row_of(x, i, k);
    let (m4, n4) = (m / 4 * 4, n / 4 * 4);
    for i in (0..m4).step_by(4) {
        let ar: [&[f64]; 4] = std::array::from_fn(|r| row(a, i + r));
        for j in (0..n4).step_by(4) {
            let d = dot4x4(ar, std::array::from_fn(|s| row(b, j + s)));
            for (r, dr) in d.iter().enumerate() {
                for (s, v) in dr.iter().enumerate() {
                    c[(i + r) * n + j + s] += v;
                }
            }
        }
        for j in n4..n {
            for (r, ai) in ar.iter().enumerate() {
                c[(i + r) * n + j] += dot(ai, row(b, j));
            }
        }
    }
    for i in m4..m {
        for j in 0..n {
            c[i * n + j] += dot(row(a, i), row(b, j));
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_rows(|r, p| a[p * m + r], b, c, m, k, n);
}

#[inline(always)]
fn mac8(acc: &mut [f64; 8], x: &[f64; 8], y: &[f64; 8]) {
    for l in 0..8 {
        acc[l] += x[l] * y[l];
    }
}

/// All sixteen dot products between four rows of `a` and four of `b`,
/// each with the same accumulation order as [`dot`].
#[inline(always)]
fn dot4x4(a: [&[f64]; 4], b: [&[f64]; 4]) -> [[f64; 4]; 4] {
    let k = a[0].len();
    let full = k / 8 * 8;
    let mut acc = [[[0.0f64; 8]; 4]; 4];
    for base in (0..full).step_by(8) {
        let xa: [&[f64; 8]; 4] = std::array::from_fn(|r| a[r][base..base + 8].try_into().unwrap());
        let xb: [&[f64; 8]; 4] = std::array::from_fn(|s| b[s][base..base + 8].try_into().unwrap());
        for (accr, xr) in acc.iter_mut().zip(xa) {
            for (q, xs) in accr.iter_mut().zip(xb) {
                mac8(q, xr, xs);
            }
        }
    }
    let mut out = [[0.0; 4]; 4];
    for r in 0..4 {
        for s in 0..4 {
            let mut tail = 0.0;
            for p in full..k {
                tail += a[r][p] * b[s][p];
            }
            let q = acc[r][s];
            out[r][s] = ((q[0] + q[1]) + (q[2] + q[3])) + ((q[4] + q[5]) + (q[6] + q[7])) + tail;
        }
    }
    out
}

/// Dot product with eight independent accumulators, combined in a fixed order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}
