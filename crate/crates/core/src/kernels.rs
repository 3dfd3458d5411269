//! Plain-loop numeric kernels shared by the tape ops.
//!
//! All kernels accumulate into `out`; callers zero it when they want a
//! fresh product. Loop order keeps the innermost loop contiguous so the
//! compiler can vectorize it without reassociating any sum.

const MR: usize = 4;
const NR: usize = 8;

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Each output element sums its `k` products in ascending `p`, exactly like
/// the naive triple loop, so results match it bitwise.
pub fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (mb, nb) = (m - m % MR, n - n % NR);
    for i in (0..mb).step_by(MR) {
        for j in (0..nb).step_by(NR) {
            let mut acc = [[0.0; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for p in 0..k {
                let bp = &b[p * n + j..p * n + j + NR];
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for (o, &bv) in row.iter_mut().zip(bp) {
                        *o += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
        }
        gemm_edge(a, b, out, i..i + MR, nb..n, k, n);
    }
    gemm_edge(a, b, out, mb..m, 0..n, k, n);
}

fn gemm_edge(a: &[f64], b: &[f64], out: &mut [f64], rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, k: usize, n: usize) {
    if cols.is_empty() {
        return;
    }
    for i in rows {
        let orow = &mut out[i * n + cols.start..i * n + cols.end];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n + cols.start..p * n + cols.end];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · c` for `a[m×k]`, `c[m×n]`; sums run over ascending
/// rows of `a`.
pub fn gemm_tn(a: &[f64], c: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let (kb, nb) = (k - k % MR, n - n % NR);
    for p in (0..kb).step_by(MR) {
        for j in (0..nb).step_by(NR) {
            let mut acc = [[0.0; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(p + r) * n + j..(p + r) * n + j + NR]);
            }
            for i in 0..m {
                let ci = &c[i * n + j..i * n + j + NR];
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[i * k + p + r];
                    for (o, &cv) in row.iter_mut().zip(ci) {
                        *o += av * cv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(p + r) * n + j..(p + r) * n + j + NR].copy_from_slice(row);
            }
        }
    }
    let edge = |out: &mut [f64], ps: std::ops::Range<usize>, cols: std::ops::Range<usize>| {
        if cols.is_empty() || ps.is_empty() {
            return;
        }
        for i in 0..m {
            let crow = &c[i * n + cols.start..i * n + cols.end];
            for p in ps.clone() {
                let aip = a[i * k + p];
                let orow = &mut out[p * n + cols.start..p * n + cols.end];
                for (o, &cv) in orow.iter_mut().zip(crow) {
                    *o += aip * cv;
                }
            }
        }
    };
    edge(out, 0..kb, nb..n);
    edge(out, kb..k, 0..n);
}

/// `out[m×k] += a[m×n] · bᵀ` for `b[k×n]`.
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    gemm(a, &bt, out, m, n, k);
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Naive triple loop, kept as an independent reference for tests.
pub fn matmul_reference(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(n: usize, salt: u64) -> Vec<f64> {
        (0..n as u64).map(|i| (((i * 2654435761 + salt) % 1000) as f64 / 997.0) - 0.5).collect()
    }

    #[test]
    fn blocked_products_match_reference_bitwise() {
        for &(m, k, n) in &[(1, 1, 1), (4, 3, 8), (5, 7, 9), (9, 13, 17), (12, 2, 3), (33, 27, 16)] {
            let a = filled(m * k, 1);
            let b = filled(k * n, 2);
            let mut out = vec![0.0; m * n];
            gemm(&a, &b, &mut out, m, k, n);
            assert_eq!(out, matmul_reference(&a, &b, m, k, n), "gemm {m}x{k}x{n}");

            let c = filled(m * n, 3);
            let mut tn = vec![0.0; k * n];
            gemm_tn(&a, &c, &mut tn, m, k, n);
            assert_eq!(tn, matmul_reference(&transpose(&a, m, k), &c, k, m, n), "gemm_tn {m}x{k}x{n}");
        }
    }

    #[test]
    fn gemm_accumulates() {
        let a = filled(6 * 5, 4);
        let b = filled(5 * 10, 5);
        let mut out = vec![1.0; 60];
        gemm(&a, &b, &mut out, 6, 5, 10);
        let r = matmul_reference(&a, &b, 6, 5, 10);
        for (o, x) in out.iter().zip(&r) {
            assert!((o - (1.0 + x)).abs() < 1e-14);
        }
    }
}
