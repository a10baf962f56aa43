use rayon::prelude::*;

use super::Element;

const ROW_BLOCK: usize = 32;
const COL_CHUNK: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Every output element accumulates its `k` products in ascending `k` order,
/// so the result is bit-identical to a naive triple loop and independent of
/// the worker count.
pub fn gemm<T: Element>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let work = m * n * k;
    let body = |(blk, c_blk): (usize, &mut [T])| {
        let row0 = blk * ROW_BLOCK;
        let rows = c_blk.len() / n;
        gemm_block(n, k, &a[row0 * k..(row0 + rows) * k], b, c_blk);
    };
    if work >= 1 << 18 && m > ROW_BLOCK {
        c.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(body);
    } else {
        c.chunks_mut(ROW_BLOCK * n).enumerate().for_each(body);
    }
}

fn gemm_block<T: Element>(n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    let rows = c.len() / n;
    let mut col = 0;
    while col < n {
        let width = COL_CHUNK.min(n - col);
        let mut r = 0;
        while r + 4 <= rows {
            let (c0, rest) = c[r * n..].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, rest) = rest.split_at_mut(n);
            let c3 = &mut rest[..n];
            let c0 = &mut c0[col..col + width];
            let c1 = &mut c1[col..col + width];
            let c2 = &mut c2[col..col + width];
            let c3 = &mut c3[col..col + width];
            for kk in 0..k {
                let bs = &b[kk * n + col..kk * n + col + width];
                let a0 = a[r * k + kk];
                let a1 = a[(r + 1) * k + kk];
                let a2 = a[(r + 2) * k + kk];
                let a3 = a[(r + 3) * k + kk];
                for j in 0..width {
                    let bj = bs[j];
                    c0[j] = c0[j] + a0 * bj;
                    c1[j] = c1[j] + a1 * bj;
                    c2[j] = c2[j] + a2 * bj;
                    c3[j] = c3[j] + a3 * bj;
                }
            }
            r += 4;
        }
        while r < rows {
            let cr = &mut c[r * n + col..r * n + col + width];
            for kk in 0..k {
                let bs = &b[kk * n + col..kk * n + col + width];
                let av = a[r * k + kk];
                for (cj, &bj) in cr.iter_mut().zip(bs) {
                    *cj = *cj + av * bj;
                }
            }
            r += 1;
        }
        col += width;
    }
}

/// Row-major transpose of an `rows × cols` matrix.
pub(crate) fn transpose<T: Element>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matches_naive_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, n, k) in &[(1, 1, 1), (5, 7, 3), (37, 300, 19), (4, 513, 8), (70, 9, 33)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut c = vec![0.0; m * n];
            gemm(m, n, k, &a, &b, &mut c);
            assert_eq!(c, naive(m, n, k, &a, &b), "m={m} n={n} k={k}");
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let src: Vec<f32> = (0..35).map(|v| v as f32).collect();
        let t = transpose(5, 7, &src);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[5], 1.0);
        assert_eq!(transpose(7, 5, &t), src);
    }
}
