//! Row-major f64 matrix kernels. The ikj loop order keeps both the output
//! row and the B row contiguous, which the compiler vectorizes.

/// c += a (m x k) * b (k x n), all row-major.
pub(crate) fn gemm_accumulate(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c = a * b with c freshly zeroed.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_accumulate(m, k, n, a, b, &mut c);
    c
}

/// Row-major transpose of an (rows x cols) matrix.
pub(crate) fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 + 0.5).collect();
        let c = gemm(m, k, n, &a, &b);
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for l in 0..k {
                    want += a[i * k + l] * b[l * n + j];
                }
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let src: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let t = transpose(3, 4, &src);
        let back = transpose(4, 3, &t);
        assert_eq!(src, back);
    }
}
