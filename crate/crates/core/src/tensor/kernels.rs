// Row-major GEMM kernels, all accumulating into `c`. The blocked kernels
// come from `matrixmultiply`, which runs single-threaded here with a fixed
// summation order, so results are bit-reproducible.

use crate::scalar::Scalar;

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let (ki, ni) = (k as isize, n as isize);
    T::gemm_acc(m, k, n, (a, ki, 1), (b, ni, 1), (c, ni, 1));
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let (ki, ni) = (k as isize, n as isize);
    T::gemm_acc(m, k, n, (a, ki, 1), (b, 1, ki), (c, ni, 1));
}

/// c[m,n] += a[k,m]ᵀ · b[k,n]
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let (mi, ni) = (m as isize, n as isize);
    T::gemm_acc(m, k, n, (a, 1, mi), (b, ni, 1), (c, ni, 1));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn variants_agree_with_triple_loop() {
        let (m, k, n) = (5, 11, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        let mut c2 = vec![0.0; m * n];
        gemm_nt(&a, &transpose(&b, k, n), &mut c2, m, k, n);
        let mut c3 = vec![0.0; m * n];
        gemm_tn(&transpose(&a, m, k), &b, &mut c3, m, k, n);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-12);
            assert!((c2[i] - want[i]).abs() < 1e-12);
            assert!((c3[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulates_and_handles_empty_inner_dim() {
        let mut c = vec![1.0f32; 4];
        gemm_nn(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 0.0, 1.0], &mut c, 2, 2, 2);
        assert_eq!(c, vec![2.0, 3.0, 4.0, 5.0]);
        let mut c = vec![7.0f64; 6];
        gemm_nn(&[], &[], &mut c, 2, 0, 3);
        assert_eq!(c, vec![7.0; 6]);
    }
}
