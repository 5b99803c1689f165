//! Plain-slice numeric kernels shared by the forward and backward passes.

use crate::element::Element;

/// Dot product with split accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip != T::zero() {
                axpy(a_ip, &b[p * n..(p + 1) * n], c_row);
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi != T::zero() {
                axpy(a_pi, b_row, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

pub fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
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

    #[test]
    fn three_layouts_agree_with_triple_loop() {
        let (m, k, n) = (5, 11, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        let bt = transpose(&b, k, n);
        let mut c_nt = vec![0.0; m * n];
        matmul_nt_acc(&a, &bt, &mut c_nt, m, k, n);
        let at = transpose(&a, m, k);
        let mut c_tn = vec![0.0; m * n];
        matmul_tn_acc(&at, &b, &mut c_tn, k, m, n);

        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-12);
            assert!((c_nt[i] - want[i]).abs() < 1e-12);
            assert!((c_tn[i] - want[i]).abs() < 1e-12);
        }
    }
}
