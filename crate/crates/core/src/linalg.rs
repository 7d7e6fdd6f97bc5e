//! Minimal dense symmetric linear algebra: an in-place Cholesky
//! factorization with forward/backward solves and a log-determinant.
//! Matrices are row-major `Vec` slabs; only what the estimator and the
//! AIC computation need.

use crate::Real;

/// Error from a failed positive-definite factorization: the 0-based
/// column index whose pivot was non-positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotPositiveDefinite(pub usize);

/// In-place lower Cholesky of a symmetric matrix given by its full
/// row-major storage (only the lower triangle is read). On success the
/// lower triangle holds L with `a = L L^T`; the strict upper triangle is
/// left untouched.
pub fn cholesky_in_place<F: Real>(a: &mut [F], n: usize) -> Result<(), NotPositiveDefinite> {
    debug_assert_eq!(a.len(), n * n);
    for i in 0..n {
        for k in 0..=i {
            let mut s = F::zero();
            let (ri, rk) = (i * n, k * n);
            for m in 0..k {
                s += a[ri + m] * a[rk + m];
            }
            if i == k {
                let d = a[ri + i] - s;
                if d <= F::zero() || !d.is_finite() {
                    return Err(NotPositiveDefinite(i));
                }
                a[ri + i] = d.sqrt();
            } else {
                a[ri + k] = (a[ri + k] - s) / a[rk + k];
            }
        }
    }
    Ok(())
}

/// Solve `L L^T x = b` in place given the factor from
/// [`cholesky_in_place`].
pub fn cholesky_solve<F: Real>(l: &[F], n: usize, b: &mut [F]) {
    debug_assert_eq!(l.len(), n * n);
    debug_assert_eq!(b.len(), n);
    for i in 0..n {
        let mut s = b[i];
        let row = i * n;
        for j in 0..i {
            s -= l[row + j] * b[j];
        }
        b[i] = s / l[row + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= l[j * n + i] * b[j];
        }
        b[i] = s / l[i * n + i];
    }
}

/// log(det A) for `A = L L^T`.
pub fn log_det_from_cholesky<F: Real>(l: &[F], n: usize) -> F {
    let two = F::from_f64_lossy(2.0);
    (0..n).map(|i| l[i * n + i].ln()).sum::<F>() * two
}

/// Symmetrize a full row-major matrix in place: `a = (a + a^T) / 2`.
pub fn symmetrize<F: Real>(a: &mut [F], n: usize) {
    let half = F::from_f64_lossy(0.5);
    for i in 0..n {
        for j in 0..i {
            let v = (a[i * n + j] + a[j * n + i]) * half;
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize, seed: u64) -> Vec<f64> {
        // A = B B^T + n I from a deterministic LCG
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let b: Vec<f64> = (0..n * n).map(|_| next()).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += b[i * n + k] * b[j * n + k];
                }
                a[i * n + j] = s + if i == j { n as f64 } else { 0.0 };
            }
        }
        a
    }

    #[test]
    fn factor_solve_recovers_rhs() {
        let n = 23;
        let a = spd(n, 7);
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 - 3.0) / 5.0).collect();
        let mut b = vec![0.0; n];
        for i in 0..n {
            b[i] = (0..n).map(|j| a[i * n + j] * x_true[j]).sum();
        }
        let mut l = a.clone();
        cholesky_in_place(&mut l, n).unwrap();
        cholesky_solve(&l, n, &mut b);
        for i in 0..n {
            assert!((b[i] - x_true[i]).abs() < 1e-9, "x[{i}]");
        }
    }

    #[test]
    fn log_det_matches_two_by_two() {
        // [[4, 2], [2, 3]] has det 8
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        cholesky_in_place(&mut a, 2).unwrap();
        let ld: f64 = log_det_from_cholesky(&a, 2);
        assert!((ld - 8.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn indefinite_matrix_reports_column() {
        let mut a = vec![1.0, 0.0, 0.0, -1.0];
        assert_eq!(cholesky_in_place(&mut a, 2), Err(NotPositiveDefinite(1)));
    }
}
