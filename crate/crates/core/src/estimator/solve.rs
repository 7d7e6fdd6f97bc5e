//! Per-dimension solvers on the normal equations: exact least squares via
//! a positive-definite factorization with column dropping, and the
//! soft-threshold coordinate descent for the penalized variant.

use crate::linalg::{cholesky_in_place, cholesky_solve};
use crate::Real;

use super::design::{DesignProblem, EstimatorError};

/// Solution of one dimension's regression.
#[derive(Debug, Clone)]
pub struct DimSolution<F> {
    /// Coefficients in full layout order; dropped columns hold zero.
    pub coeffs: Vec<F>,
    /// Columns dropped as non-estimable (zero norm or reference group).
    pub dropped: Vec<usize>,
    /// Residual sum of squares (via the normal-equation identity).
    pub rss: F,
    /// Exact zeros among the *estimable* lag coefficients.
    pub kernel_zeros: usize,
    /// Estimable coefficients that are not exactly zero.
    pub effective: usize,
    /// Coordinate-descent sweeps, when the penalized path ran.
    pub sweeps: usize,
}

/// Exact least squares for one dimension, dropping flagged columns.
pub fn solve_ols<F: Real>(problem: &DesignProblem<'_, F>) -> Result<DimSolution<F>, EstimatorError> {
    let m = problem.layout.total_cols();
    let keep: Vec<usize> = (0..m).filter(|&c| problem.active[c]).collect();
    let ma = keep.len();
    let mut compact = vec![F::zero(); ma * ma];
    for (ri, &r) in keep.iter().enumerate() {
        for (ci, &c) in keep.iter().enumerate() {
            compact[ri * ma + ci] = problem.gram[r * m + c];
        }
    }
    let mut x: Vec<F> = keep.iter().map(|&c| problem.rhs[c]).collect();
    cholesky_in_place(&mut compact, ma).map_err(|e| EstimatorError::SingularNormalEquations {
        dimension: problem.dimension,
        column: keep[e.0],
    })?;
    cholesky_solve(&compact, ma, &mut x);
    let mut coeffs = vec![F::zero(); m];
    for (ri, &c) in keep.iter().enumerate() {
        coeffs[c] = x[ri];
    }
    Ok(finish(problem, coeffs, 0))
}

/// Soft threshold: sign(v) * max(|v| - t, 0).
fn soft<F: Real>(v: F, t: F) -> F {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        F::zero()
    }
}

/// Penalized least squares: an l1 penalty of weight `lambda` on the lag
/// (excitement) coefficients only, solved by cyclic coordinate descent
/// on the raw, unstandardized columns. `lambda = 0` reproduces the OLS
/// solution. Restricted sweeps over the current support run between full
/// sweeps; every pass counts toward the sweep cap.
pub fn solve_lasso<F: Real>(
    problem: &DesignProblem<'_, F>,
    lambda: F,
    max_sweeps: usize,
) -> Result<DimSolution<F>, EstimatorError> {
    assert!(lambda >= F::zero());
    let m = problem.layout.total_cols();
    let keep: Vec<usize> = (0..m).filter(|&c| problem.active[c]).collect();
    let half_lambda = lambda / F::from_f64_lossy(2.0);
    let tol = F::from_f64_lossy(1e-8);

    let mut coeffs = vec![F::zero(); m];
    // g[c] = (Z y)_c - (Z Z^T coeffs)_c, kept current across updates and
    // refreshed periodically against accumulated rounding.
    let mut g: Vec<F> = problem.rhs.clone();

    let sweep = |cols: &[usize], coeffs: &mut Vec<F>, g: &mut Vec<F>| -> (F, F) {
        let mut max_change = F::zero();
        let mut max_coeff = F::zero();
        for &c in cols {
            let denom = problem.gram[c * m + c];
            let rho = g[c] + denom * coeffs[c];
            let new = if problem.layout.is_lag_col(c) {
                soft(rho, half_lambda) / denom
            } else {
                rho / denom
            };
            let delta = new - coeffs[c];
            if delta != F::zero() {
                let row = &problem.gram[c * m..(c + 1) * m];
                for (gv, rv) in g.iter_mut().zip(row) {
                    *gv -= delta * *rv;
                }
                coeffs[c] = new;
            }
            max_change = max_change.max(delta.abs());
            max_coeff = max_coeff.max(new.abs());
        }
        (max_change, max_coeff)
    };

    let mut sweeps = 0usize;
    loop {
        if sweeps >= max_sweeps {
            let fresh = gradient(problem, &coeffs);
            let gap = kkt_gap(problem, &coeffs, &fresh, lambda);
            return Err(EstimatorError::NonConvergence {
                dimension: problem.dimension,
                sweeps,
                gap: gap.to_f64_lossy(),
            });
        }
        sweeps += 1;
        if sweeps % 64 == 0 {
            g = gradient(problem, &coeffs);
        }
        let (change, scale) = sweep(&keep, &mut coeffs, &mut g);
        if change < tol * (F::one() + scale) {
            break;
        }
        // Iterate the current support to stability before the next full
        // sweep; cheap when the penalty has zeroed most lag columns.
        loop {
            if sweeps >= max_sweeps {
                break;
            }
            let support: Vec<usize> = keep
                .iter()
                .copied()
                .filter(|&c| coeffs[c] != F::zero() || !problem.layout.is_lag_col(c))
                .collect();
            if support.len() == keep.len() {
                break;
            }
            sweeps += 1;
            let (change, scale) = sweep(&support, &mut coeffs, &mut g);
            if change < tol * (F::one() + scale) {
                break;
            }
        }
    }
    Ok(finish(problem, coeffs, sweeps))
}

/// Exact gradient-side products `Z y - Z Z^T c` for a coefficient vector.
pub fn gradient<F: Real>(problem: &DesignProblem<'_, F>, coeffs: &[F]) -> Vec<F> {
    let m = problem.layout.total_cols();
    let mut g = problem.rhs.clone();
    for (c, &v) in coeffs.iter().enumerate() {
        if v != F::zero() {
            let row = &problem.gram[c * m..(c + 1) * m];
            for (gv, rv) in g.iter_mut().zip(row) {
                *gv -= v * *rv;
            }
        }
    }
    g
}

/// Largest violation of the stationarity conditions: |2 z_j . r| beyond
/// lambda on zeroed penalized columns, |2 z_j . r - lambda sign| on
/// nonzero ones, |z_j . r| on unpenalized columns.
pub fn kkt_gap<F: Real>(problem: &DesignProblem<'_, F>, coeffs: &[F], g: &[F], lambda: F) -> F {
    let two = F::from_f64_lossy(2.0);
    let mut gap = F::zero();
    for c in 0..problem.layout.total_cols() {
        if !problem.active[c] {
            continue;
        }
        let v = if problem.layout.is_lag_col(c) {
            if coeffs[c] == F::zero() {
                ((two * g[c]).abs() - lambda).max(F::zero())
            } else {
                (two * g[c] - lambda * coeffs[c].signum()).abs()
            }
        } else {
            g[c].abs()
        };
        gap = gap.max(v);
    }
    gap
}

fn finish<F: Real>(problem: &DesignProblem<'_, F>, coeffs: Vec<F>, sweeps: usize) -> DimSolution<F> {
    let m = problem.layout.total_cols();
    let dropped: Vec<usize> = (0..m).filter(|&c| !problem.active[c]).collect();
    let mut kernel_zeros = 0usize;
    let mut effective = 0usize;
    for c in 0..m {
        if !problem.active[c] {
            continue;
        }
        if coeffs[c] == F::zero() {
            if problem.layout.is_lag_col(c) {
                kernel_zeros += 1;
            }
        } else {
            effective += 1;
        }
    }
    // rss = y.y - 2 c.(Zy) + c.(ZZ^T c)
    let mut quad = F::zero();
    let mut lin = F::zero();
    for (c, &v) in coeffs.iter().enumerate() {
        if v != F::zero() {
            lin += v * problem.rhs[c];
            let row = &problem.gram[c * m..(c + 1) * m];
            let mut acc = F::zero();
            for (cv, rv) in coeffs.iter().zip(row) {
                acc += *cv * *rv;
            }
            quad += v * acc;
        }
    }
    let two = F::from_f64_lossy(2.0);
    let rss = (problem.yty - two * lin + quad).max(F::zero());
    DimSolution {
        coeffs,
        dropped,
        rss,
        kernel_zeros,
        effective,
        sweeps,
    }
}

/// Package coefficients solved externally (shared-factor path) with the
/// same bookkeeping as the in-module solvers.
pub fn refinish<F: Real>(problem: &DesignProblem<'_, F>, coeffs: Vec<F>) -> DimSolution<F> {
    finish(problem, coeffs, 0)
}

/// Residual vector of one dimension for a coefficient vector.
pub fn residuals<F: Real>(problem: &DesignProblem<'_, F>, coeffs: &[F]) -> Vec<F> {
    (0..problem.samples)
        .map(|j| problem.response(j) - problem.fitted(coeffs, j))
        .collect()
}
