//! Post-estimation smoothing, multi-day aggregation, and plot-data
//! export.
//!
//! Kernels come out of the estimator as step functions; a natural cubic
//! smoothing spline (penalized curvature, generalized cross-validation
//! over a fixed log grid) turns them back into curves. Daily estimator
//! sets aggregate by elementwise mean across days where each entry was
//! estimable.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{CategoricalBlock, EstimatorSet};
use crate::linalg::{cholesky_in_place, cholesky_solve};
use crate::Real;

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("need at least {need} knots, got {got}")]
    TooFewKnots { need: usize, got: usize },
    #[error("aggregation input mismatch: {0}")]
    MetadataMismatch(String),
    #[error("no estimator sets to aggregate")]
    NoSets,
    #[error("requested pair ({i}, {j}) outside the {dims}-type model")]
    UnknownPair { i: usize, j: usize, dims: usize },
    #[error("variant has no {0} block")]
    MissingBlock(&'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A natural cubic smoothing spline fitted to one kernel's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedKernel<F> {
    /// Knot abscissae: bin midpoints (r - 1/2) * delta.
    pub knots: Vec<F>,
    /// The raw step estimates at the knots.
    pub raw: Vec<F>,
    /// Fitted spline values at the knots.
    pub fitted: Vec<F>,
    /// Second derivatives at the knots (zero at both ends).
    pub second_derivs: Vec<F>,
    /// The curvature penalty selected by generalized cross-validation.
    pub smoothing_param: F,
}

impl<F: Real> SmoothedKernel<F> {
    /// Evaluate the spline anywhere; linear extrapolation beyond the end
    /// knots keeps the curve natural.
    pub fn evaluate(&self, t: F) -> F {
        let x = &self.knots;
        let n = x.len();
        let six = F::from_f64_lossy(6.0);
        if t <= x[0] {
            let h = x[1] - x[0];
            let slope = (self.fitted[1] - self.fitted[0]) / h - h * self.second_derivs[1] / six;
            return self.fitted[0] + slope * (t - x[0]);
        }
        if t >= x[n - 1] {
            let h = x[n - 1] - x[n - 2];
            let slope = (self.fitted[n - 1] - self.fitted[n - 2]) / h
                + h * self.second_derivs[n - 2] / six;
            return self.fitted[n - 1] + slope * (t - x[n - 1]);
        }
        let mut lo = 0usize;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let h = x[lo + 1] - x[lo];
        let a = (x[lo + 1] - t) / h;
        let b = (t - x[lo]) / h;
        let h2 = h * h / six;
        a * self.fitted[lo]
            + b * self.fitted[lo + 1]
            + ((a * a * a - a) * self.second_derivs[lo]
                + (b * b * b - b) * self.second_derivs[lo + 1])
                * h2
    }
}

/// Solve the penalized fit for a fixed curvature penalty: minimize
/// sum (y - f)^2 + lambda * integral f''^2 over natural cubic splines.
/// Returns fitted values, interior second derivatives, and the smoother
/// trace used by GCV.
fn penalized_fit<F: Real>(x: &[F], y: &[F], lambda: F) -> (Vec<F>, Vec<F>, F) {
    let n = x.len();
    let m = n - 2;
    let h: Vec<F> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
    // Banded construction kept dense: kernels have at most a few hundred
    // knots.
    let mut q = vec![F::zero(); n * m];
    for c in 0..m {
        q[c * m + c] = F::one() / h[c];
        q[(c + 1) * m + c] = -(F::one() / h[c] + F::one() / h[c + 1]);
        q[(c + 2) * m + c] = F::one() / h[c + 1];
    }
    let three = F::from_f64_lossy(3.0);
    let six = F::from_f64_lossy(6.0);
    let mut r = vec![F::zero(); m * m];
    for c in 0..m {
        r[c * m + c] = (h[c] + h[c + 1]) / three;
        if c + 1 < m {
            r[c * m + c + 1] = h[c + 1] / six;
            r[(c + 1) * m + c] = h[c + 1] / six;
        }
    }
    // M = R + lambda Q^T Q
    let mut qtq = vec![F::zero(); m * m];
    for a in 0..m {
        for b in 0..m {
            let mut acc = F::zero();
            for i in 0..n {
                acc += q[i * m + a] * q[i * m + b];
            }
            qtq[a * m + b] = acc;
        }
    }
    let mut big = vec![F::zero(); m * m];
    for i in 0..m * m {
        big[i] = r[i] + lambda * qtq[i];
    }
    cholesky_in_place(&mut big, m).expect("R + lambda Q'Q is positive definite");
    // gamma = M^{-1} Q^T y
    let mut gamma = vec![F::zero(); m];
    for c in 0..m {
        let mut acc = F::zero();
        for i in 0..n {
            acc += q[i * m + c] * y[i];
        }
        gamma[c] = acc;
    }
    cholesky_solve(&big, m, &mut gamma);
    // f = y - lambda Q gamma
    let mut fitted = y.to_vec();
    for i in 0..n {
        let mut acc = F::zero();
        for c in 0..m {
            acc += q[i * m + c] * gamma[c];
        }
        fitted[i] = fitted[i] - lambda * acc;
    }
    // trace(A) = n - lambda * trace(M^{-1} Q^T Q)
    let mut trace_term = F::zero();
    let mut col = vec![F::zero(); m];
    for c in 0..m {
        col.copy_from_slice(&qtq[c * m..(c + 1) * m]);
        // column c of QtQ (symmetric, so row == column)
        cholesky_solve(&big, m, &mut col);
        trace_term += col[c];
    }
    let trace = F::from_usize(n).unwrap() - lambda * trace_term;
    (fitted, gamma, trace)
}

/// Fit a natural cubic smoothing spline at a fixed penalty.
pub fn smoothing_spline<F: Real>(
    x: &[F],
    y: &[F],
    lambda: F,
) -> Result<SmoothedKernel<F>, PostprocessError> {
    if x.len() < 3 {
        return Err(PostprocessError::TooFewKnots {
            need: 3,
            got: x.len(),
        });
    }
    let n = x.len();
    let (fitted, gamma, _) = penalized_fit(x, y, lambda);
    let mut second = vec![F::zero(); n];
    second[1..n - 1].copy_from_slice(&gamma);
    Ok(SmoothedKernel {
        knots: x.to_vec(),
        raw: y.to_vec(),
        fitted,
        second_derivs: second,
        smoothing_param: lambda,
    })
}

/// Number of candidate penalties on the deterministic GCV grid.
pub const GCV_GRID_POINTS: usize = 41;

/// Smooth one kernel's step estimates: knots at bin midpoints, penalty
/// chosen by generalized cross-validation over a fixed 41-point
/// log-spaced grid.
pub fn smooth_kernel<F: Real>(raw: &[F], delta: F) -> Result<SmoothedKernel<F>, PostprocessError> {
    if raw.len() < 4 {
        return Err(PostprocessError::TooFewKnots {
            need: 4,
            got: raw.len(),
        });
    }
    let half = F::from_f64_lossy(0.5);
    let x: Vec<F> = (0..raw.len())
        .map(|r| (F::from_usize(r + 1).unwrap() - half) * delta)
        .collect();
    let n = raw.len();
    // Scale-aware grid: lambda has units of x^3.
    let unit = delta * delta * delta;
    let mut best: Option<(F, F)> = None; // (gcv, lambda)
    for g in 0..GCV_GRID_POINTS {
        let exp = -8.0 + 16.0 * g as f64 / (GCV_GRID_POINTS - 1) as f64;
        let lambda = unit * F::from_f64_lossy(10f64.powf(exp));
        let (fitted, _, trace) = penalized_fit(&x, raw, lambda);
        let denom = F::from_usize(n).unwrap() - trace;
        if denom <= F::from_f64_lossy(1e-8) {
            continue;
        }
        let rss: F = raw
            .iter()
            .zip(&fitted)
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum();
        let gcv = F::from_usize(n).unwrap() * rss / (denom * denom);
        if best.map_or(true, |(bg, _)| gcv < bg) {
            best = Some((gcv, lambda));
        }
    }
    let (_, lambda) = best.expect("GCV grid produced at least one candidate");
    smoothing_spline(&x, raw, lambda)
}

/// Elementwise mean of daily estimator sets with per-entry coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSet<F> {
    pub days: Vec<String>,
    pub mean: EstimatorSet<F>,
    /// Days contributing to each kernel entry (same layout as kernels).
    pub kernel_coverage: Option<Vec<u32>>,
    pub liq_coverage: Option<Vec<Vec<u32>>>,
    pub time_coverage: Option<Vec<Vec<u32>>>,
}

fn check_meta<F: Real>(sets: &[EstimatorSet<F>]) -> Result<(), PostprocessError> {
    let first = &sets[0].meta;
    for s in &sets[1..] {
        let m = &s.meta;
        if m.delta != first.delta
            || m.support != first.support
            || m.k_levels != first.k_levels
            || m.dims != first.dims
            || m.lag_steps != first.lag_steps
            || m.lambda != first.lambda
            || m.variant != first.variant
            || m.use_sizes != first.use_sizes
        {
            return Err(PostprocessError::MetadataMismatch(format!(
                "day {} was fitted under different settings than day {}",
                m.day, first.day
            )));
        }
    }
    Ok(())
}

fn mean_block<F: Real>(blocks: Vec<&CategoricalBlock<F>>) -> (CategoricalBlock<F>, Vec<Vec<u32>>) {
    let dims = blocks[0].values.len();
    let cats = blocks[0].values[0].len();
    let mut values = vec![vec![F::zero(); cats]; dims];
    let mut estimable = vec![vec![false; cats]; dims];
    let mut coverage = vec![vec![0u32; cats]; dims];
    for i in 0..dims {
        for c in 0..cats {
            let mut acc = F::zero();
            let mut n = 0u32;
            for b in &blocks {
                if b.estimable[i][c] {
                    acc += b.values[i][c];
                    n += 1;
                }
            }
            if n > 0 {
                values[i][c] = acc / F::from_u32(n).unwrap();
                estimable[i][c] = true;
            }
            coverage[i][c] = n;
        }
    }
    (
        CategoricalBlock { values, estimable },
        coverage,
    )
}

/// Mean the daily estimates elementwise; non-estimable entries average
/// over the days where they were estimable.
pub fn aggregate_days<F: Real>(
    sets: &[EstimatorSet<F>],
) -> Result<AggregateSet<F>, PostprocessError> {
    if sets.is_empty() {
        return Err(PostprocessError::NoSets);
    }
    check_meta(sets)?;
    let days: Vec<String> = sets.iter().map(|s| s.meta.day.clone()).collect();
    let first = &sets[0];
    let len = first.kernels.as_ref().map_or(0, Vec::len);

    let mut kernels = None;
    let mut kernel_estimable = None;
    let mut kernel_coverage = None;
    if first.kernels.is_some() {
        let mut values = vec![F::zero(); len];
        let mut mask = vec![false; len];
        let mut coverage = vec![0u32; len];
        for e in 0..len {
            let mut acc = F::zero();
            let mut n = 0u32;
            for s in sets {
                let est = s.kernel_estimable.as_ref().map_or(true, |m| m[e]);
                if est {
                    acc += s.kernels.as_ref().unwrap()[e];
                    n += 1;
                }
            }
            if n > 0 {
                values[e] = acc / F::from_u32(n).unwrap();
                mask[e] = true;
            }
            coverage[e] = n;
        }
        kernels = Some(values);
        kernel_estimable = Some(mask);
        kernel_coverage = Some(coverage);
    }

    let (liq, liq_coverage) = match first.liq.as_ref() {
        Some(_) => {
            let blocks: Vec<&CategoricalBlock<F>> =
                sets.iter().map(|s| s.liq.as_ref().unwrap()).collect();
            let (b, c) = mean_block(blocks);
            (Some(b), Some(c))
        }
        None => (None, None),
    };
    let (time, time_coverage) = match first.time.as_ref() {
        Some(_) => {
            let blocks: Vec<&CategoricalBlock<F>> =
                sets.iter().map(|s| s.time.as_ref().unwrap()).collect();
            let (b, c) = mean_block(blocks);
            (Some(b), Some(c))
        }
        None => (None, None),
    };
    let intercept = first.intercept.as_ref().map(|_| {
        let d = first.meta.dims;
        let mut out = vec![F::zero(); d];
        for s in sets {
            for (o, v) in out.iter_mut().zip(s.intercept.as_ref().unwrap()) {
                *o += *v;
            }
        }
        let n = F::from_usize(sets.len()).unwrap();
        out.iter_mut().for_each(|v| *v /= n);
        out
    });

    let mut meta = first.meta.clone();
    meta.day = format!("aggregate[{}]", days.len());
    Ok(AggregateSet {
        days,
        mean: EstimatorSet {
            meta,
            kernels,
            kernel_estimable,
            liq,
            time,
            intercept,
        },
        kernel_coverage,
        liq_coverage,
        time_coverage,
    })
}

/// A single exported panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlotRequest {
    /// Kernel of source j stimulating target i (1-based indices).
    Kernel { source: usize, target: usize },
    /// Liquidity baseline of one event type (1-based).
    Liquidity { target: usize },
    /// Time baseline of one event type (1-based).
    Time { target: usize },
}

/// Write the requested panels as CSV files into `out_dir`; returns the
/// paths written. Kernel panels carry (t, raw, smooth) rows at the bin
/// midpoints, categorical panels carry (category, value, estimable).
pub fn export_plots<F: Real>(
    set: &EstimatorSet<F>,
    requests: &[PlotRequest],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, PostprocessError> {
    let io_err = |path: &Path, source| PostprocessError::Io {
        path: path.display().to_string(),
        source,
    };
    let d = set.meta.dims;
    let check = |i: usize, j: usize| -> Result<(), PostprocessError> {
        if i == 0 || i > d || j == 0 || j > d {
            return Err(PostprocessError::UnknownPair { i, j, dims: d });
        }
        Ok(())
    };
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut written = Vec::new();
    for req in requests {
        match *req {
            PlotRequest::Kernel { source, target } => {
                check(target, source)?;
                let kernels = set
                    .kernels
                    .as_ref()
                    .ok_or(PostprocessError::MissingBlock("kernel"))?;
                let p = set.meta.lag_steps;
                let raw: Vec<F> = (0..p)
                    .map(|r| kernels[((target - 1) * d + (source - 1)) * p + r])
                    .collect();
                let spline = smooth_kernel(&raw, F::from_f64_lossy(set.meta.delta))?;
                let path = out_dir.join(format!("kernel_j{source}_i{target}.csv"));
                let mut f = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
                writeln!(f, "t,raw,smooth").map_err(|e| io_err(&path, e))?;
                for r in 0..p {
                    writeln!(
                        f,
                        "{},{},{}",
                        spline.knots[r], spline.raw[r], spline.fitted[r]
                    )
                    .map_err(|e| io_err(&path, e))?;
                }
                written.push(path);
            }
            PlotRequest::Liquidity { target } => {
                check(target, 1)?;
                let block = set
                    .liq
                    .as_ref()
                    .ok_or(PostprocessError::MissingBlock("liquidity"))?;
                let path = out_dir.join(format!("liq_i{target}.csv"));
                write_categorical(&path, block, target).map_err(|e| io_err(&path, e))?;
                written.push(path);
            }
            PlotRequest::Time { target } => {
                check(target, 1)?;
                let block = set
                    .time
                    .as_ref()
                    .ok_or(PostprocessError::MissingBlock("time"))?;
                let path = out_dir.join(format!("time_i{target}.csv"));
                write_categorical(&path, block, target).map_err(|e| io_err(&path, e))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

fn write_categorical<F: Real>(
    path: &Path,
    block: &CategoricalBlock<F>,
    target: usize,
) -> std::io::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "category,value,estimable")?;
    for (c, v) in block.values[target - 1].iter().enumerate() {
        writeln!(f, "{},{},{}", c + 1, v, block.estimable[target - 1][c])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_reproduces_the_constant() {
        let raw = vec![2.5f64; 12];
        let s = smooth_kernel(&raw, 0.25).unwrap();
        for r in 0..12 {
            assert!((s.fitted[r] - 2.5).abs() < 1e-9, "knot {r}");
        }
        assert!((s.evaluate(1.2) - 2.5).abs() < 1e-9);
        assert!((s.evaluate(0.0) - 2.5).abs() < 1e-9);
    }

    #[test]
    fn zero_penalty_interpolates() {
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 + 0.25).collect();
        let y: Vec<f64> = x.iter().map(|t| (t * 1.3).sin()).collect();
        let s = smoothing_spline(&x, &y, 0.0).unwrap();
        for i in 0..8 {
            assert!((s.fitted[i] - y[i]).abs() < 1e-9);
            assert!((s.evaluate(x[i]) - y[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn huge_penalty_gives_the_least_squares_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|t| 1.0 + 2.0 * t + (t * 7.0).sin()).collect();
        let s = smoothing_spline(&x, &y, 1e12).unwrap();
        // compare against the closed-form simple regression line
        let n = x.len() as f64;
        let xbar = x.iter().sum::<f64>() / n;
        let ybar = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - xbar) * (b - ybar)).sum();
        let sxx: f64 = x.iter().map(|a| (a - xbar) * (a - xbar)).sum();
        let slope = sxy / sxx;
        for i in 0..10 {
            let line = ybar + slope * (x[i] - xbar);
            assert!(
                (s.fitted[i] - line).abs() < 1e-6,
                "knot {i}: {} vs {line}",
                s.fitted[i]
            );
        }
    }

    #[test]
    fn too_few_knots_is_an_error() {
        assert!(matches!(
            smooth_kernel(&[1.0, 2.0, 3.0], 0.25),
            Err(PostprocessError::TooFewKnots { .. })
        ));
    }

    #[test]
    fn gcv_recovers_a_noisy_exponential() {
        // e^{-t} + noise at 80 knots; the GCV spline should track the
        // true curve well within twice the noise level at the knots.
        let p = 80;
        let delta = 0.25f64;
        let sigma = 0.05;
        let mut state = 99u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let raw: Vec<f64> = (0..p)
            .map(|r| {
                let t = (r as f64 + 0.5) * delta;
                (-t).exp() + sigma * next()
            })
            .collect();
        let s = smooth_kernel(&raw, delta).unwrap();
        let mae: f64 = (0..p)
            .map(|r| {
                let t = (r as f64 + 0.5) * delta;
                (s.fitted[r] - (-t).exp()).abs()
            })
            .sum::<f64>()
            / p as f64;
        assert!(mae < 2.0 * sigma, "mae {mae}");
    }
}
