//! Multivariate AIC model selection over the seven model variants.
//!
//! AIC = log(det Sigma_hat) + 2 d_e / (n0 - p) with Sigma_hat the
//! residual covariance over the aligned samples and d_e the count of
//! estimable, nonzero coefficients. Every variant is fitted on the same
//! samples p+1..n so the values are comparable.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::BinData;
use crate::estimator::{
    estimate_model_with, prepare_shared, ColumnLayout, EstimatorError, EstimatorSet,
    FitDiagnostics, TimeCoding,
};
use crate::linalg::{cholesky_in_place, log_det_from_cholesky, symmetrize};
use crate::Real;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("residual covariance is not positive definite (column {column}); fit is exactly collinear")]
    DegenerateResiduals { column: usize },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// The seven-model menu: baseline-only variants, pure Hawkes variants,
/// and the combined models, with and without the l1 penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    /// 1: liquidity state only.
    LiqOnly,
    /// 2: time factor only.
    TimeOnly,
    /// 3: liquidity state + time factor.
    LiqTime,
    /// 4: Hawkes kernels + constant baseline.
    Hawkes,
    /// 5: Hawkes + LASSO.
    HawkesLasso,
    /// 6: liquidity state + time factor + Hawkes.
    LiqTimeHawkes,
    /// 7: liquidity state + time factor + Hawkes + LASSO.
    Full,
}

impl ModelVariant {
    pub fn all() -> [ModelVariant; 7] {
        use ModelVariant::*;
        [LiqOnly, TimeOnly, LiqTime, Hawkes, HawkesLasso, LiqTimeHawkes, Full]
    }

    pub fn number(self) -> u8 {
        use ModelVariant::*;
        match self {
            LiqOnly => 1,
            TimeOnly => 2,
            LiqTime => 3,
            Hawkes => 4,
            HawkesLasso => 5,
            LiqTimeHawkes => 6,
            Full => 7,
        }
    }

    pub fn from_number(n: u8) -> Option<ModelVariant> {
        ModelVariant::all().into_iter().find(|v| v.number() == n)
    }

    pub fn name(self) -> &'static str {
        use ModelVariant::*;
        match self {
            LiqOnly => "liq",
            TimeOnly => "time",
            LiqTime => "liq+time",
            Hawkes => "hawkes",
            HawkesLasso => "hawkes+lasso",
            LiqTimeHawkes => "liq+time+hawkes",
            Full => "liq+time+hawkes+lasso",
        }
    }

    pub fn uses_lasso(self) -> bool {
        matches!(self, ModelVariant::HawkesLasso | ModelVariant::Full)
    }

    pub fn has_lags(self) -> bool {
        use ModelVariant::*;
        matches!(self, Hawkes | HawkesLasso | LiqTimeHawkes | Full)
    }

    /// Column blocks per variant. Single-block baselines use a complete
    /// indicator set; combined models code time against the reference
    /// category; the pure Hawkes variants carry a constant intercept as
    /// their baseline.
    pub fn layout(self, dims: usize, lag_steps: usize) -> ColumnLayout {
        use ModelVariant::*;
        let (lags, liq, time, intercept) = match self {
            LiqOnly => (false, true, None, false),
            TimeOnly => (false, false, Some(TimeCoding::Full), false),
            LiqTime => (false, true, Some(TimeCoding::WithReference), false),
            Hawkes | HawkesLasso => (true, false, None, true),
            LiqTimeHawkes | Full => (true, true, Some(TimeCoding::WithReference), false),
        };
        ColumnLayout {
            dims,
            lag_steps,
            lags,
            liq,
            time,
            intercept,
        }
    }
}

/// Fit summary of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit<F> {
    pub variant: ModelVariant,
    pub dims: usize,
    /// dims x dims residual covariance, row-major.
    pub sigma: Vec<F>,
    pub d_e: usize,
    pub aic: F,
    pub log_det: F,
    pub samples: usize,
}

/// Residual covariance Sigma_hat = sum_k u_k u_k^T / (n0 - p).
pub fn residual_covariance<F: Real>(diag: &FitDiagnostics<F>) -> Vec<F> {
    let d = diag.residuals.len();
    let n = diag.samples;
    let mut sigma = vec![F::zero(); d * d];
    for i in 0..d {
        let ri = &diag.residuals[i];
        for j in 0..=i {
            let rj = &diag.residuals[j];
            let mut acc = F::zero();
            for k in 0..n {
                acc += ri[k] * rj[k];
            }
            let v = acc / F::from_usize(n).unwrap();
            sigma[i * d + j] = v;
            sigma[j * d + i] = v;
        }
    }
    sigma
}

/// AIC from a residual covariance and an effective-parameter count.
pub fn compute_aic<F: Real>(
    sigma: &[F],
    dims: usize,
    d_e: usize,
    samples: usize,
) -> Result<(F, F), SelectionError> {
    let mut a = sigma.to_vec();
    symmetrize(&mut a, dims);
    cholesky_in_place(&mut a, dims)
        .map_err(|e| SelectionError::DegenerateResiduals { column: e.0 })?;
    let log_det = log_det_from_cholesky(&a, dims);
    let penalty = F::from_f64_lossy(2.0 * d_e as f64 / samples as f64);
    Ok((log_det + penalty, log_det))
}

/// Fit one variant and compute its AIC row.
pub fn fit_variant<F: Real>(
    shared: &crate::estimator::SharedDesign<F>,
    bins: &BinData,
    variant: ModelVariant,
    lambda: F,
    day: &str,
) -> Result<(ModelFit<F>, EstimatorSet<F>, FitDiagnostics<F>), SelectionError> {
    let (set, diag) = estimate_model_with(shared, bins, variant, lambda, day)?;
    let sigma = residual_covariance(&diag);
    let (aic, log_det) = compute_aic(&sigma, bins.dims, diag.effective_params, diag.samples)?;
    Ok((
        ModelFit {
            variant,
            dims: bins.dims,
            sigma,
            d_e: diag.effective_params,
            aic,
            log_det,
            samples: diag.samples,
        },
        set,
        diag,
    ))
}

/// The pairwise differences reported alongside the seven fits.
pub const DIFF_PAIRS: [(u8, u8); 5] = [(4, 3), (6, 4), (5, 4), (5, 3), (7, 6)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport<F> {
    pub day: String,
    pub fits: Vec<ModelFit<F>>,
    /// (label "a-b", AIC(a) - AIC(b)).
    pub diffs: Vec<(String, F)>,
}

impl<F: Real> SelectionReport<F> {
    pub fn aic_of(&self, number: u8) -> F {
        self.fits
            .iter()
            .find(|f| f.variant.number() == number)
            .map(|f| f.aic)
            .expect("variant present")
    }
}

/// Run the seven-variant comparison on one day of bins.
pub fn run_selection<F: Real>(
    bins: &BinData,
    lambda: F,
    day: &str,
) -> Result<SelectionReport<F>, SelectionError> {
    let shared = prepare_shared(bins, true);
    let mut fits = Vec::with_capacity(7);
    for variant in ModelVariant::all() {
        let (fit, _, _) = fit_variant(&shared, bins, variant, lambda, day)?;
        fits.push(fit);
    }
    let diffs = DIFF_PAIRS
        .iter()
        .map(|&(a, b)| {
            let fa = fits.iter().find(|f| f.variant.number() == a).unwrap().aic;
            let fb = fits.iter().find(|f| f.variant.number() == b).unwrap().aic;
            (format!("{a}-{b}"), fa - fb)
        })
        .collect();
    Ok(SelectionReport {
        day: day.to_string(),
        fits,
        diffs,
    })
}

/// Write the per-variant table: variant, aic, d_e, n_samples.
pub fn write_selection_csv<F: Real>(
    path: &Path,
    reports: &[SelectionReport<F>],
) -> std::io::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "day,variant,name,aic,d_e,n_samples")?;
    for rep in reports {
        for fit in &rep.fits {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                rep.day,
                fit.variant.number(),
                fit.variant.name(),
                fit.aic,
                fit.d_e,
                fit.samples
            )?;
        }
    }
    Ok(())
}

/// Write the pairwise difference table.
pub fn write_diff_csv<F: Real>(path: &Path, reports: &[SelectionReport<F>]) -> std::io::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "day,pair,diff")?;
    for rep in reports {
        for (pair, v) in &rep.diffs {
            writeln!(f, "{},{},{}", rep.day, pair, v)?;
        }
    }
    Ok(())
}

/// Five-number summary plus mean and the decreased-day count for one
/// difference column across days, mirroring the published table layout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffSummary {
    pub pair: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
    pub days_decreased: usize,
    pub days: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize_diffs<F: Real>(reports: &[SelectionReport<F>]) -> Vec<DiffSummary> {
    DIFF_PAIRS
        .iter()
        .map(|&(a, b)| {
            let label = format!("{a}-{b}");
            let mut vals: Vec<f64> = reports
                .iter()
                .map(|r| (r.aic_of(a) - r.aic_of(b)).to_f64_lossy())
                .collect();
            let days_decreased = vals.iter().filter(|v| **v < 0.0).count();
            let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            vals.sort_by(f64::total_cmp);
            DiffSummary {
                pair: label,
                min: *vals.first().unwrap_or(&f64::NAN),
                q1: quantile(&vals, 0.25),
                median: quantile(&vals, 0.5),
                mean,
                q3: quantile(&vals, 0.75),
                max: *vals.last().unwrap_or(&f64::NAN),
                days_decreased,
                days: vals.len(),
            }
        })
        .collect()
}

/// Render the summary as an aligned text table.
pub fn format_diff_table(summaries: &[DiffSummary]) -> String {
    let mut out = String::new();
    out.push_str("pair    min      q1       median   mean     q3       max      decreased\n");
    for s in summaries {
        out.push_str(&format!(
            "{:<7} {:<8.3} {:<8.3} {:<8.3} {:<8.3} {:<8.3} {:<8.3} {} out of {}\n",
            s.pair, s.min, s.q1, s.median, s.mean, s.q3, s.max, s.days_decreased, s.days
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_from(rows: Vec<Vec<f64>>) -> FitDiagnostics<f64> {
        let samples = rows[0].len();
        FitDiagnostics {
            residuals: rows,
            samples,
            zero_count: 0,
            dropped_categories: vec![],
            effective_params: 0,
            rss: vec![],
            sweeps: vec![],
        }
    }

    #[test]
    fn covariance_of_zero_residuals_is_zero() {
        let d = diag_from(vec![vec![0.0; 8], vec![0.0; 8]]);
        assert!(residual_covariance(&d).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn covariance_matches_hand_sum_in_one_dimension() {
        let d = diag_from(vec![vec![1.0, -1.0, 1.0, -1.0]]);
        let sigma = residual_covariance(&d);
        assert_eq!(sigma, vec![1.0]);
    }

    #[test]
    fn covariance_matches_brute_force() {
        let mut state = 11u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..50).map(|_| next()).collect()).collect();
        let d = diag_from(rows.clone());
        let sigma = residual_covariance(&d);
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..50 {
                    acc += rows[i][k] * rows[j][k];
                }
                acc /= 50.0;
                assert!((sigma[i * 3 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aic_identity_case() {
        // identity covariance (d=2), d_e = 10, 100 samples -> 0 + 0.2
        let sigma = vec![1.0, 0.0, 0.0, 1.0];
        let (aic, log_det) = compute_aic(&sigma, 2, 10, 100).unwrap();
        assert!((log_det - 0.0).abs() < 1e-15);
        assert!((aic - 0.2).abs() < 1e-15);
    }

    #[test]
    fn degenerate_covariance_is_rejected() {
        let sigma = vec![1.0, 1.0, 1.0, 1.0]; // rank 1
        assert!(matches!(
            compute_aic(&sigma, 2, 0, 10),
            Err(SelectionError::DegenerateResiduals { .. })
        ));
    }

    #[test]
    fn variant_numbers_round_trip() {
        for v in ModelVariant::all() {
            assert_eq!(ModelVariant::from_number(v.number()), Some(v));
        }
        assert_eq!(ModelVariant::from_number(0), None);
        assert_eq!(ModelVariant::from_number(8), None);
    }

    #[test]
    fn quantiles_interpolate() {
        let vals = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&vals, 0.0), 1.0);
        assert_eq!(quantile(&vals, 1.0), 4.0);
        assert_eq!(quantile(&vals, 0.5), 2.5);
    }
}
