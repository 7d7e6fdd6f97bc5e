//! Binned least-squares estimation of the excitement kernels and the
//! liquidity/time baseline, per model variant, with optional l1
//! regularization of the kernel coefficients.

pub mod design;
pub mod solve;

mod bundle;

pub use bundle::{read_estimator_bundle, write_estimator_bundle};
pub use design::{
    build_design, ColumnLayout, CountsMatrix, DesignProblem, EstimatorError, LagGram, TimeCoding,
};
pub use solve::{gradient, kkt_gap, residuals, solve_lasso, solve_ols, DimSolution};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::{BinData, LIQUIDITY_CATEGORIES, TIME_CATEGORIES};
use crate::linalg::cholesky_in_place;
use crate::selection::ModelVariant;
use crate::Real;

/// Default sweep cap for the coordinate descent.
pub const MAX_CD_SWEEPS: usize = 10_000;

/// Fit metadata carried by every estimator bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMeta {
    pub delta: f64,
    pub support: f64,
    pub k_levels: Option<u32>,
    pub dims: usize,
    pub lag_steps: usize,
    pub lambda: f64,
    pub variant: ModelVariant,
    pub use_sizes: bool,
    pub day: String,
    /// True once coefficients carry the 1/delta intensity scaling.
    pub scale_applied: bool,
}

/// One categorical coefficient table with its estimability mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalBlock<F> {
    /// dims x categories.
    pub values: Vec<Vec<F>>,
    pub estimable: Vec<Vec<bool>>,
}

/// The fitted model: step-function kernels, liquidity and time baseline
/// tables, and the optional constant intercept, all scaled by 1/delta to
/// intensity units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSet<F> {
    pub meta: EstimatorMeta,
    /// dims x dims x lag_steps, flattened target-major:
    /// `kernels[(i * dims + j) * p + r]` is source j stimulating target i
    /// on step r+1.
    pub kernels: Option<Vec<F>>,
    pub kernel_estimable: Option<Vec<bool>>,
    pub liq: Option<CategoricalBlock<F>>,
    pub time: Option<CategoricalBlock<F>>,
    pub intercept: Option<Vec<F>>,
}

impl<F: Real> EstimatorSet<F> {
    /// Kernel value for source `j` stimulating target `i` at step `r`
    /// (1-based), zero when the variant has no kernels.
    pub fn kernel(&self, i: usize, j: usize, r: usize) -> F {
        match &self.kernels {
            Some(k) => k[(i * self.meta.dims + j) * self.meta.lag_steps + (r - 1)],
            None => F::zero(),
        }
    }

    /// Integrated mass of one kernel: sum_r phi[r] * delta.
    pub fn kernel_mass(&self, i: usize, j: usize) -> F {
        let delta = F::from_f64_lossy(self.meta.delta);
        (1..=self.meta.lag_steps)
            .map(|r| self.kernel(i, j, r))
            .sum::<F>()
            * delta
    }
}

/// Which design block a dropped column belonged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DroppedBlock {
    Kernel { source: usize, lag: usize },
    Liquidity { category: usize },
    Time { category: usize },
    Intercept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub dimension: usize,
    pub block: DroppedBlock,
}

/// Residuals and bookkeeping of one full fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics<F> {
    /// dims x (n - p) regression residuals.
    pub residuals: Vec<Vec<F>>,
    pub samples: usize,
    /// Exact zeros among estimable kernel coefficients, all dimensions.
    pub zero_count: usize,
    pub dropped_categories: Vec<DroppedColumn>,
    /// Estimable, nonzero coefficients over all dimensions (the AIC
    /// degree-of-freedom count).
    pub effective_params: usize,
    pub rss: Vec<F>,
    pub sweeps: Vec<usize>,
}

/// Counts and the lag Gram shared by every variant fitted on one day.
pub struct SharedDesign<F> {
    pub counts: CountsMatrix<F>,
    pub lag_gram: Option<LagGram<F>>,
}

pub fn prepare_shared<F: Real>(bins: &BinData, need_lags: bool) -> SharedDesign<F> {
    let counts = CountsMatrix::from_bins(bins);
    let lag_gram = need_lags.then(|| LagGram::build(&counts, bins.config.lag_steps()));
    SharedDesign { counts, lag_gram }
}

fn dropped_block(layout: &ColumnLayout, col: usize) -> DroppedBlock {
    if layout.is_lag_col(col) {
        DroppedBlock::Kernel {
            source: col % layout.dims,
            lag: col / layout.dims + 1,
        }
    } else if layout.liq && col < layout.liq_offset() + LIQUIDITY_CATEGORIES {
        DroppedBlock::Liquidity {
            category: col - layout.liq_offset() + 1,
        }
    } else if layout.time.is_some() && col < layout.time_offset() + TIME_CATEGORIES {
        DroppedBlock::Time {
            category: col - layout.time_offset() + 1,
        }
    } else {
        DroppedBlock::Intercept
    }
}

/// Estimate one model variant on one day of bins.
pub fn estimate_model<F: Real>(
    bins: &BinData,
    variant: ModelVariant,
    lambda: F,
    day: &str,
) -> Result<(EstimatorSet<F>, FitDiagnostics<F>), EstimatorError> {
    let shared = prepare_shared(bins, variant.layout(1, 1).lags);
    estimate_model_with(&shared, bins, variant, lambda, day)
}

/// Estimate one variant reusing precomputed shared blocks.
pub fn estimate_model_with<F: Real>(
    shared: &SharedDesign<F>,
    bins: &BinData,
    variant: ModelVariant,
    lambda: F,
    day: &str,
) -> Result<(EstimatorSet<F>, FitDiagnostics<F>), EstimatorError> {
    let dims = bins.dims;
    let p = bins.config.lag_steps();
    let layout = variant.layout(dims, p);
    let lag_gram = if layout.lags {
        Some(
            shared
                .lag_gram
                .as_ref()
                .expect("shared design built without lags"),
        )
    } else {
        None
    };
    let lambda = if variant.uses_lasso() { lambda } else { F::zero() };

    // Variants without per-dimension categorical blocks share one design;
    // factor its normal equations once and reuse across dimensions.
    let shared_factor = if !layout.liq && layout.time.is_none() && !variant.uses_lasso() {
        let problem = build_design(bins, &shared.counts, lag_gram, layout, 0)?;
        let m = layout.total_cols();
        let keep: Vec<usize> = (0..m).filter(|&c| problem.active[c]).collect();
        let ma = keep.len();
        let mut compact = vec![F::zero(); ma * ma];
        for (ri, &r) in keep.iter().enumerate() {
            for (ci, &c) in keep.iter().enumerate() {
                compact[ri * ma + ci] = problem.gram[r * m + c];
            }
        }
        cholesky_in_place(&mut compact, ma).map_err(|e| {
            EstimatorError::SingularNormalEquations {
                dimension: 0,
                column: keep[e.0],
            }
        })?;
        Some((keep, compact))
    } else {
        None
    };

    let per_dim: Vec<Result<(DimSolution<F>, Vec<F>), EstimatorError>> = (0..dims)
        .into_par_iter()
        .map(|dim| {
            let problem = build_design(bins, &shared.counts, lag_gram, layout, dim)?;
            let sol = match (&shared_factor, variant.uses_lasso()) {
                (Some((keep, factor)), _) => {
                    let mut x: Vec<F> = keep.iter().map(|&c| problem.rhs[c]).collect();
                    crate::linalg::cholesky_solve(factor, keep.len(), &mut x);
                    let mut coeffs = vec![F::zero(); layout.total_cols()];
                    for (ri, &c) in keep.iter().enumerate() {
                        coeffs[c] = x[ri];
                    }
                    solve::refinish(&problem, coeffs)
                }
                (None, true) => solve_lasso(&problem, lambda, MAX_CD_SWEEPS)?,
                (None, false) => solve_ols(&problem)?,
            };
            let res = residuals(&problem, &sol.coeffs);
            Ok((sol, res))
        })
        .collect();

    let mut solutions = Vec::with_capacity(dims);
    let mut residual_rows = Vec::with_capacity(dims);
    for r in per_dim {
        let (sol, res) = r?;
        solutions.push(sol);
        residual_rows.push(res);
    }

    let samples = shared.counts.bins - p;
    let scale = F::one() / F::from_f64_lossy(bins.config.delta);

    let kernels = layout.lags.then(|| {
        let mut k = vec![F::zero(); dims * dims * p];
        for (i, sol) in solutions.iter().enumerate() {
            for r in 1..=p {
                for j in 0..dims {
                    k[(i * dims + j) * p + (r - 1)] = sol.coeffs[layout.lag_col(r, j)] * scale;
                }
            }
        }
        k
    });
    let kernel_estimable = layout.lags.then(|| {
        let mut mask = vec![true; dims * dims * p];
        for (i, sol) in solutions.iter().enumerate() {
            for &c in &sol.dropped {
                if layout.is_lag_col(c) {
                    let r = c / dims + 1;
                    let j = c % dims;
                    mask[(i * dims + j) * p + (r - 1)] = false;
                }
            }
        }
        mask
    });
    let liq = layout.liq.then(|| {
        let off = layout.liq_offset();
        CategoricalBlock {
            values: solutions
                .iter()
                .map(|s| (0..LIQUIDITY_CATEGORIES).map(|c| s.coeffs[off + c] * scale).collect())
                .collect(),
            estimable: solutions
                .iter()
                .map(|s| {
                    let mut row = vec![true; LIQUIDITY_CATEGORIES];
                    for &c in &s.dropped {
                        if !layout.is_lag_col(c) && c >= off && c < off + LIQUIDITY_CATEGORIES {
                            row[c - off] = false;
                        }
                    }
                    row
                })
                .collect(),
        }
    });
    let time = layout.time.map(|_| {
        let off = layout.time_offset();
        CategoricalBlock {
            values: solutions
                .iter()
                .map(|s| (0..TIME_CATEGORIES).map(|c| s.coeffs[off + c] * scale).collect())
                .collect(),
            estimable: solutions
                .iter()
                .map(|s| {
                    let mut row = vec![true; TIME_CATEGORIES];
                    for &c in &s.dropped {
                        if c >= off && c < off + TIME_CATEGORIES {
                            row[c - off] = false;
                        }
                    }
                    row
                })
                .collect(),
        }
    });
    let intercept = layout.intercept.then(|| {
        solutions
            .iter()
            .map(|s| s.coeffs[layout.intercept_offset()] * scale)
            .collect::<Vec<F>>()
    });

    let mut dropped_categories = Vec::new();
    for (dim, sol) in solutions.iter().enumerate() {
        for &c in &sol.dropped {
            dropped_categories.push(DroppedColumn {
                dimension: dim,
                block: dropped_block(&layout, c),
            });
        }
    }

    let diagnostics = FitDiagnostics {
        residuals: residual_rows,
        samples,
        zero_count: solutions.iter().map(|s| s.kernel_zeros).sum(),
        dropped_categories,
        effective_params: solutions.iter().map(|s| s.effective).sum(),
        rss: solutions.iter().map(|s| s.rss).collect(),
        sweeps: solutions.iter().map(|s| s.sweeps).collect(),
    };
    let set = EstimatorSet {
        meta: EstimatorMeta {
            delta: bins.config.delta,
            support: bins.config.support,
            k_levels: bins.k_levels,
            dims,
            lag_steps: p,
            lambda: lambda.to_f64_lossy(),
            variant,
            use_sizes: bins.config.use_sizes,
            day: day.to_string(),
            scale_applied: true,
        },
        kernels,
        kernel_estimable,
        liq,
        time,
        intercept,
    };
    Ok((set, diagnostics))
}
