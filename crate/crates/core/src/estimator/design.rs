//! Lagged/categorical design for the binned autoregression.
//!
//! The design matrix for dimension i stacks, per sample column, the p
//! most recent lagged bin-count vectors (most recent first), the 10
//! liquidity-category indicators of dimension i, the 126 time-category
//! indicators (category 1 coded as the all-zero reference row), and an
//! optional constant intercept. Nothing here materializes the full
//! matrix: the solver works off Gram-matrix blocks, and the expensive
//! lag-by-lag block is built from running cross-correlation sums in
//! O(d^2 p n) instead of O((dp)^2 n).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::{BinData, LIQUIDITY_CATEGORIES, TIME_CATEGORIES};
use crate::Real;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("only {samples} samples for {columns} design columns in dimension {dimension}")]
    InsufficientSamples {
        dimension: usize,
        samples: usize,
        columns: usize,
    },
    #[error("normal equations singular at column {column} of dimension {dimension} after drops")]
    SingularNormalEquations { dimension: usize, column: usize },
    #[error(
        "coordinate descent did not converge in {sweeps} sweeps (KKT residual {gap:e}) in dimension {dimension}"
    )]
    NonConvergence {
        dimension: usize,
        sweeps: usize,
        gap: f64,
    },
    #[error("dimension {0} out of range")]
    DimensionOutOfRange(usize),
}

/// How the 126 time categories enter the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeCoding {
    /// All 126 indicators (only valid when no other block spans the
    /// intercept).
    Full,
    /// Category 1 is the reference group: its row is identically zero
    /// and its coefficient is pinned to zero.
    WithReference,
}

/// Which column blocks compose the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLayout {
    pub dims: usize,
    pub lag_steps: usize,
    pub lags: bool,
    pub liq: bool,
    pub time: Option<TimeCoding>,
    pub intercept: bool,
}

impl ColumnLayout {
    pub fn lag_cols(&self) -> usize {
        if self.lags {
            self.dims * self.lag_steps
        } else {
            0
        }
    }

    pub fn liq_offset(&self) -> usize {
        self.lag_cols()
    }

    pub fn time_offset(&self) -> usize {
        self.liq_offset() + if self.liq { LIQUIDITY_CATEGORIES } else { 0 }
    }

    pub fn intercept_offset(&self) -> usize {
        self.time_offset() + if self.time.is_some() { TIME_CATEGORIES } else { 0 }
    }

    pub fn total_cols(&self) -> usize {
        self.intercept_offset() + usize::from(self.intercept)
    }

    /// Column of lag r (1-based) of source type j (0-based).
    pub fn lag_col(&self, r: usize, j: usize) -> usize {
        debug_assert!(self.lags && r >= 1 && r <= self.lag_steps && j < self.dims);
        (r - 1) * self.dims + j
    }

    pub fn is_lag_col(&self, col: usize) -> bool {
        self.lags && col < self.lag_cols()
    }
}

/// Bin counts as scalars, stored both row-major (type-major) and
/// column-major (bin-major).
pub struct CountsMatrix<F> {
    pub dims: usize,
    pub bins: usize,
    /// dims x bins, row-major.
    pub by_type: Vec<F>,
    /// bins x dims, row-major.
    pub by_bin: Vec<F>,
}

impl<F: Real> CountsMatrix<F> {
    pub fn from_bins(data: &BinData) -> Self {
        let dims = data.dims;
        let bins = data.config.bin_count();
        let mut by_type = vec![F::zero(); dims * bins];
        let mut by_bin = vec![F::zero(); dims * bins];
        for i in 0..dims {
            for c in 0..bins {
                let v = F::from_u64(data.counts[i][c]).expect("count fits scalar");
                by_type[i * bins + c] = v;
                by_bin[c * dims + i] = v;
            }
        }
        CountsMatrix {
            dims,
            bins,
            by_type,
            by_bin,
        }
    }

    #[inline]
    pub fn value(&self, dim: usize, bin: usize) -> F {
        self.by_type[dim * self.bins + bin]
    }

    fn row(&self, dim: usize) -> &[F] {
        &self.by_type[dim * self.bins..(dim + 1) * self.bins]
    }
}

/// Shared cross-products of the lag block: the (dp)x(dp) Gram matrix,
/// the lag-by-response products for every dimension, and the per-column
/// sums used by intercept and categorical cross blocks.
pub struct LagGram<F> {
    pub dims: usize,
    pub lag_steps: usize,
    pub samples: usize,
    /// (dp)^2 full symmetric, row-major; row/col index (r-1)*d + a.
    pub gram: Vec<F>,
    /// (dp) x dims: lag column dotted with response of each dimension.
    pub xy: Vec<F>,
    /// Sum of each lag column over the samples.
    pub col_sums: Vec<F>,
}

impl<F: Real> LagGram<F> {
    /// Build from counts with lag p over samples p+1..n.
    pub fn build(counts: &CountsMatrix<F>, lag_steps: usize) -> Self {
        let d = counts.dims;
        let n = counts.bins;
        let p = lag_steps;
        assert!(n > p && p >= 1);
        let dp = d * p;
        let samples = n - p;
        let mut gram = vec![F::zero(); dp * dp];
        let mut xy = vec![F::zero(); dp * d];
        let mut col_sums = vec![F::zero(); dp];

        // Per-source-row prefix sums give the lag-column sums directly.
        for a in 0..d {
            let row = counts.row(a);
            let mut prefix = F::zero();
            let mut prefixes = vec![F::zero(); n + 1];
            for (u, v) in row.iter().enumerate() {
                prefix += *v;
                prefixes[u + 1] = prefix;
            }
            for r in 1..=p {
                col_sums[(r - 1) * d + a] = prefixes[n - r] - prefixes[p - r];
            }
        }

        // Lag-by-lag and lag-by-response products. For sources (a, b) and
        // offset l = r - q >= 0, every Gram entry is a windowed sum of
        // C_a[u] * C_b[u + l]; one running-sum pass per (a, b, l) serves
        // all (r, q) pairs at that offset, and l = r doubles as the
        // response product.
        let row_stride = dp;
        let gram_cell = |mem: &mut [F], row: usize, col: usize, v: F| {
            mem[row * row_stride + col] = v;
        };
        // Parallel over the source type `a`: direct writes touch only
        // rows (r-1)*d + a, so the row stripes are disjoint per task.
        struct Stripe<F> {
            gram_rows: Vec<(usize, usize, F)>,
            xy_rows: Vec<(usize, usize, F)>,
        }
        let stripes: Vec<Stripe<F>> = (0..d)
            .into_par_iter()
            .map(|a| {
                let ca = counts.row(a);
                let mut out = Stripe {
                    gram_rows: Vec::with_capacity(d * p * (p + 1) / 2),
                    xy_rows: Vec::with_capacity(d * p),
                };
                let mut prefixes = vec![F::zero(); n + 1];
                for b in 0..d {
                    let cb = counts.row(b);
                    for l in 0..=p {
                        let lim = n - l;
                        let mut acc = F::zero();
                        prefixes[0] = F::zero();
                        for u in 0..lim {
                            acc += ca[u] * cb[u + l];
                            prefixes[u + 1] = acc;
                        }
                        if l < p {
                            for r in (1 + l)..=p {
                                let q = r - l;
                                let sum = prefixes[n - r] - prefixes[p - r];
                                out.gram_rows.push(((r - 1) * d + a, (q - 1) * d + b, sum));
                            }
                        }
                        if l >= 1 {
                            // response of dimension b against lag r = l of a
                            let sum = prefixes[n - l] - prefixes[p - l];
                            out.xy_rows.push(((l - 1) * d + a, b, sum));
                        }
                    }
                }
                out
            })
            .collect();
        for stripe in stripes {
            for (row, col, v) in stripe.gram_rows {
                gram_cell(&mut gram, row, col, v);
            }
            for (row, b, v) in stripe.xy_rows {
                xy[row * d + b] = v;
            }
        }
        // Mirror the block-lower triangle (r > q) into the upper.
        for r in 1..=p {
            for q in 1..r {
                for a in 0..d {
                    let row = (r - 1) * d + a;
                    for b in 0..d {
                        let col = (q - 1) * d + b;
                        gram[col * dp + row] = gram[row * dp + col];
                    }
                }
            }
        }
        LagGram {
            dims: d,
            lag_steps: p,
            samples,
            gram,
            xy,
            col_sums,
        }
    }
}

/// The design for one dimension, as normal-equation blocks plus enough
/// raw data to stream fitted values.
pub struct DesignProblem<'a, F> {
    pub dimension: usize,
    pub layout: ColumnLayout,
    pub samples: usize,
    /// Full symmetric m x m Gram `Z Z^T`.
    pub gram: Vec<F>,
    /// `Z y_i`.
    pub rhs: Vec<F>,
    /// `y_i . y_i`.
    pub yty: F,
    /// Estimable columns: nonzero norm and not the reference group.
    pub active: Vec<bool>,
    pub counts: &'a CountsMatrix<F>,
    pub bins: &'a BinData,
}

/// Assemble the dimension-i design problem from the shared lag Gram and
/// the dimension's categorical rows.
pub fn build_design<'a, F: Real>(
    bins: &'a BinData,
    counts: &'a CountsMatrix<F>,
    lag_gram: Option<&LagGram<F>>,
    layout: ColumnLayout,
    dimension: usize,
) -> Result<DesignProblem<'a, F>, EstimatorError> {
    let d = layout.dims;
    if dimension >= d {
        return Err(EstimatorError::DimensionOutOfRange(dimension));
    }
    let p = layout.lag_steps;
    let n = counts.bins;
    let samples = n - p;
    let m = layout.total_cols();
    if samples < m {
        return Err(EstimatorError::InsufficientSamples {
            dimension,
            samples,
            columns: m,
        });
    }
    let mut gram = vec![F::zero(); m * m];
    let mut rhs = vec![F::zero(); m];

    let lag_cols = layout.lag_cols();
    if layout.lags {
        let lg = lag_gram.expect("lag gram required for lag layouts");
        debug_assert_eq!(lg.lag_steps, p);
        for row in 0..lag_cols {
            let src = &lg.gram[row * lag_cols..(row + 1) * lag_cols];
            gram[row * m..row * m + lag_cols].copy_from_slice(src);
            rhs[row] = lg.xy[row * d + dimension];
        }
        if layout.intercept {
            let ic = layout.intercept_offset();
            for col in 0..lag_cols {
                gram[col * m + ic] = lg.col_sums[col];
                gram[ic * m + col] = lg.col_sums[col];
            }
        }
    }

    let liq_off = layout.liq_offset();
    let time_off = layout.time_offset();
    let ic = layout.intercept_offset();
    let liq_row = bins.liq_cat.get(dimension);
    let mut yty = F::zero();

    // One pass over the samples accumulates every categorical block, the
    // categorical-response products, and (when lags are present) the
    // lag-by-category cross blocks.
    let mut liq_counts = [0u64; LIQUIDITY_CATEGORIES];
    let mut time_counts = [0u64; TIME_CATEGORIES];
    let mut cross_cat = vec![0u64; LIQUIDITY_CATEGORIES * TIME_CATEGORIES];
    for j in 0..samples {
        let bin = p + j; // response bin, 0-based
        let y = counts.value(dimension, bin);
        yty += y * y;
        let lc = liq_row.map(|r| (r[bin] - 1) as usize);
        let tc = (bins.time_cat[bin] - 1) as usize;
        if layout.liq {
            let lc = lc.expect("liq categories exist for book streams");
            liq_counts[lc] += 1;
            rhs[liq_off + lc] += y;
        }
        if let Some(coding) = layout.time {
            let keep = !(coding == TimeCoding::WithReference && tc == 0);
            if keep {
                time_counts[tc] += 1;
                rhs[time_off + tc] += y;
                if layout.liq {
                    let lc = lc.expect("liq categories exist");
                    cross_cat[lc * TIME_CATEGORIES + tc] += 1;
                }
            }
        }
        if layout.intercept {
            rhs[ic] += y;
        }
        if layout.lags && (layout.liq || layout.time.is_some()) {
            // lag-value cross terms against this sample's indicators
            let keep_time = match layout.time {
                Some(TimeCoding::WithReference) => tc != 0,
                Some(TimeCoding::Full) => true,
                None => false,
            };
            for r in 1..=p {
                let vals = &counts.by_bin[(bin - r) * d..(bin - r + 1) * d];
                let base = (r - 1) * d;
                for (a, &v) in vals.iter().enumerate() {
                    let col = base + a;
                    if layout.liq {
                        gram[col * m + liq_off + lc.unwrap()] += v;
                    }
                    if keep_time {
                        gram[col * m + time_off + tc] += v;
                    }
                }
            }
        }
    }

    if layout.liq {
        for c in 0..LIQUIDITY_CATEGORIES {
            let cnt = F::from_u64(liq_counts[c]).unwrap();
            gram[(liq_off + c) * m + liq_off + c] = cnt;
            if layout.intercept {
                gram[(liq_off + c) * m + ic] = cnt;
                gram[ic * m + liq_off + c] = cnt;
            }
        }
    }
    if layout.time.is_some() {
        for c in 0..TIME_CATEGORIES {
            let cnt = F::from_u64(time_counts[c]).unwrap();
            gram[(time_off + c) * m + time_off + c] = cnt;
            if layout.intercept {
                gram[(time_off + c) * m + ic] = cnt;
                gram[ic * m + time_off + c] = cnt;
            }
        }
        if layout.liq {
            for lc in 0..LIQUIDITY_CATEGORIES {
                for tc in 0..TIME_CATEGORIES {
                    let v = F::from_u64(cross_cat[lc * TIME_CATEGORIES + tc]).unwrap();
                    gram[(liq_off + lc) * m + time_off + tc] = v;
                    gram[(time_off + tc) * m + liq_off + lc] = v;
                }
            }
        }
    }
    if layout.intercept {
        gram[ic * m + ic] = F::from_usize(samples).unwrap();
    }
    // Mirror the lag-by-category blocks into the lower-left.
    if layout.lags {
        for col in lag_cols..m {
            for row in 0..lag_cols {
                gram[col * m + row] = gram[row * m + col];
            }
        }
    }

    // Estimable columns: nonzero diagonal, excluding the reference group.
    let mut active: Vec<bool> = (0..m).map(|c| gram[c * m + c] > F::zero()).collect();
    if layout.time == Some(TimeCoding::WithReference) {
        active[time_off] = false;
    }

    Ok(DesignProblem {
        dimension,
        layout,
        samples,
        gram,
        rhs,
        yty,
        active,
        counts,
        bins,
    })
}

impl<F: Real> DesignProblem<'_, F> {
    /// The lag-block value of column `col` at sample `j` (0-based), plus
    /// indicator columns; materializes one design entry. Test and
    /// streaming helper: the solver itself never builds the full matrix.
    pub fn design_value(&self, col: usize, j: usize) -> F {
        let p = self.layout.lag_steps;
        let bin = p + j;
        if self.layout.is_lag_col(col) {
            let r = col / self.layout.dims + 1;
            let a = col % self.layout.dims;
            return self.counts.value(a, bin - r);
        }
        let liq_off = self.layout.liq_offset();
        let time_off = self.layout.time_offset();
        if self.layout.liq && col >= liq_off && col < liq_off + LIQUIDITY_CATEGORIES {
            let lc = (self.bins.liq_cat[self.dimension][bin] - 1) as usize;
            return if col - liq_off == lc { F::one() } else { F::zero() };
        }
        if let Some(coding) = self.layout.time {
            if col >= time_off && col < time_off + TIME_CATEGORIES {
                let tc = (self.bins.time_cat[bin] - 1) as usize;
                if coding == TimeCoding::WithReference && tc == 0 {
                    return F::zero();
                }
                return if col - time_off == tc { F::one() } else { F::zero() };
            }
        }
        if self.layout.intercept && col == self.layout.intercept_offset() {
            return F::one();
        }
        F::zero()
    }

    /// Response value at sample `j`.
    pub fn response(&self, j: usize) -> F {
        self.counts.value(self.dimension, self.layout.lag_steps + j)
    }

    /// Fitted value at sample `j` for a coefficient vector.
    pub fn fitted(&self, coeffs: &[F], j: usize) -> F {
        let p = self.layout.lag_steps;
        let d = self.layout.dims;
        let bin = p + j;
        let mut acc = F::zero();
        if self.layout.lags {
            for r in 1..=p {
                let vals = &self.counts.by_bin[(bin - r) * d..(bin - r + 1) * d];
                let cs = &coeffs[(r - 1) * d..r * d];
                for (v, c) in vals.iter().zip(cs) {
                    acc += *v * *c;
                }
            }
        }
        if self.layout.liq {
            let lc = (self.bins.liq_cat[self.dimension][bin] - 1) as usize;
            acc += coeffs[self.layout.liq_offset() + lc];
        }
        if let Some(coding) = self.layout.time {
            let tc = (self.bins.time_cat[bin] - 1) as usize;
            if !(coding == TimeCoding::WithReference && tc == 0) {
                acc += coeffs[self.layout.time_offset() + tc];
            }
        }
        if self.layout.intercept {
            acc += coeffs[self.layout.intercept_offset()];
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binning::BinConfig;

    pub(crate) fn raw_bin_data(counts: Vec<Vec<u64>>, config: BinConfig) -> BinData {
        let dims = counts.len();
        let n = config.bin_count();
        assert!(counts.iter().all(|r| r.len() == n));
        BinData {
            dims,
            k_levels: None,
            config,
            counts,
            liq_state: vec![vec![0; n]; dims],
            liq_cat: vec![vec![1; n]; dims],
            time_cat: vec![1; n],
        }
    }

    fn tiny() -> BinData {
        raw_bin_data(
            vec![vec![1, 2, 3, 4, 5], vec![0, 1, 0, 1, 0]],
            BinConfig {
                delta: 1.0,
                support: 2.0,
                horizon: 5.0,
                use_sizes: true,
            },
        )
    }

    #[test]
    fn lag_columns_stack_most_recent_first() {
        let data = tiny();
        let counts = CountsMatrix::<f64>::from_bins(&data);
        let lg = LagGram::build(&counts, 2);
        let layout = ColumnLayout {
            dims: 2,
            lag_steps: 2,
            lags: true,
            liq: false,
            time: None,
            intercept: false,
        };
        let problem = build_design(&data, &counts, Some(&lg), layout, 0).unwrap();
        // hand-stacked columns per the lag ordering
        let expected = [
            [2.0, 1.0, 1.0, 0.0],
            [3.0, 0.0, 2.0, 1.0],
            [4.0, 1.0, 3.0, 0.0],
        ];
        for (j, col) in expected.iter().enumerate() {
            for (c, want) in col.iter().enumerate() {
                assert_eq!(problem.design_value(c, j), *want, "col {c} sample {j}");
            }
        }
        // responses are the last n-p bins
        assert_eq!(problem.response(0), 3.0);
        assert_eq!(problem.response(2), 5.0);
    }

    #[test]
    fn gram_matches_brute_force_on_small_case() {
        let data = tiny();
        let counts = CountsMatrix::<f64>::from_bins(&data);
        let lg = LagGram::build(&counts, 2);
        let layout = ColumnLayout {
            dims: 2,
            lag_steps: 2,
            lags: true,
            liq: false,
            time: None,
            intercept: true,
        };
        let problem = build_design(&data, &counts, Some(&lg), layout, 0).unwrap();
        let m = layout.total_cols();
        for row in 0..m {
            for col in 0..m {
                let mut want = 0.0;
                for j in 0..problem.samples {
                    want += problem.design_value(row, j) * problem.design_value(col, j);
                }
                assert!(
                    (problem.gram[row * m + col] - want).abs() < 1e-12,
                    "gram[{row}][{col}] = {} want {want}",
                    problem.gram[row * m + col]
                );
            }
            let mut want_rhs = 0.0;
            for j in 0..problem.samples {
                want_rhs += problem.design_value(row, j) * problem.response(j);
            }
            assert!((problem.rhs[row] - want_rhs).abs() < 1e-12, "rhs[{row}]");
        }
    }

    #[test]
    fn unobserved_categories_are_flagged_inactive() {
        let mut data = tiny();
        // all samples in liquidity category 1 and time category 1
        data.liq_cat = vec![vec![1; 5]; 2];
        data.time_cat = vec![1; 5];
        let counts = CountsMatrix::<f64>::from_bins(&data);
        let layout = ColumnLayout {
            dims: 2,
            lag_steps: 2,
            lags: false,
            liq: true,
            time: Some(TimeCoding::WithReference),
            intercept: false,
        };
        let problem = build_design(&data, &counts, None, layout, 0).unwrap();
        let liq_off = layout.liq_offset();
        assert!(problem.active[liq_off]);
        for c in 1..LIQUIDITY_CATEGORIES {
            assert!(!problem.active[liq_off + c], "liq {c} should be inactive");
        }
        // the reference time category is always pinned off
        assert!(problem.active.iter().skip(layout.time_offset()).all(|a| !a));
    }
}
