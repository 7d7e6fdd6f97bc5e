//! Ground-truth simulator: multivariate self-exciting arrivals with
//! piecewise-constant kernels and a liquidity/time-dependent baseline,
//! sampled by thinning against a dominating rate.
//!
//! In full mode the simulator maintains a real book through
//! [`crate::book`]; every candidate event is realized as a concrete book
//! delta, applied, and classified through the same path the ingest uses,
//! so a simulated stream round-trips the production classifier exactly.
//! Candidates whose realization is impossible in the current book state
//! (for example a price move from a state the reference-price rule pins
//! in place) are rejected during thinning.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::{bucketize_liquidity, bucketize_time, LIQUIDITY_CATEGORIES, TIME_CATEGORIES};
use crate::book::{apply_delta, BookDelta, BookError, BookState, DeltaKind, Side, TickGrid};
use crate::events::{
    classify, ClassifiedEvent, ClassifiedRecord, EventAction, EventType, LiquiditySnapshot,
    RawMessage,
};
use crate::Real;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid ground truth: {0}")]
    InvalidTruth(String),
    #[error("dominating rate {rate:.3}/s exceeded the cap {cap:.3}/s at t={time:.3}s; ground truth is non-stationary or the cap is too low")]
    ExplosionGuard { rate: f64, cap: f64, time: f64 },
    #[error(transparent)]
    Book(#[from] BookError),
}

/// Order size law per event type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeDistribution {
    Constant(u64),
    /// Uniform on lo..=hi.
    Uniform { lo: u64, hi: u64 },
}

impl SizeDistribution {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        match *self {
            SizeDistribution::Constant(v) => v,
            SizeDistribution::Uniform { lo, hi } => rng.gen_range(lo..=hi),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            SizeDistribution::Constant(v) => v as f64,
            SizeDistribution::Uniform { lo, hi } => (lo + hi) as f64 / 2.0,
        }
    }
}

/// Baseline intensity: constant per type, or stepped on the liquidity
/// and time categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Baseline<F> {
    /// Pure self-exciting mode: one rate per type.
    Constant(Vec<F>),
    /// State-dependent mode: dims x 10 liquidity increments plus
    /// dims x 126 time increments.
    StateDependent { liq: Vec<Vec<F>>, time: Vec<Vec<F>> },
}

/// The generative model: non-negative step kernels on [0, support],
/// baseline, size laws, and the initial book for full mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth<F> {
    /// `Some(K)`: full book mode with dims = 6K+6. `None`: bare stream.
    pub k_levels: Option<u32>,
    pub dims: usize,
    pub tick_e4: i64,
    /// Kernel support in seconds.
    pub kernel_support: f64,
    /// Steps the kernels take on [0, support].
    pub kernel_steps: usize,
    /// dims x dims x steps, target-major: `kernels[(i*d + j)*p + r]` is
    /// source j stimulating target i on step r+1.
    pub kernels: Vec<F>,
    pub baseline: Baseline<F>,
    pub sizes: Vec<SizeDistribution>,
    /// Initial resting orders (side, price in ticks, size); empty picks a
    /// default K-level book around tick 10000.
    pub initial_book: Vec<(Side, i64, u64)>,
}

impl<F: Real> GroundTruth<F> {
    pub fn kernel(&self, target: usize, source: usize, step: usize) -> F {
        self.kernels[(target * self.dims + source) * self.kernel_steps + step]
    }

    /// Expected contribution of one event of a type to its counting
    /// process: mean size for additive types, 1 for price changes.
    fn mean_weight(&self, type_index0: usize) -> f64 {
        match self.k_levels {
            Some(k) => {
                let ty = EventType::from_index(type_index0 + 1, k).unwrap();
                if ty.is_price_change() {
                    1.0
                } else {
                    self.sizes[type_index0].mean()
                }
            }
            None => self.sizes[type_index0].mean(),
        }
    }

    /// Branching-matrix spectral radius with the size expectation folded
    /// in: entry (i, j) is E[weight_j] * sum_r kernel_{j->i}(r) * step.
    pub fn branching_spectral_radius(&self) -> f64 {
        let d = self.dims;
        let step = self.kernel_support / self.kernel_steps as f64;
        let mut m = vec![0.0f64; d * d];
        for i in 0..d {
            for j in 0..d {
                let mass: f64 = (0..self.kernel_steps)
                    .map(|r| self.kernel(i, j, r).to_f64_lossy())
                    .sum::<f64>()
                    * step;
                m[i * d + j] = self.mean_weight(j) * mass;
            }
        }
        // power iteration on the non-negative matrix
        let mut v = vec![1.0f64; d];
        let mut radius = 0.0;
        for _ in 0..200 {
            let mut next = vec![0.0f64; d];
            for i in 0..d {
                for j in 0..d {
                    next[i] += m[i * d + j] * v[j];
                }
            }
            radius = next.iter().cloned().fold(0.0f64, f64::max);
            if radius == 0.0 {
                return 0.0;
            }
            for x in &mut next {
                *x /= radius;
            }
            v = next;
        }
        radius
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let d = self.dims;
        if let Some(k) = self.k_levels {
            if k == 0 {
                return Err(SimError::InvalidTruth("k_levels must be at least 1".into()));
            }
            if d != EventType::dimension(k) {
                return Err(SimError::InvalidTruth(format!(
                    "dims {} does not match 6K+6 = {} for K = {k}",
                    d,
                    EventType::dimension(k)
                )));
            }
        }
        if self.kernel_steps == 0 || self.kernel_support <= 0.0 {
            return Err(SimError::InvalidTruth(
                "kernel support and steps must be positive".into(),
            ));
        }
        if self.kernels.len() != d * d * self.kernel_steps {
            return Err(SimError::InvalidTruth("kernel array size mismatch".into()));
        }
        if self.kernels.iter().any(|v| *v < F::zero() || !v.is_finite()) {
            return Err(SimError::InvalidTruth(
                "kernels must be non-negative and finite".into(),
            ));
        }
        if self.sizes.len() != d {
            return Err(SimError::InvalidTruth("need one size law per type".into()));
        }
        match &self.baseline {
            Baseline::Constant(nu) => {
                if nu.len() != d {
                    return Err(SimError::InvalidTruth("baseline length mismatch".into()));
                }
                if nu.iter().any(|v| *v < F::zero()) {
                    return Err(SimError::InvalidTruth("negative baseline".into()));
                }
            }
            Baseline::StateDependent { liq, time } => {
                if liq.len() != d || time.len() != d {
                    return Err(SimError::InvalidTruth("baseline table size mismatch".into()));
                }
                for i in 0..d {
                    if liq[i].len() != LIQUIDITY_CATEGORIES || time[i].len() != TIME_CATEGORIES {
                        return Err(SimError::InvalidTruth(
                            "baseline category count mismatch".into(),
                        ));
                    }
                    for lc in &liq[i] {
                        for tc in &time[i] {
                            if *lc + *tc < F::zero() {
                                return Err(SimError::InvalidTruth(format!(
                                    "baseline of type {} can go negative",
                                    i + 1
                                )));
                            }
                        }
                    }
                }
                if self.k_levels.is_none() {
                    return Err(SimError::InvalidTruth(
                        "state-dependent baseline requires a book (k_levels)".into(),
                    ));
                }
            }
        }
        let radius = self.branching_spectral_radius();
        if radius >= 1.0 {
            return Err(SimError::InvalidTruth(format!(
                "branching spectral radius {radius:.3} >= 1 (with size expectation folded in)"
            )));
        }
        Ok(())
    }

    fn default_book(&self) -> Vec<(Side, i64, u64)> {
        let k = self.k_levels.map_or(1, |k| k as i64);
        let mut levels = Vec::new();
        for l in 0..k {
            levels.push((Side::Bid, 10_000 - l, 500));
            levels.push((Side::Ask, 10_001 + l, 500));
        }
        levels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Horizon in seconds; events are generated on (0, horizon).
    pub horizon: f64,
    pub seed: u64,
    /// Explosion guard: error out if the dominating rate passes this.
    pub max_total_rate: f64,
    /// Record the exact pre-event intensity vector for the first N
    /// accepted events (consistency checks).
    pub record_intensity: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: 23_400.0,
            seed: 1,
            max_total_rate: 1e5,
            record_intensity: 0,
        }
    }
}

/// One generated event in stream form: time, 1-based type index, size.
pub type PureEvent = (f64, usize, u64);

/// Book-backed outputs of a full-mode run.
#[derive(Debug, Clone)]
pub struct FullOutput {
    pub records: Vec<ClassifiedRecord>,
    /// The delta realizing each event plus the remaining queue size at
    /// its price (partial/full cancel distinction for export).
    pub deltas: Vec<(BookDelta, u64)>,
    /// Visible top-K levels after each event: (bids, asks).
    pub snapshots: Vec<(Vec<(i64, u64)>, Vec<(i64, u64)>)>,
    pub initial_book: BookState,
    pub initial_state: LiquiditySnapshot,
}

#[derive(Debug, Clone)]
pub struct SimOutput<F> {
    /// The classified stream in light form, always present.
    pub events: Vec<PureEvent>,
    /// Book-backed extras in full mode.
    pub full: Option<FullOutput>,
    /// (time, exact intensity vector right before the event).
    pub intensity_trace: Vec<(f64, Vec<F>)>,
    /// Candidates rejected because the book could not realize them.
    pub infeasible_rejections: u64,
}

struct HistoryEvent {
    time: f64,
    type0: usize,
    weight: f64,
}

/// Exact conditional intensity of every type at time `t` given the
/// event history (times strictly before `t`) and, in full mode, the
/// current liquidity snapshot.
pub fn intensity_at<F: Real>(
    truth: &GroundTruth<F>,
    history: impl Iterator<Item = (f64, usize, f64)>,
    state: Option<&LiquiditySnapshot>,
    t: f64,
) -> Vec<F> {
    let d = truth.dims;
    let p = truth.kernel_steps;
    let step = truth.kernel_support / p as f64;
    let mut lambda = vec![F::zero(); d];
    match &truth.baseline {
        Baseline::Constant(nu) => lambda.copy_from_slice(nu),
        Baseline::StateDependent { liq, time } => {
            let snap = state.expect("full mode carries a state");
            let k = truth.k_levels.unwrap();
            let tc = (bucketize_time(t) - 1) as usize;
            for i in 0..d {
                let ty = EventType::from_index(i + 1, k).unwrap();
                let lc = (bucketize_liquidity(snap.state_for(ty, k)) - 1) as usize;
                lambda[i] = liq[i][lc] + time[i][tc];
            }
        }
    }
    for (s, j, w) in history {
        let lag = t - s;
        if lag < 0.0 || lag >= truth.kernel_support {
            continue;
        }
        let r = ((lag / step) as usize).min(p - 1);
        let w = F::from_f64_lossy(w);
        for (i, l) in lambda.iter_mut().enumerate() {
            *l += w * truth.kernel(i, j, r);
        }
    }
    lambda
}

/// Generate one stream from the exact model by thinning.
pub fn simulate<F: Real>(truth: &GroundTruth<F>, cfg: &SimConfig) -> Result<SimOutput<F>, SimError> {
    truth.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = truth.dims;
    let p = truth.kernel_steps;
    let step = truth.kernel_support / p as f64;
    let grid = TickGrid::new(truth.tick_e4);

    // Per-source dominating mass: sum over targets of the kernel maximum.
    let source_bound: Vec<f64> = (0..d)
        .map(|j| {
            (0..d)
                .map(|i| {
                    (0..p)
                        .map(|r| truth.kernel(i, j, r).to_f64_lossy())
                        .fold(0.0f64, f64::max)
                })
                .sum()
        })
        .collect();
    let base_bound: f64 = match &truth.baseline {
        Baseline::Constant(nu) => nu.iter().map(|v| v.to_f64_lossy()).sum(),
        Baseline::StateDependent { liq, time } => (0..d)
            .map(|i| {
                let lm = liq[i].iter().map(|v| v.to_f64_lossy()).fold(0.0, f64::max);
                let tm = time[i].iter().map(|v| v.to_f64_lossy()).fold(0.0, f64::max);
                lm + tm
            })
            .sum(),
    };

    // Kernels transposed source-major for the intensity inner loop.
    let mut k_by_source = vec![F::zero(); d * d * p];
    for i in 0..d {
        for j in 0..d {
            for r in 0..p {
                k_by_source[(j * p + r) * d + i] = truth.kernel(i, j, r);
            }
        }
    }

    let full_mode = matches!(truth.baseline, Baseline::StateDependent { .. }) || truth.k_levels.is_some();
    let mut book_state = if full_mode {
        let levels = if truth.initial_book.is_empty() {
            truth.default_book()
        } else {
            truth.initial_book.clone()
        };
        Some(BookState::from_levels(levels, truth.k_levels.unwrap_or(1))?)
    } else {
        None
    };
    let k_levels = truth.k_levels.unwrap_or(0);
    let mut snapshot = book_state
        .as_ref()
        .map(|b| LiquiditySnapshot::capture(b, k_levels, &grid));
    let initial_book = book_state.clone();
    let initial_state = snapshot.clone();

    let mut history: VecDeque<HistoryEvent> = VecDeque::new();
    let mut bound = base_bound;
    let mut events: Vec<PureEvent> = Vec::new();
    let mut full = FullOutput {
        records: Vec::new(),
        deltas: Vec::new(),
        snapshots: Vec::new(),
        initial_book: initial_book.clone().unwrap_or_else(|| {
            BookState::from_levels([(Side::Bid, 1, 1), (Side::Ask, 2, 1)], 1).unwrap()
        }),
        initial_state: initial_state.clone().unwrap_or(LiquiditySnapshot {
            level_sizes: vec![],
            best_bid_size: 0,
            best_ask_size: 0,
            spread_e4: 0,
        }),
    };
    let mut intensity_trace = Vec::new();
    let mut infeasible_rejections = 0u64;
    let mut lambda_buf = vec![F::zero(); d];

    let mut t = 0.0f64;
    let mut since_rebuild = 0usize;
    loop {
        if bound > cfg.max_total_rate {
            return Err(SimError::ExplosionGuard {
                rate: bound,
                cap: cfg.max_total_rate,
                time: t,
            });
        }
        if bound <= 0.0 {
            break; // nothing can ever arrive again
        }
        let u: f64 = rng.gen::<f64>();
        let exp_draw = -(1.0 - u).ln(); // 1-u in (0,1], so the draw is >= 0
        t += exp_draw / bound;
        let t_next = t;
        if t_next >= cfg.horizon {
            break;
        }

        // Exact intensity at the proposal time.
        lambda_buf.iter_mut().for_each(|v| *v = F::zero());
        match &truth.baseline {
            Baseline::Constant(nu) => lambda_buf.copy_from_slice(nu),
            Baseline::StateDependent { liq, time } => {
                let snap = snapshot.as_ref().unwrap();
                let tc = (bucketize_time(t_next) - 1) as usize;
                for i in 0..d {
                    let ty = EventType::from_index(i + 1, k_levels).unwrap();
                    let lc = (bucketize_liquidity(snap.state_for(ty, k_levels)) - 1) as usize;
                    lambda_buf[i] = liq[i][lc] + time[i][tc];
                }
            }
        }
        for ev in &history {
            let lag = t_next - ev.time;
            if lag >= truth.kernel_support {
                continue;
            }
            let r = ((lag / step) as usize).min(p - 1);
            let w = F::from_f64_lossy(ev.weight);
            let row = &k_by_source[(ev.type0 * p + r) * d..(ev.type0 * p + r + 1) * d];
            for (l, kv) in lambda_buf.iter_mut().zip(row) {
                *l += w * *kv;
            }
        }
        let total: f64 = lambda_buf.iter().map(|v| v.to_f64_lossy()).sum();
        let pick: f64 = rng.gen::<f64>() * bound;

        // Prune expired events and refresh the dominating rate for the
        // next step (kept valid for the proposal just consumed).
        while let Some(front) = history.front() {
            if t_next - front.time >= truth.kernel_support {
                bound -= front.weight * source_bound[front.type0];
                history.pop_front();
            } else {
                break;
            }
        }
        since_rebuild += 1;
        if since_rebuild >= 4096 {
            since_rebuild = 0;
            bound = base_bound
                + history
                    .iter()
                    .map(|e| e.weight * source_bound[e.type0])
                    .sum::<f64>();
        }

        if pick >= total {
            continue; // thinned
        }
        // invert the CDF over types
        let mut acc = 0.0f64;
        let mut type0 = d - 1;
        for (i, l) in lambda_buf.iter().enumerate() {
            acc += l.to_f64_lossy();
            if pick < acc {
                type0 = i;
                break;
            }
        }

        let (size, weight) = if let Some(book) = book_state.as_mut() {
            // Realize the candidate in the book; reject if impossible.
            match realize(truth, book, k_levels, &grid, type0, t_next, &mut rng) {
                Some(realized) => {
                    *book = realized.after;
                    let snap_after = LiquiditySnapshot::capture(book, k_levels, &grid);
                    if cfg.record_intensity > intensity_trace.len() {
                        intensity_trace.push((t_next, lambda_buf.clone()));
                    }
                    full.records.push(ClassifiedRecord {
                        event: realized.event,
                        state_after: snap_after.clone(),
                    });
                    full.deltas.push((realized.delta, realized.remaining));
                    full.snapshots.push(book.visible_levels(k_levels as usize));
                    snapshot = Some(snap_after);
                    (realized.size, realized.weight)
                }
                None => {
                    infeasible_rejections += 1;
                    continue;
                }
            }
        } else {
            let size = truth.sizes[type0].sample(&mut rng);
            if cfg.record_intensity > intensity_trace.len() {
                intensity_trace.push((t_next, lambda_buf.clone()));
            }
            (size, size as f64)
        };

        events.push((t_next, type0 + 1, size));
        bound += weight * source_bound[type0];
        history.push_back(HistoryEvent {
            time: t_next,
            type0,
            weight,
        });
    }

    Ok(SimOutput {
        events,
        full: book_state.map(|_| full),
        intensity_trace,
        infeasible_rejections,
    })
}

struct Realized {
    event: ClassifiedEvent,
    delta: BookDelta,
    after: BookState,
    remaining: u64,
    size: u64,
    weight: f64,
}

/// Try to realize `type0` as a concrete delta on the current book. The
/// applied delta must classify back to exactly the candidate type, and
/// price moves must shift the reference by exactly one tick.
fn realize<F: Real>(
    truth: &GroundTruth<F>,
    book: &BookState,
    k_levels: u32,
    grid: &TickGrid,
    type0: usize,
    time: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Realized> {
    let ty = EventType::from_index(type0 + 1, k_levels).unwrap();
    let try_delta = |delta: BookDelta, want_move: Option<i64>| -> Option<(ClassifiedEvent, BookState)> {
        let after = apply_delta(book, &delta).ok()?;
        if let Some(ticks) = want_move {
            if after.ref_half_ticks() - book.ref_half_ticks() != 2 * ticks {
                return None;
            }
        }
        let msg = RawMessage {
            time,
            msg_type: match delta.kind {
                DeltaKind::Insert => 1,
                DeltaKind::Cancel => 3,
                DeltaKind::Trade => 4,
            },
            order_id: 0,
            size: delta.size,
            price_e4: grid.e4_from_ticks(delta.price_ticks),
            direction: if delta.side == Side::Bid { 1 } else { -1 },
        };
        let event = classify(&msg, &delta, book, &after, grid).ok()?;
        (event.event_type == ty).then_some((event, after))
    };

    match ty {
        EventType::Level { level, action } => {
            let price = book.level_price(level);
            let side = if level > 0 { Side::Ask } else { Side::Bid };
            let desired = truth.sizes[type0].sample(rng).max(1);
            match action {
                EventAction::Insert => {
                    let delta = BookDelta {
                        side,
                        price_ticks: price,
                        size: desired,
                        kind: DeltaKind::Insert,
                    };
                    let (event, after) = try_delta(delta, Some(0))?;
                    let remaining = after.queue_magnitude(price);
                    Some(Realized {
                        event,
                        delta,
                        after,
                        remaining,
                        size: desired,
                        weight: desired as f64,
                    })
                }
                EventAction::Cancel | EventAction::Trade => {
                    let kind = if action == EventAction::Cancel {
                        DeltaKind::Cancel
                    } else {
                        DeltaKind::Trade
                    };
                    let resting = book.queue_magnitude(price);
                    if resting == 0 {
                        return None;
                    }
                    // Full reduction first (a depletion that leaves the
                    // reference in place is a legal level event), then
                    // back off to keep the queue alive.
                    for size in [desired.min(resting), desired.min(resting.saturating_sub(1))] {
                        if size == 0 {
                            continue;
                        }
                        let delta = BookDelta {
                            side,
                            price_ticks: price,
                            size,
                            kind,
                        };
                        if let Some((event, after)) = try_delta(delta, Some(0)) {
                            let remaining = after.queue_magnitude(price);
                            return Some(Realized {
                                event,
                                delta,
                                after,
                                remaining,
                                size,
                                weight: size as f64,
                            });
                        }
                    }
                    None
                }
            }
        }
        EventType::PriceChange { up, action } => {
            let move_ticks = if up { 1 } else { -1 };
            match action {
                EventAction::Trade | EventAction::Cancel => {
                    let (side, price) = if up {
                        (Side::Ask, book.best_ask()?)
                    } else {
                        (Side::Bid, book.best_bid()?)
                    };
                    let size = book.queue_magnitude(price);
                    if size == 0 {
                        return None;
                    }
                    let delta = BookDelta {
                        side,
                        price_ticks: price,
                        size,
                        kind: if action == EventAction::Trade {
                            DeltaKind::Trade
                        } else {
                            DeltaKind::Cancel
                        },
                    };
                    let (event, after) = try_delta(delta, Some(move_ticks))?;
                    Some(Realized {
                        event,
                        delta,
                        after,
                        remaining: 0,
                        size: 1,
                        weight: 1.0,
                    })
                }
                EventAction::Insert => {
                    let bb = book.best_bid()?;
                    let ba = book.best_ask()?;
                    if ba - bb < 2 {
                        return None;
                    }
                    let desired = truth.sizes[type0].sample(rng).max(1);
                    let side = if up { Side::Bid } else { Side::Ask };
                    // scan in-spread prices, aggressive side first
                    let prices: Vec<i64> = if up {
                        ((bb + 1)..ba).rev().collect()
                    } else {
                        ((bb + 1)..ba).collect()
                    };
                    for price in prices {
                        let delta = BookDelta {
                            side,
                            price_ticks: price,
                            size: desired,
                            kind: DeltaKind::Insert,
                        };
                        if let Some((event, after)) = try_delta(delta, Some(move_ticks)) {
                            let remaining = after.queue_magnitude(price);
                            return Some(Realized {
                                event,
                                delta,
                                after,
                                remaining,
                                size: 1,
                                weight: 1.0,
                            });
                        }
                    }
                    None
                }
            }
        }
    }
}

/// Write a simulated full-mode run in the exchange file-pair format so
/// it can be re-ingested end to end. Times are offset to the window
/// start and printed with round-trip precision.
pub fn export_lobster(
    full: &FullOutput,
    tick_e4: i64,
    k_levels: u32,
    window_start: f64,
    message_path: &std::path::Path,
    orderbook_path: &std::path::Path,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut mf = std::io::BufWriter::new(std::fs::File::create(message_path)?);
    let mut of = std::io::BufWriter::new(std::fs::File::create(orderbook_path)?);
    for (idx, rec) in full.records.iter().enumerate() {
        let (delta, remaining) = &full.deltas[idx];
        let msg_type = match delta.kind {
            DeltaKind::Insert => 1,
            DeltaKind::Cancel => {
                if *remaining == 0 {
                    3
                } else {
                    2
                }
            }
            DeltaKind::Trade => 4,
        };
        let direction = if delta.side == Side::Bid { 1 } else { -1 };
        writeln!(
            mf,
            "{},{},{},{},{},{}",
            rec.event.time + window_start,
            msg_type,
            idx + 1,
            delta.size,
            delta.price_ticks * tick_e4,
            direction
        )?;
        let (bids, asks) = &full.snapshots[idx];
        let mut row = String::new();
        for l in 0..k_levels as usize {
            if l > 0 {
                row.push(',');
            }
            match asks.get(l) {
                Some(&(p, s)) => row.push_str(&format!("{},{}", p * tick_e4, s)),
                None => row.push_str("9999999999,0"),
            }
            match bids.get(l) {
                Some(&(p, s)) => row.push_str(&format!(",{},{}", p * tick_e4, s)),
                None => row.push_str(",-9999999999,0"),
            }
        }
        writeln!(of, "{row}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pure_truth(dims: usize, nu: f64, kernel_value: f64, support: f64, steps: usize) -> GroundTruth<f64> {
        GroundTruth {
            k_levels: None,
            dims,
            tick_e4: 100,
            kernel_support: support,
            kernel_steps: steps,
            kernels: vec![kernel_value; dims * dims * steps],
            baseline: Baseline::Constant(vec![nu; dims]),
            sizes: vec![SizeDistribution::Constant(1); dims],
            initial_book: vec![],
        }
    }

    #[test]
    fn zero_kernels_degenerate_to_poisson() {
        // nu * T = 40 expected arrivals per type; check the empirical
        // mean over seeds against the 3-sigma band of the seed average.
        let truth = pure_truth(2, 2.0, 0.0, 1.0, 4);
        let seeds = 50;
        let t = 20.0;
        let mut total = 0u64;
        for seed in 0..seeds {
            let out = simulate(
                &truth,
                &SimConfig {
                    horizon: t,
                    seed,
                    ..SimConfig::default()
                },
            )
            .unwrap();
            total += out.events.len() as u64;
        }
        let mean_per_seed = total as f64 / seeds as f64;
        let expect = 2.0 * 2.0 * t; // both types
        let sigma = (expect / seeds as f64).sqrt();
        assert!(
            (mean_per_seed - expect).abs() < 3.0 * sigma,
            "mean {mean_per_seed} vs {expect} +- {sigma}"
        );
    }

    #[test]
    fn hawkes_mean_rate_matches_branching_formula() {
        // 1-dim, kernel mass 0.5, nu = 0.4 -> long-run rate 0.8/s
        let steps = 20;
        let support = 2.0;
        let mass = 0.5;
        let value = mass / support; // flat kernel integrates to mass
        let truth = pure_truth(1, 0.4, value, support, steps);
        let out = simulate(
            &truth,
            &SimConfig {
                horizon: 50_000.0,
                seed: 42,
                ..SimConfig::default()
            },
        )
        .unwrap();
        let rate = out.events.len() as f64 / 50_000.0;
        let expected = 0.4 / (1.0 - mass);
        assert!(
            (rate - expected).abs() / expected < 0.05,
            "rate {rate} vs {expected}"
        );
    }

    #[test]
    fn seed_determinism() {
        let truth = pure_truth(2, 1.0, 0.05, 1.0, 10);
        let cfg = SimConfig {
            horizon: 200.0,
            seed: 7,
            ..SimConfig::default()
        };
        let a = simulate(&truth, &cfg).unwrap();
        let b = simulate(&truth, &cfg).unwrap();
        assert_eq!(a.events, b.events);
    }

    #[test]
    fn unstable_truth_is_rejected() {
        let truth = pure_truth(1, 1.0, 1.0, 2.0, 10); // mass 2.0
        assert!(matches!(
            simulate(&truth, &SimConfig::default()),
            Err(SimError::InvalidTruth(_))
        ));
    }

    #[test]
    fn size_expectation_enters_the_stability_check() {
        // mass 0.02 per share but 100-share events: branching 2.0
        let mut truth = pure_truth(1, 1.0, 0.01, 2.0, 10);
        truth.sizes = vec![SizeDistribution::Constant(100)];
        assert!(truth.branching_spectral_radius() > 1.0);
        assert!(truth.validate().is_err());
    }

    #[test]
    fn intensity_trace_matches_reevaluation() {
        let truth = pure_truth(2, 1.0, 0.08, 1.0, 10);
        let out = simulate(
            &truth,
            &SimConfig {
                horizon: 300.0,
                seed: 3,
                record_intensity: 1000,
                ..SimConfig::default()
            },
        )
        .unwrap();
        assert!(!out.intensity_trace.is_empty());
        for (idx, (t, lam)) in out.intensity_trace.iter().enumerate() {
            let history = out.events[..idx]
                .iter()
                .map(|&(s, ty, sz)| (s, ty - 1, sz as f64));
            let want = intensity_at(&truth, history, None, *t);
            for i in 0..2 {
                assert!(
                    (want[i] - lam[i]).abs() < 1e-9,
                    "event {idx} type {i}: {} vs {}",
                    want[i],
                    lam[i]
                );
            }
        }
    }
}
