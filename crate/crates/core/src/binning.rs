//! Discretization of the classified event stream into aligned bin-count,
//! liquidity-state, and time-factor sequences.
//!
//! Bin k (1-based) covers ((k-1)*delta, k*delta]; additive level events
//! accumulate order size, reference-price events count 1 per arrival.
//! Liquidity states are sampled from the maintained book at each bin
//! start and bucketized into 10 categories; bin start times fall into the
//! 126 intraday time categories (one-minute buckets for the first and
//! last half hour, five-minute buckets in between).

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{ClassifiedRecord, EventType, LiquiditySnapshot};

/// Trading-day length in seconds (9:30-16:00).
pub const TRADING_DAY_SECONDS: f64 = 23_400.0;
pub const LIQUIDITY_CATEGORIES: usize = 10;
pub const TIME_CATEGORIES: usize = 126;
/// Bucket width shared by both liquidity units: 100 shares, or $0.01
/// expressed in 1e-4 currency units.
pub const LIQUIDITY_BUCKET_UNITS: u64 = 100;

#[derive(Debug, Error)]
pub enum BinError {
    #[error("invalid bin config: {0}")]
    InvalidConfig(String),
    #[error("event at {time} s lies outside the binning horizon")]
    EventOutOfHorizon { time: f64 },
    #[error("event type index {index} out of 1..={dims}")]
    TypeOutOfRange { index: usize, dims: usize },
    #[error("{path}:{line}: bad bin archive: {reason}")]
    Archive {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Bin-size, kernel support, and horizon configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinConfig {
    /// Bin size in seconds.
    pub delta: f64,
    /// Maximum kernel support in seconds.
    pub support: f64,
    /// Horizon in seconds (trading day by default).
    pub horizon: f64,
    /// Accumulate order sizes for additive events; otherwise every event
    /// counts 1.
    pub use_sizes: bool,
}

impl Default for BinConfig {
    fn default() -> Self {
        BinConfig {
            delta: 0.25,
            support: 20.0,
            horizon: TRADING_DAY_SECONDS,
            use_sizes: true,
        }
    }
}

impl BinConfig {
    /// Autoregressive lag count p = floor(s / delta).
    pub fn lag_steps(&self) -> usize {
        (self.support / self.delta).floor() as usize
    }

    /// Number of bins n = floor(T / delta).
    pub fn bin_count(&self) -> usize {
        (self.horizon / self.delta).floor() as usize
    }

    pub fn validate(&self) -> Result<(), BinError> {
        if !(self.delta > 0.0 && self.delta < self.support && self.support < self.horizon) {
            return Err(BinError::InvalidConfig(format!(
                "need 0 < delta ({}) < support ({}) < horizon ({})",
                self.delta, self.support, self.horizon
            )));
        }
        let p = self.lag_steps();
        let n = self.bin_count();
        if p < 1 || n <= p {
            return Err(BinError::InvalidConfig(format!(
                "need lag p >= 1 and bins n > p (got p={p}, n={n})"
            )));
        }
        Ok(())
    }
}

/// Map a liquidity value (shares, or 1e-4 currency units for spreads)
/// to its category 1..=10; buckets are [0,100), [100,200), ... with an
/// open-ended top bucket.
pub fn bucketize_liquidity(value_units: u64) -> u8 {
    ((value_units / LIQUIDITY_BUCKET_UNITS) + 1).min(LIQUIDITY_CATEGORIES as u64) as u8
}

/// Map seconds since the window start to the intraday time category
/// 1..=126. Times beyond the trading day clamp into the last bucket.
pub fn bucketize_time(t: f64) -> u8 {
    let t = t.max(0.0);
    let cat = if t < 1_800.0 {
        1 + (t / 60.0) as usize
    } else if t < 21_600.0 {
        31 + ((t - 1_800.0) / 300.0) as usize
    } else {
        97 + ((t - 21_600.0) / 60.0) as usize
    };
    cat.min(TIME_CATEGORIES) as u8
}

/// The aligned sequences the estimator consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinData {
    pub dims: usize,
    /// Level count when the stream came from a book; zero-K streams (pure
    /// simulations) use `None`.
    pub k_levels: Option<u32>,
    pub config: BinConfig,
    /// dims x n event totals per bin (shares for additive types, counts
    /// for price-change types).
    pub counts: Vec<Vec<u64>>,
    /// dims x n raw liquidity values sampled at bin starts.
    pub liq_state: Vec<Vec<u64>>,
    /// dims x n liquidity categories (1..=10).
    pub liq_cat: Vec<Vec<u8>>,
    /// n time categories (1..=126), a function of the bin index alone.
    pub time_cat: Vec<u8>,
}

impl BinData {
    fn empty(dims: usize, k_levels: Option<u32>, config: BinConfig) -> Self {
        let n = config.bin_count();
        BinData {
            dims,
            k_levels,
            config,
            counts: vec![vec![0; n]; dims],
            liq_state: vec![vec![0; n]; dims],
            liq_cat: vec![vec![1; n]; dims],
            time_cat: (0..n)
                .map(|c| bucketize_time(c as f64 * config.delta))
                .collect(),
        }
    }

    /// 1-based bin index for an event time, or an error when the time
    /// falls outside the horizon. Events exactly on a boundary belong to
    /// the earlier bin (right-closed intervals); t = 0 joins bin 1.
    fn bin_for(&self, time: f64) -> Result<usize, BinError> {
        if time < 0.0 {
            return Err(BinError::EventOutOfHorizon { time });
        }
        let k = (time / self.config.delta).ceil() as usize;
        let k = k.max(1);
        if k > self.config.bin_count() {
            return Err(BinError::EventOutOfHorizon { time });
        }
        Ok(k)
    }
}

/// Build bins from a classified book stream.
pub fn build_bins(
    records: &[ClassifiedRecord],
    initial_state: &LiquiditySnapshot,
    k_levels: u32,
    config: BinConfig,
) -> Result<BinData, BinError> {
    config.validate()?;
    let dims = EventType::dimension(k_levels);
    let mut data = BinData::empty(dims, Some(k_levels), config);
    let types: Vec<EventType> = (1..=dims)
        .map(|i| EventType::from_index(i, k_levels).unwrap())
        .collect();

    for rec in records {
        let ev = &rec.event;
        let bin = data.bin_for(ev.time)?;
        let i = ev.event_type.index(k_levels) - 1;
        let contribution = if ev.event_type.is_price_change() || !config.use_sizes {
            1
        } else {
            ev.size
        };
        data.counts[i][bin - 1] += contribution;
    }

    // Sample the liquidity vector at each bin start: the state that was
    // in force strictly before (k-1)*delta.
    let n = config.bin_count();
    let mut cursor = 0usize;
    let mut current = initial_state;
    for c in 0..n {
        let start = c as f64 * config.delta;
        while cursor < records.len() && records[cursor].event.time < start {
            current = &records[cursor].state_after;
            cursor += 1;
        }
        for (i, ty) in types.iter().enumerate() {
            let v = current.state_for(*ty, k_levels);
            data.liq_state[i][c] = v;
            data.liq_cat[i][c] = bucketize_liquidity(v);
        }
    }
    Ok(data)
}

/// Build bins from a bare event stream with no book: liquidity states are
/// zero (category 1) and every event contributes its size (or 1 when
/// sizes are ignored).
pub fn build_bins_stateless(
    events: &[(f64, usize, u64)],
    dims: usize,
    config: BinConfig,
) -> Result<BinData, BinError> {
    config.validate()?;
    let mut data = BinData::empty(dims, None, config);
    for &(time, index, size) in events {
        if index == 0 || index > dims {
            return Err(BinError::TypeOutOfRange { index, dims });
        }
        let bin = data.bin_for(time)?;
        data.counts[index - 1][bin - 1] += if config.use_sizes { size } else { 1 };
    }
    Ok(data)
}

const ARCHIVE_MAGIC: &str = "# lobbins v1";

/// Write the bin archive: a versioned CSV with one row per bin carrying
/// the time category, per-type counts, and per-type liquidity categories.
pub fn write_bin_archive(path: &Path, data: &BinData) -> Result<(), BinError> {
    let io_err = |source| BinError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(File::create(path).map_err(io_err)?);
    let mut emit = |s: String| f.write_all(s.as_bytes()).map_err(io_err);
    emit(format!("{ARCHIVE_MAGIC}\n"))?;
    emit(format!(
        "# delta={} support={} horizon={} use_sizes={} dims={} k_levels={}\n",
        data.config.delta,
        data.config.support,
        data.config.horizon,
        data.config.use_sizes,
        data.dims,
        data.k_levels.map_or(0, |k| k as i64),
    ))?;
    let n = data.config.bin_count();
    let mut line = String::with_capacity(4 * data.dims + 16);
    for c in 0..n {
        line.clear();
        line.push_str(&format!("{},{}", c + 1, data.time_cat[c]));
        for i in 0..data.dims {
            line.push_str(&format!(",{}", data.counts[i][c]));
        }
        for i in 0..data.dims {
            line.push_str(&format!(",{}", data.liq_cat[i][c]));
        }
        line.push('\n');
        emit(std::mem::take(&mut line))?;
    }
    Ok(())
}

/// Read a bin archive written by [`write_bin_archive`]. Raw liquidity
/// values are not stored; `liq_state` comes back empty.
pub fn read_bin_archive(path: &Path) -> Result<BinData, BinError> {
    let io_err = |source| BinError::Io {
        path: path.display().to_string(),
        source,
    };
    let bad = |line: usize, reason: &str| BinError::Archive {
        path: path.display().to_string(),
        line,
        reason: reason.to_string(),
    };
    let f = BufReader::new(File::open(path).map_err(io_err)?);
    let mut lines = f.lines();
    let magic = lines
        .next()
        .ok_or_else(|| bad(1, "empty file"))?
        .map_err(io_err)?;
    if magic.trim() != ARCHIVE_MAGIC {
        return Err(bad(1, "not a lobbins v1 archive"));
    }
    let header = lines
        .next()
        .ok_or_else(|| bad(2, "missing header"))?
        .map_err(io_err)?;
    let mut delta = None;
    let mut support = None;
    let mut horizon = None;
    let mut use_sizes = None;
    let mut dims = None;
    let mut k_levels = None;
    for tok in header.trim_start_matches('#').split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| bad(2, "malformed header token"))?;
        match k {
            "delta" => delta = v.parse::<f64>().ok(),
            "support" => support = v.parse::<f64>().ok(),
            "horizon" => horizon = v.parse::<f64>().ok(),
            "use_sizes" => use_sizes = v.parse::<bool>().ok(),
            "dims" => dims = v.parse::<usize>().ok(),
            "k_levels" => k_levels = v.parse::<i64>().ok(),
            _ => {}
        }
    }
    let config = BinConfig {
        delta: delta.ok_or_else(|| bad(2, "missing delta"))?,
        support: support.ok_or_else(|| bad(2, "missing support"))?,
        horizon: horizon.ok_or_else(|| bad(2, "missing horizon"))?,
        use_sizes: use_sizes.ok_or_else(|| bad(2, "missing use_sizes"))?,
    };
    config.validate()?;
    let dims = dims.ok_or_else(|| bad(2, "missing dims"))?;
    let k_levels = match k_levels.ok_or_else(|| bad(2, "missing k_levels"))? {
        0 => None,
        k if k > 0 => Some(k as u32),
        _ => return Err(bad(2, "negative k_levels")),
    };
    let mut data = BinData::empty(dims, k_levels, config);
    let n = config.bin_count();
    let mut rows = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(io_err)?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + 2 * dims {
            return Err(bad(lineno + 3, "wrong column count"));
        }
        let bin: usize = fields[0].parse().map_err(|_| bad(lineno + 3, "bad bin index"))?;
        if bin == 0 || bin > n {
            return Err(bad(lineno + 3, "bin index out of range"));
        }
        let c = bin - 1;
        data.time_cat[c] = fields[1].parse().map_err(|_| bad(lineno + 3, "bad time cat"))?;
        for i in 0..dims {
            data.counts[i][c] = fields[2 + i]
                .parse()
                .map_err(|_| bad(lineno + 3, "bad count"))?;
            data.liq_cat[i][c] = fields[2 + dims + i]
                .parse()
                .map_err(|_| bad(lineno + 3, "bad liq cat"))?;
        }
        rows += 1;
    }
    if rows != n {
        return Err(bad(rows + 2, "row count does not match bin count"));
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::book::{apply_delta, BookDelta, BookState, DeltaKind, Side, TickGrid};
    use crate::events::{classify, ClassifiedEvent, QuoteSummary, RawMessage};

    fn snapshot(book: &BookState) -> LiquiditySnapshot {
        LiquiditySnapshot::capture(book, 3, &TickGrid::new(100))
    }

    fn record(time: f64, ty: EventType, size: u64, book: &BookState) -> ClassifiedRecord {
        ClassifiedRecord {
            event: ClassifiedEvent {
                time,
                event_type: ty,
                size,
                liquidity_state: 0,
                book_before: QuoteSummary::capture(book).unwrap(),
            },
            state_after: snapshot(book),
        }
    }

    fn test_book() -> BookState {
        BookState::from_levels(
            [(Side::Bid, 10000, 150), (Side::Ask, 10001, 250)],
            3,
        )
        .unwrap()
    }

    fn cfg() -> BinConfig {
        BinConfig {
            delta: 0.25,
            support: 2.0,
            horizon: 10.0,
            use_sizes: true,
        }
    }

    #[test]
    fn paper_scale_counts() {
        let c = BinConfig::default();
        assert_eq!(c.bin_count(), 93_600);
        assert_eq!(c.lag_steps(), 80);
        let half = BinConfig {
            delta: 0.5,
            ..BinConfig::default()
        };
        assert_eq!(half.lag_steps(), 40);
    }

    #[test]
    fn single_event_lands_in_its_bin_with_size() {
        let book = test_book();
        let ty: EventType = "+1(i)".parse().unwrap();
        let recs = vec![record(0.3, ty, 100, &book)];
        let data = build_bins(&recs, &snapshot(&book), 3, cfg()).unwrap();
        let i = ty.index(3) - 1;
        assert_eq!(data.counts[i][1], 100); // bin 2 covers (0.25, 0.5]
        assert_eq!(
            data.counts.iter().flatten().sum::<u64>(),
            100,
            "no other bin is touched"
        );
    }

    #[test]
    fn price_change_events_count_one_regardless_of_size() {
        let book = test_book();
        let ty: EventType = "p+(t)".parse().unwrap();
        let recs = vec![record(0.3, ty, 1, &book)];
        let data = build_bins(&recs, &snapshot(&book), 3, cfg()).unwrap();
        assert_eq!(data.counts[ty.index(3) - 1][1], 1);
    }

    #[test]
    fn boundary_event_joins_the_right_closed_bin() {
        let book = test_book();
        let ty: EventType = "+1(c)".parse().unwrap();
        let recs = vec![record(0.25, ty, 7, &book)];
        let data = build_bins(&recs, &snapshot(&book), 3, cfg()).unwrap();
        assert_eq!(data.counts[ty.index(3) - 1][0], 7); // bin 1 = (0, 0.25]
    }

    #[test]
    fn size_handling_can_be_disabled() {
        let book = test_book();
        let ty: EventType = "+1(i)".parse().unwrap();
        let recs = vec![record(0.3, ty, 100, &book)];
        let data = build_bins(
            &recs,
            &snapshot(&book),
            3,
            BinConfig {
                use_sizes: false,
                ..cfg()
            },
        )
        .unwrap();
        assert_eq!(data.counts[ty.index(3) - 1][1], 1);
    }

    #[test]
    fn out_of_horizon_event_is_an_error() {
        let book = test_book();
        let ty: EventType = "+1(i)".parse().unwrap();
        let recs = vec![record(10.5, ty, 1, &book)];
        assert!(matches!(
            build_bins(&recs, &snapshot(&book), 3, cfg()),
            Err(BinError::EventOutOfHorizon { .. })
        ));
    }

    #[test]
    fn liquidity_buckets() {
        assert_eq!(bucketize_liquidity(0), 1);
        assert_eq!(bucketize_liquidity(50), 1);
        assert_eq!(bucketize_liquidity(99), 1);
        assert_eq!(bucketize_liquidity(100), 2);
        assert_eq!(bucketize_liquidity(900), 10);
        assert_eq!(bucketize_liquidity(5_000), 10);
        // spread of $0.005 = 50 e4-units
        assert_eq!(bucketize_liquidity(50), 1);
    }

    #[test]
    fn time_buckets_tile_the_trading_day() {
        assert_eq!(bucketize_time(0.0), 1);
        assert_eq!(bucketize_time(30.0), 1);
        assert_eq!(bucketize_time(59.9), 1);
        assert_eq!(bucketize_time(60.0), 2);
        assert_eq!(bucketize_time(1_799.9), 30);
        assert_eq!(bucketize_time(1_800.0), 31);
        assert_eq!(bucketize_time(21_599.9), 96);
        assert_eq!(bucketize_time(21_600.0), 97);
        assert_eq!(bucketize_time(23_399.0), 126);

        // partition: 30 + 66 + 30 buckets, widths summing to 23400
        let widths = [60.0; 30]
            .iter()
            .chain([300.0; 66].iter())
            .chain([60.0; 30].iter())
            .sum::<f64>();
        assert_eq!(widths, TRADING_DAY_SECONDS);
        // category boundaries are consistent: scanning the day second by
        // second hits each category in order 1..=126
        let mut seen = vec![];
        for s in 0..23_400 {
            let c = bucketize_time(s as f64);
            if seen.last() != Some(&c) {
                seen.push(c);
            }
        }
        assert_eq!(seen, (1..=126).map(|c| c as u8).collect::<Vec<_>>());
    }

    #[test]
    fn liquidity_state_is_carried_forward_between_events() {
        let book0 = test_book();
        // event at t=0.6 grows the first ask queue
        let delta = BookDelta {
            side: Side::Ask,
            price_ticks: 10001,
            size: 100,
            kind: DeltaKind::Insert,
        };
        let book1 = apply_delta(&book0, &delta).unwrap();
        let msg = RawMessage {
            time: 0.6,
            msg_type: 1,
            order_id: 0,
            size: 100,
            price_e4: 1_000_100,
            direction: -1,
        };
        let ev = classify(&msg, &delta, &book0, &book1, &TickGrid::new(100)).unwrap();
        let recs = vec![ClassifiedRecord {
            event: ev,
            state_after: snapshot(&book1),
        }];
        let data = build_bins(&recs, &snapshot(&book0), 3, cfg()).unwrap();
        let i = "+1(i)".parse::<EventType>().unwrap().index(3) - 1;
        // bins starting at 0.0, 0.25, 0.5 see the old queue (250); the
        // event at 0.6 is visible from the bin starting at 0.75 on
        assert_eq!(data.liq_state[i][0], 250);
        assert_eq!(data.liq_state[i][2], 250);
        assert_eq!(data.liq_state[i][3], 350);
        assert_eq!(data.liq_state[i][9], 350);
        assert_eq!(data.liq_cat[i][2], 3);
        assert_eq!(data.liq_cat[i][3], 4);
    }

    #[test]
    fn conservation_against_event_totals() {
        let book = test_book();
        let types = ["+1(i)", "-1(c)", "p+(t)", "+2(t)", "p-(i)"];
        let mut recs = vec![];
        for (j, name) in types.iter().enumerate() {
            let ty: EventType = name.parse().unwrap();
            for r in 0..5 {
                let size = if ty.is_price_change() { 1 } else { 40 + r };
                recs.push(record(0.1 + (j as f64) + r as f64 * 0.11, ty, size, &book));
            }
        }
        recs.sort_by(|a, b| a.event.time.total_cmp(&b.event.time));
        let data = build_bins(&recs, &snapshot(&book), 3, cfg()).unwrap();
        let totals = crate::events::event_counts(recs.iter().map(|r| &r.event), 3);
        for i in 0..data.dims {
            let binned: u64 = data.counts[i].iter().sum();
            let ty = EventType::from_index(i + 1, 3).unwrap();
            let expected = if ty.is_price_change() {
                totals.counts[i]
            } else {
                totals.size_sums[i]
            };
            assert_eq!(binned, expected, "type {ty}");
        }
    }

    #[test]
    fn archive_round_trip() {
        let book = test_book();
        let ty: EventType = "+1(i)".parse().unwrap();
        let recs = vec![record(0.3, ty, 100, &book), record(5.9, ty, 7, &book)];
        let data = build_bins(&recs, &snapshot(&book), 3, cfg()).unwrap();
        let dir = std::env::temp_dir().join("lobhawkes-bin-archive-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bins.csv");
        write_bin_archive(&path, &data).unwrap();
        let back = read_bin_archive(&path).unwrap();
        assert_eq!(back.counts, data.counts);
        assert_eq!(back.liq_cat, data.liq_cat);
        assert_eq!(back.time_cat, data.time_cat);
        assert_eq!(back.config, data.config);
        assert_eq!(back.k_levels, data.k_levels);
    }
}
