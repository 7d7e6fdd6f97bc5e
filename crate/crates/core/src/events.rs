//! Message parsing, book replay, and classification into the 6K+6 event
//! taxonomy.
//!
//! Event indices are 1-based and ordered bid levels -K..-1 (insert,
//! cancel, trade per level), then ask levels +1..+K, then the six
//! reference-price moves: down by trade/cancel/insert, up by
//! trade/cancel/insert.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::book::{
    apply_delta, relative_level, BookDelta, BookError, BookState, DeltaKind, Side, TickGrid,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: time decreases")]
    NonMonotoneTime { path: String, line: usize },
    #[error("message file has {messages} rows but orderbook file has {snapshots}")]
    RowCountMismatch { messages: usize, snapshots: usize },
    #[error("no usable snapshot row to seed the book")]
    NoSeedSnapshot,
    #[error(transparent)]
    Book(#[from] BookError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventAction {
    Insert,
    Cancel,
    Trade,
}

impl EventAction {
    fn code(self) -> char {
        match self {
            EventAction::Insert => 'i',
            EventAction::Cancel => 'c',
            EventAction::Trade => 't',
        }
    }
}

/// One of the 6K+6 event types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventType {
    /// Insert/cancel/trade at a relative level (+1..+K asks, -1..-K bids)
    /// that leaves the reference price unchanged.
    Level { level: i32, action: EventAction },
    /// Reference price moved up (`up`) or down by a trade, cancellation,
    /// or in-spread insertion.
    PriceChange { up: bool, action: EventAction },
}

impl EventType {
    /// Total number of event types for a level-K book.
    pub fn dimension(k_levels: u32) -> usize {
        6 * k_levels as usize + 6
    }

    /// 1-based index in the taxonomy ordering.
    pub fn index(&self, k_levels: u32) -> usize {
        let k = k_levels as i64;
        match *self {
            EventType::Level { level, action } => {
                debug_assert!(level != 0 && (level.unsigned_abs() as i64) <= k);
                let action_off = match action {
                    EventAction::Insert => 0,
                    EventAction::Cancel => 1,
                    EventAction::Trade => 2,
                };
                let block = if level < 0 {
                    k + level as i64 // -K -> 0, -1 -> K-1
                } else {
                    k + level as i64 - 1 // +1 -> K, +K -> 2K-1
                };
                (3 * block + action_off + 1) as usize
            }
            EventType::PriceChange { up, action } => {
                let action_off = match action {
                    EventAction::Trade => 0,
                    EventAction::Cancel => 1,
                    EventAction::Insert => 2,
                };
                let block = if up { 3 } else { 0 };
                (6 * k + block + action_off + 1) as usize
            }
        }
    }

    /// Inverse of [`EventType::index`].
    pub fn from_index(index: usize, k_levels: u32) -> Option<EventType> {
        let k = k_levels as usize;
        if index == 0 || index > 6 * k + 6 {
            return None;
        }
        let z = index - 1;
        if z < 6 * k {
            let block = z / 3;
            let action = match z % 3 {
                0 => EventAction::Insert,
                1 => EventAction::Cancel,
                _ => EventAction::Trade,
            };
            let level = if block < k {
                block as i32 - k as i32 // 0 -> -K
            } else {
                block as i32 - k as i32 + 1 // K -> +1
            };
            Some(EventType::Level { level, action })
        } else {
            let z = z - 6 * k;
            let action = match z % 3 {
                0 => EventAction::Trade,
                1 => EventAction::Cancel,
                _ => EventAction::Insert,
            };
            Some(EventType::PriceChange { up: z >= 3, action })
        }
    }

    pub fn is_price_change(&self) -> bool {
        matches!(self, EventType::PriceChange { .. })
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            EventType::Level { level, action } => {
                write!(f, "{:+}({})", level, action.code())
            }
            EventType::PriceChange { up, action } => {
                write!(f, "p{}({})", if up { '+' } else { '-' }, action.code())
            }
        }
    }
}

impl FromStr for EventType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || format!("unrecognized event type {s:?}");
        let action = |c: char| match c {
            'i' => Ok(EventAction::Insert),
            'c' => Ok(EventAction::Cancel),
            't' => Ok(EventAction::Trade),
            _ => Err(err()),
        };
        let body = s.trim();
        let inner = body
            .strip_suffix(')')
            .and_then(|b| b.rsplit_once('('))
            .ok_or_else(err)?;
        let act = action(inner.1.chars().next().ok_or_else(err)?)?;
        match inner.0 {
            "p+" => Ok(EventType::PriceChange { up: true, action: act }),
            "p-" => Ok(EventType::PriceChange { up: false, action: act }),
            lvl => {
                let level: i32 = lvl.parse().map_err(|_| err())?;
                if level == 0 {
                    return Err(err());
                }
                Ok(EventType::Level { level, action: act })
            }
        }
    }
}

/// Raw exchange message (LOBSTER layout).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawMessage {
    /// Seconds after midnight.
    pub time: f64,
    /// LOBSTER type code 1..7.
    pub msg_type: u8,
    pub order_id: i64,
    pub size: u64,
    /// Price in 1e-4 currency units.
    pub price_e4: i64,
    /// +1 buy (bid side), -1 sell (ask side).
    pub direction: i8,
}

impl RawMessage {
    pub fn side(&self) -> Side {
        if self.direction >= 0 {
            Side::Bid
        } else {
            Side::Ask
        }
    }

    /// Book effect of this message, if any (hidden executions, crosses,
    /// and halts leave the visible book alone).
    pub fn delta_kind(&self) -> Option<DeltaKind> {
        match self.msg_type {
            1 => Some(DeltaKind::Insert),
            2 | 3 => Some(DeltaKind::Cancel),
            4 => Some(DeltaKind::Trade),
            _ => None,
        }
    }
}

/// Best quotes right before an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuoteSummary {
    pub best_bid_ticks: i64,
    pub best_ask_ticks: i64,
    pub ref_half_ticks: i64,
}

impl QuoteSummary {
    pub fn capture(book: &BookState) -> Option<Self> {
        Some(QuoteSummary {
            best_bid_ticks: book.best_bid()?,
            best_ask_ticks: book.best_ask()?,
            ref_half_ticks: book.ref_half_ticks(),
        })
    }

    pub fn spread_ticks(&self) -> i64 {
        self.best_ask_ticks - self.best_bid_ticks
    }
}

/// Per-type liquidity values derived from a book state: queue sizes at
/// the 2K relative levels, best-side queue sizes, and the spread. The
/// spread is held in 1e-4 currency units; everything else in shares.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiquiditySnapshot {
    /// Levels -K..-1 then +1..+K.
    pub level_sizes: Vec<u64>,
    pub best_bid_size: u64,
    pub best_ask_size: u64,
    pub spread_e4: i64,
}

impl LiquiditySnapshot {
    pub fn capture(book: &BookState, k_levels: u32, grid: &TickGrid) -> Self {
        let k = k_levels as i32;
        let mut level_sizes = Vec::with_capacity(2 * k as usize);
        for level in -k..=-1 {
            level_sizes.push(book.level_size(level));
        }
        for level in 1..=k {
            level_sizes.push(book.level_size(level));
        }
        LiquiditySnapshot {
            level_sizes,
            best_bid_size: book.best_bid_size(),
            best_ask_size: book.best_ask_size(),
            spread_e4: book.spread_ticks().unwrap_or(0) * grid.tick_e4,
        }
    }

    /// Liquidity state for one event type, in integer units (shares, or
    /// 1e-4 currency units for in-spread insertions).
    pub fn state_for(&self, event_type: EventType, k_levels: u32) -> u64 {
        let k = k_levels as i32;
        match event_type {
            EventType::Level { level, .. } => {
                let idx = if level < 0 { level + k } else { k + level - 1 };
                self.level_sizes[idx as usize]
            }
            EventType::PriceChange { up, action } => match action {
                EventAction::Insert => self.spread_e4 as u64,
                _ if up => self.best_ask_size,
                _ => self.best_bid_size,
            },
        }
    }
}

/// One classified event of the 6K+6 taxonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedEvent {
    /// Seconds since the start of the trading window.
    pub time: f64,
    pub event_type: EventType,
    /// Order size in shares; 1 for reference-price-change events.
    pub size: u64,
    /// Pre-event liquidity state in integer units (shares, or 1e-4
    /// currency units for in-spread insertions).
    pub liquidity_state: u64,
    pub book_before: QuoteSummary,
}

/// Classified event plus the post-event liquidity vector; the stream
/// item handed to binning so states can be sampled at bin starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedRecord {
    pub event: ClassifiedEvent,
    pub state_after: LiquiditySnapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipReason {
    HiddenExecution,
    Cross,
    Halt,
    OutsideWindow,
    BeyondLevelK,
    Unclassifiable,
}

/// classify result: an event, or a counted skip.
pub type Classification = Result<ClassifiedEvent, SkipReason>;

/// Classify one replayed message given the books before and after its
/// application. Reference-price movement takes precedence; level events
/// deeper than K are skipped.
pub fn classify(
    msg: &RawMessage,
    delta: &BookDelta,
    book_before: &BookState,
    book_after: &BookState,
    grid: &TickGrid,
) -> Classification {
    let before = QuoteSummary::capture(book_before).ok_or(SkipReason::Unclassifiable)?;
    let k = book_before.k_levels();
    let action = match delta.kind {
        DeltaKind::Insert => EventAction::Insert,
        DeltaKind::Cancel => EventAction::Cancel,
        DeltaKind::Trade => EventAction::Trade,
    };
    let ref_before = book_before.ref_half_ticks();
    let ref_after = book_after.ref_half_ticks();
    if ref_after != ref_before {
        let up = ref_after > ref_before;
        let event_type = EventType::PriceChange { up, action };
        let liquidity_state = match action {
            EventAction::Insert => (before.spread_ticks() * grid.tick_e4) as u64,
            _ if up => book_before.best_ask_size(),
            _ => book_before.best_bid_size(),
        };
        return Ok(ClassifiedEvent {
            time: msg.time,
            event_type,
            size: 1,
            liquidity_state,
            book_before: before,
        });
    }
    let level = relative_level(book_before, delta.price_ticks, delta.side)
        .map_err(|_| SkipReason::Unclassifiable)?;
    if level.unsigned_abs() > k {
        return Err(SkipReason::BeyondLevelK);
    }
    Ok(ClassifiedEvent {
        time: msg.time,
        event_type: EventType::Level { level, action },
        size: delta.size,
        liquidity_state: book_before.queue_magnitude(delta.price_ticks),
        book_before: before,
    })
}

/// Per-type totals over a classified stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTotals {
    pub k_levels: u32,
    pub counts: Vec<u64>,
    pub size_sums: Vec<u64>,
}

pub fn event_counts<'a>(
    events: impl IntoIterator<Item = &'a ClassifiedEvent>,
    k_levels: u32,
) -> EventTotals {
    let d = EventType::dimension(k_levels);
    let mut totals = EventTotals {
        k_levels,
        counts: vec![0; d],
        size_sums: vec![0; d],
    };
    for ev in events {
        let i = ev.event_type.index(k_levels) - 1;
        totals.counts[i] += 1;
        totals.size_sums[i] += ev.size;
    }
    totals
}

/// Ingest configuration for the LOBSTER file pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IngestConfig {
    pub k_levels: u32,
    /// Tick size in 1e-4 currency units.
    pub tick_e4: i64,
    /// Trading window in seconds after midnight (inclusive); messages
    /// outside it are dropped and times are rebased to its start.
    pub window: (f64, f64),
    /// Reconcile the replayed book against every snapshot row and
    /// resynchronize on mismatch.
    pub resync: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            k_levels: 3,
            tick_e4: 100,
            window: (34_200.0, 57_600.0),
            resync: true,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub messages_read: u64,
    pub classified: u64,
    /// Per-type (name, count, summed size).
    pub per_type: Vec<(String, u64, u64)>,
    pub skipped_hidden: u64,
    pub skipped_cross: u64,
    pub skipped_halt: u64,
    pub skipped_window: u64,
    pub skipped_beyond_k: u64,
    pub skipped_unclassifiable: u64,
    pub drift_resyncs: u64,
    /// True when the first message could not be un-applied and the book
    /// was seeded directly from the first snapshot row.
    pub seeded_snapshot_only: bool,
}

impl IngestReport {
    fn count_skip(&mut self, reason: SkipReason) {
        match reason {
            SkipReason::HiddenExecution => self.skipped_hidden += 1,
            SkipReason::Cross => self.skipped_cross += 1,
            SkipReason::Halt => self.skipped_halt += 1,
            SkipReason::OutsideWindow => self.skipped_window += 1,
            SkipReason::BeyondLevelK => self.skipped_beyond_k += 1,
            SkipReason::Unclassifiable => self.skipped_unclassifiable += 1,
        }
    }
}

/// One parsed orderbook snapshot row: the K best levels per side as
/// (price_ticks, size), nearest price first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotRow {
    pub bids: Vec<(i64, u64)>,
    pub asks: Vec<(i64, u64)>,
}

const LOBSTER_DUMMY_PRICE: i64 = 9_999_999_999;

fn read_lines(path: &Path) -> Result<Vec<String>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    BufReader::new(file)
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> IngestError {
    IngestError::MalformedRow {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

/// Parse a LOBSTER message file: time, type, order id, size, price,
/// direction.
pub fn parse_message_file(path: &Path) -> Result<Vec<RawMessage>, IngestError> {
    let mut out = Vec::new();
    let mut last_time = f64::NEG_INFINITY;
    for (lineno, line) in read_lines(path)?.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(malformed(
                path,
                lineno + 1,
                format!("expected 6 columns, found {}", fields.len()),
            ));
        }
        let parse = |idx: usize, what: &str| -> Result<i64, IngestError> {
            fields[idx]
                .parse::<i64>()
                .map_err(|e| malformed(path, lineno + 1, format!("{what}: {e}")))
        };
        let time: f64 = fields[0]
            .parse()
            .map_err(|e| malformed(path, lineno + 1, format!("time: {e}")))?;
        if time < last_time {
            return Err(IngestError::NonMonotoneTime {
                path: path.display().to_string(),
                line: lineno + 1,
            });
        }
        last_time = time;
        let msg_type = parse(1, "type")?;
        if !(1..=7).contains(&msg_type) {
            return Err(malformed(path, lineno + 1, format!("type {msg_type} out of range")));
        }
        let size = parse(3, "size")?;
        if size <= 0 {
            return Err(malformed(path, lineno + 1, "non-positive size"));
        }
        let direction = parse(5, "direction")?;
        if direction != 1 && direction != -1 {
            return Err(malformed(path, lineno + 1, "direction must be +1 or -1"));
        }
        out.push(RawMessage {
            time,
            msg_type: msg_type as u8,
            order_id: parse(2, "order id")?,
            size: size as u64,
            price_e4: parse(4, "price")?,
            direction: direction as i8,
        });
    }
    Ok(out)
}

/// Parse a LOBSTER orderbook file with K levels per side: columns
/// ask_px_1, ask_sz_1, bid_px_1, bid_sz_1, ...
pub fn parse_orderbook_file(
    path: &Path,
    k_levels: u32,
    grid: &TickGrid,
) -> Result<Vec<SnapshotRow>, IngestError> {
    let want = 4 * k_levels as usize;
    let mut out = Vec::new();
    for (lineno, line) in read_lines(path)?.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < want {
            return Err(malformed(
                path,
                lineno + 1,
                format!("expected >= {want} columns, found {}", fields.len()),
            ));
        }
        let mut row = SnapshotRow {
            bids: Vec::with_capacity(k_levels as usize),
            asks: Vec::with_capacity(k_levels as usize),
        };
        for lvl in 0..k_levels as usize {
            let vals: Vec<i64> = fields[4 * lvl..4 * lvl + 4]
                .iter()
                .map(|f| {
                    f.parse::<i64>()
                        .map_err(|e| malformed(path, lineno + 1, format!("level {lvl}: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let (ask_px, ask_sz, bid_px, bid_sz) = (vals[0], vals[1], vals[2], vals[3]);
            if ask_sz > 0 && ask_px.abs() < LOBSTER_DUMMY_PRICE {
                row.asks.push((grid.ticks_from_e4(ask_px)?, ask_sz as u64));
            }
            if bid_sz > 0 && bid_px.abs() < LOBSTER_DUMMY_PRICE {
                row.bids.push((grid.ticks_from_e4(bid_px)?, bid_sz as u64));
            }
        }
        out.push(row);
    }
    Ok(out)
}

impl SnapshotRow {
    fn to_book(&self, k_levels: u32) -> Result<BookState, BookError> {
        BookState::from_levels(
            self.bids
                .iter()
                .map(|&(p, s)| (Side::Bid, p, s))
                .chain(self.asks.iter().map(|&(p, s)| (Side::Ask, p, s))),
            k_levels,
        )
    }

    fn matches(&self, book: &BookState, k_levels: u32) -> bool {
        let (bids, asks) = book.visible_levels(k_levels as usize);
        bids == self.bids && asks == self.asks
    }
}

/// Full day ingest: parsed messages + snapshots replayed through the
/// book with classification and snapshot reconciliation.
pub struct IngestOutput {
    pub records: Vec<ClassifiedRecord>,
    pub report: IngestReport,
    pub initial_book: BookState,
    /// Liquidity vector before the first classified event.
    pub initial_state: LiquiditySnapshot,
}

/// Parse a LOBSTER message/orderbook file pair.
///
/// Returns the in-window messages with their snapshot rows and the
/// initial book seeded from the first snapshot (first message un-applied
/// when possible so it can be classified too).
pub fn parse_lobster(
    message_path: &Path,
    orderbook_path: &Path,
    cfg: &IngestConfig,
) -> Result<(Vec<(RawMessage, SnapshotRow)>, BookState, bool), IngestError> {
    let grid = TickGrid::new(cfg.tick_e4);
    let messages = parse_message_file(message_path)?;
    let snapshots = parse_orderbook_file(orderbook_path, cfg.k_levels, &grid)?;
    if messages.len() != snapshots.len() {
        return Err(IngestError::RowCountMismatch {
            messages: messages.len(),
            snapshots: snapshots.len(),
        });
    }
    let rows: Vec<(RawMessage, SnapshotRow)> = messages
        .into_iter()
        .zip(snapshots)
        .filter(|(m, _)| m.time >= cfg.window.0 && m.time <= cfg.window.1)
        .collect();
    let Some((first_msg, first_snap)) = rows.first() else {
        return Err(IngestError::NoSeedSnapshot);
    };
    let mut book = first_snap.to_book(cfg.k_levels)?;
    // Un-apply the first message so the replay can classify it; fall back
    // to the snapshot state when the inverse is not reconstructible.
    let mut seeded_only = true;
    if let Some(kind) = first_msg.delta_kind() {
        if let Ok(price) = grid.ticks_from_e4(first_msg.price_e4) {
            let sign = first_msg.side().sign();
            let resting = book.signed_size(price);
            let undone = match kind {
                DeltaKind::Insert => {
                    let new = resting - sign * first_msg.size as i64;
                    // Removing the insert must not flip the queue sign.
                    (new == 0 || new.signum() == resting.signum()).then_some(new)
                }
                DeltaKind::Cancel | DeltaKind::Trade => {
                    let new = resting + sign * first_msg.size as i64;
                    (resting == 0 || new.signum() == resting.signum()).then_some(new)
                }
            };
            if let Some(new) = undone {
                let mut candidate = book.clone();
                candidate.set_queue(price, new);
                if candidate.derive_reference_from_mid().is_ok() {
                    book = candidate;
                    seeded_only = false;
                }
            }
        }
    }
    Ok((rows, book, seeded_only))
}

/// Replay parsed rows through the book, classifying every message.
pub fn replay_and_classify(
    rows: &[(RawMessage, SnapshotRow)],
    initial_book: BookState,
    seeded_only: bool,
    cfg: &IngestConfig,
) -> Result<IngestOutput, IngestError> {
    let grid = TickGrid::new(cfg.tick_e4);
    let mut book = initial_book.clone();
    let mut report = IngestReport {
        seeded_snapshot_only: seeded_only,
        ..IngestReport::default()
    };
    let initial_state = LiquiditySnapshot::capture(&book, cfg.k_levels, &grid);
    let mut records = Vec::with_capacity(rows.len());
    for (idx, (msg, snap)) in rows.iter().enumerate() {
        report.messages_read += 1;
        let skip = match msg.msg_type {
            5 => Some(SkipReason::HiddenExecution),
            6 => Some(SkipReason::Cross),
            7 => Some(SkipReason::Halt),
            _ => None,
        };
        if let Some(reason) = skip {
            report.count_skip(reason);
            continue;
        }
        if idx == 0 && seeded_only {
            // Book already reflects this message; nothing to classify.
            report.count_skip(SkipReason::Unclassifiable);
            continue;
        }
        let kind = msg.delta_kind().expect("types 1-4 have deltas");
        let classified = grid
            .ticks_from_e4(msg.price_e4)
            .ok()
            .map(|price_ticks| BookDelta {
                side: msg.side(),
                price_ticks,
                size: msg.size,
                kind,
            })
            .and_then(|delta| {
                let after = apply_delta(&book, &delta).ok()?;
                Some((delta, after))
            });
        match classified {
            Some((delta, after)) => {
                let mut rebased = *msg;
                rebased.time = msg.time - cfg.window.0;
                match classify(&rebased, &delta, &book, &after, &grid) {
                    Ok(event) => {
                        book = after;
                        if cfg.resync && !snap.matches(&book, cfg.k_levels) {
                            report.drift_resyncs += 1;
                            book = resync(&book, snap, cfg.k_levels)?;
                        }
                        let state_after = LiquiditySnapshot::capture(&book, cfg.k_levels, &grid);
                        report.classified += 1;
                        records.push(ClassifiedRecord { event, state_after });
                    }
                    Err(reason) => {
                        report.count_skip(reason);
                        book = after;
                        if cfg.resync && !snap.matches(&book, cfg.k_levels) {
                            report.drift_resyncs += 1;
                            book = resync(&book, snap, cfg.k_levels)?;
                        }
                    }
                }
            }
            None => {
                // Unreplayable message: resynchronize from its snapshot.
                report.count_skip(SkipReason::Unclassifiable);
                report.drift_resyncs += 1;
                book = resync(&book, snap, cfg.k_levels)?;
            }
        }
    }
    let totals = event_counts(records.iter().map(|r| &r.event), cfg.k_levels);
    report.per_type = (1..=EventType::dimension(cfg.k_levels))
        .map(|i| {
            (
                EventType::from_index(i, cfg.k_levels).unwrap().to_string(),
                totals.counts[i - 1],
                totals.size_sums[i - 1],
            )
        })
        .collect();
    Ok(IngestOutput {
        records,
        report,
        initial_book,
        initial_state,
    })
}

fn resync(book: &BookState, snap: &SnapshotRow, k_levels: u32) -> Result<BookState, IngestError> {
    let mut next = snap.to_book(k_levels)?;
    // Preserve the reference-price memory across the resync.
    next.set_reference_from_previous(book.ref_half_ticks())?;
    Ok(next)
}

/// Convenience wrapper: parse and replay one trading day.
pub fn ingest_day(
    message_path: &Path,
    orderbook_path: &Path,
    cfg: &IngestConfig,
) -> Result<IngestOutput, IngestError> {
    let (rows, book, seeded_only) = parse_lobster(message_path, orderbook_path, cfg)?;
    replay_and_classify(&rows, book, seeded_only, cfg)
}

/// Write the classified stream as CSV: time, event_index, size,
/// liquidity_state. Times use shortest round-trip formatting so re-read
/// values are bit exact.
pub fn write_classified_csv(
    path: &Path,
    records: &[ClassifiedRecord],
    k_levels: u32,
) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(
            f,
            "{},{},{},{}",
            r.event.time,
            r.event.event_type.index(k_levels),
            r.event.size,
            r.event.liquidity_state
        )?;
    }
    Ok(())
}

pub fn write_report_json(path: &Path, report: &IngestReport) -> std::io::Result<()> {
    let f = std::io::BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, report).map_err(std::io::Error::other)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::book::BookState;

    const K: u32 = 3;

    #[test]
    fn taxonomy_is_a_bijection() {
        let d = EventType::dimension(K);
        assert_eq!(d, 24);
        for idx in 1..=d {
            let ty = EventType::from_index(idx, K).unwrap();
            assert_eq!(ty.index(K), idx);
            let rt: EventType = ty.to_string().parse().unwrap();
            assert_eq!(rt, ty);
        }
        assert_eq!(EventType::from_index(0, K), None);
        assert_eq!(EventType::from_index(25, K), None);
    }

    #[test]
    fn taxonomy_ordering_matches_the_k3_layout() {
        let name = |i: usize| EventType::from_index(i, K).unwrap().to_string();
        assert_eq!(name(1), "-3(i)");
        assert_eq!(name(3), "-3(t)");
        assert_eq!(name(7), "-1(i)");
        assert_eq!(name(9), "-1(t)");
        assert_eq!(name(10), "+1(i)");
        assert_eq!(name(18), "+3(t)");
        assert_eq!(name(19), "p-(t)");
        assert_eq!(name(21), "p-(i)");
        assert_eq!(name(22), "p+(t)");
        assert_eq!(name(24), "p+(i)");
    }

    fn book(levels: &[(Side, i64, u64)]) -> BookState {
        BookState::from_levels(levels.iter().copied(), K).unwrap()
    }

    fn grid() -> TickGrid {
        TickGrid::new(100)
    }

    fn msg(kind: DeltaKind, side: Side, price_ticks: i64, size: u64) -> (RawMessage, BookDelta) {
        let msg_type = match kind {
            DeltaKind::Insert => 1,
            DeltaKind::Cancel => 3,
            DeltaKind::Trade => 4,
        };
        (
            RawMessage {
                time: 1.0,
                msg_type,
                order_id: 1,
                size,
                price_e4: price_ticks * 100,
                direction: if side == Side::Bid { 1 } else { -1 },
            },
            BookDelta {
                side,
                price_ticks,
                size,
                kind,
            },
        )
    }

    fn run(b: &BookState, kind: DeltaKind, side: Side, price: i64, size: u64) -> Classification {
        let (m, d) = msg(kind, side, price, size);
        let after = apply_delta(b, &d).unwrap();
        classify(&m, &d, b, &after, &grid())
    }

    #[test]
    fn in_spread_ask_insert_is_a_downward_price_move() {
        // spread 3 ticks: ref at the mid 100.015
        let b = book(&[(Side::Bid, 10000, 100), (Side::Ask, 10003, 100)]);
        assert_eq!(b.ref_half_ticks(), 20003);
        let ev = run(&b, DeltaKind::Insert, Side::Ask, 10001, 40).unwrap();
        assert_eq!(
            ev.event_type,
            EventType::PriceChange {
                up: false,
                action: EventAction::Insert
            }
        );
        assert_eq!(ev.size, 1);
        // pre-event spread: 3 ticks = $0.03 = 300 e4-units
        assert_eq!(ev.liquidity_state, 300);
        assert!(ev.book_before.spread_ticks() > 1);
    }

    #[test]
    fn non_depleting_trade_keeps_level_classification() {
        let b = book(&[(Side::Bid, 10000, 100), (Side::Ask, 10001, 100)]);
        let ev = run(&b, DeltaKind::Trade, Side::Ask, 10001, 40).unwrap();
        assert_eq!(
            ev.event_type,
            EventType::Level {
                level: 1,
                action: EventAction::Trade
            }
        );
        assert_eq!(ev.size, 40);
        assert_eq!(ev.liquidity_state, 100);
    }

    #[test]
    fn cancel_of_entire_best_bid_moves_price_down() {
        // spread 2 even with ref on the upper candidate: cancelling the
        // best bid moves the reference down.
        let mut b = book(&[
            (Side::Bid, 10000, 60),
            (Side::Bid, 9999, 80),
            (Side::Ask, 10002, 100),
        ]);
        b.force_reference(20003);
        let ev = run(&b, DeltaKind::Cancel, Side::Bid, 10000, 60).unwrap();
        assert_eq!(
            ev.event_type,
            EventType::PriceChange {
                up: false,
                action: EventAction::Cancel
            }
        );
        assert_eq!(ev.size, 1);
        assert_eq!(ev.liquidity_state, 60); // pre-event best-bid queue
    }

    #[test]
    fn depleting_trade_without_reference_move_is_a_level_event() {
        // spread 1: depleting the best ask widens the spread but the
        // reference stays on the closer candidate.
        let b = book(&[
            (Side::Bid, 10000, 100),
            (Side::Ask, 10001, 50),
            (Side::Ask, 10002, 70),
        ]);
        let ev = run(&b, DeltaKind::Trade, Side::Ask, 10001, 50).unwrap();
        assert_eq!(
            ev.event_type,
            EventType::Level {
                level: 1,
                action: EventAction::Trade
            }
        );
        assert_eq!(ev.size, 50);
    }

    #[test]
    fn deep_events_are_skipped() {
        let b = book(&[(Side::Bid, 10000, 100), (Side::Ask, 10001, 100)]);
        let res = run(&b, DeltaKind::Insert, Side::Ask, 10008, 10);
        assert_eq!(res.unwrap_err(), SkipReason::BeyondLevelK);
    }

    #[test]
    fn totals_accumulate_counts_and_sizes() {
        let b = book(&[(Side::Bid, 10000, 100), (Side::Ask, 10001, 100)]);
        let ev = run(&b, DeltaKind::Insert, Side::Ask, 10001, 100).unwrap();
        let totals = event_counts([&ev], K);
        let idx = EventType::Level {
            level: 1,
            action: EventAction::Insert,
        }
        .index(K);
        assert_eq!(totals.counts[idx - 1], 1);
        assert_eq!(totals.size_sums[idx - 1], 100);
        assert_eq!(totals.counts.iter().sum::<u64>(), 1);
        let empty = event_counts([], K);
        assert!(empty.counts.iter().all(|&c| c == 0));
    }
}
