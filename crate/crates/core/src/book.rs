//! Level-K order book state and the reference price rule.
//!
//! Prices are held as integer tick counts and the reference price as an
//! integer count of *half* ticks, so the odd/even spread arithmetic is
//! exact. Bid queue sizes are stored negative, ask sizes positive; a
//! depleted queue is removed from the map entirely.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BookError {
    #[error("cancel/trade of {requested} shares exceeds resting size {resting} at tick {price_ticks}")]
    OversizedReduction {
        price_ticks: i64,
        resting: u64,
        requested: u64,
    },
    #[error("price {price_e4} (1e-4 units) is not on the {tick_e4} tick grid")]
    OffGridPrice { price_e4: i64, tick_e4: i64 },
    #[error("book has no resting {0:?} orders")]
    EmptySide(Side),
    #[error("price at tick {0} equals the on-grid reference price")]
    PriceAtReference(i64),
    #[error("price at tick {price_ticks} is on the wrong side of the reference for {side:?}")]
    SideInconsistent { price_ticks: i64, side: Side },
    #[error("{side:?} insert at tick {price_ticks} conflicts with resting orders of the opposite side")]
    SideConflict { price_ticks: i64, side: Side },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Bid,
    Ask,
}

impl Side {
    pub fn sign(self) -> i64 {
        match self {
            Side::Bid => -1,
            Side::Ask => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeltaKind {
    Insert,
    Cancel,
    Trade,
}

/// One atomic change to a single price level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookDelta {
    pub side: Side,
    pub price_ticks: i64,
    pub size: u64,
    pub kind: DeltaKind,
}

/// Tick grid: conversions between 1e-4 currency units and tick counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickGrid {
    /// Tick size in 1e-4 currency units ($0.01 => 100).
    pub tick_e4: i64,
}

impl TickGrid {
    pub fn new(tick_e4: i64) -> Self {
        assert!(tick_e4 > 0, "tick size must be positive");
        TickGrid { tick_e4 }
    }

    pub fn ticks_from_e4(&self, price_e4: i64) -> Result<i64, BookError> {
        if price_e4 % self.tick_e4 != 0 {
            return Err(BookError::OffGridPrice {
                price_e4,
                tick_e4: self.tick_e4,
            });
        }
        Ok(price_e4 / self.tick_e4)
    }

    pub fn e4_from_ticks(&self, ticks: i64) -> i64 {
        ticks * self.tick_e4
    }

    /// Reference price in 1e-4 units (may land between grid points).
    pub fn e4_from_half_ticks(&self, half_ticks: i64) -> f64 {
        half_ticks as f64 * self.tick_e4 as f64 / 2.0
    }
}

/// The market snapshot: signed queue sizes per tick plus the reference price.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookState {
    /// price in ticks -> signed resting size (bids negative, asks positive).
    queues: BTreeMap<i64, i64>,
    /// Reference price in half-tick units.
    ref_half_ticks: i64,
    k_levels: u32,
}

impl BookState {
    /// Build a state from (side, price_ticks, size) levels; the reference
    /// price is derived from the quotes with the arithmetic mid as the
    /// previous value.
    pub fn from_levels(
        levels: impl IntoIterator<Item = (Side, i64, u64)>,
        k_levels: u32,
    ) -> Result<Self, BookError> {
        let mut queues = BTreeMap::new();
        for (side, price, size) in levels {
            if size == 0 {
                continue;
            }
            *queues.entry(price).or_insert(0) += side.sign() * size as i64;
        }
        queues.retain(|_, v| *v != 0);
        let mut state = BookState {
            queues,
            ref_half_ticks: 0,
            k_levels,
        };
        let bb = state.best_bid().ok_or(BookError::EmptySide(Side::Bid))?;
        let ba = state.best_ask().ok_or(BookError::EmptySide(Side::Ask))?;
        // Previous value unknown at seeding: use the exact mid (ties resolve low).
        state.ref_half_ticks = reference_rule(bb, ba, bb + ba);
        Ok(state)
    }

    pub fn k_levels(&self) -> u32 {
        self.k_levels
    }

    pub fn ref_half_ticks(&self) -> i64 {
        self.ref_half_ticks
    }

    /// Signed size at a tick (0 if empty).
    pub fn signed_size(&self, price_ticks: i64) -> i64 {
        self.queues.get(&price_ticks).copied().unwrap_or(0)
    }

    pub fn queue_magnitude(&self, price_ticks: i64) -> u64 {
        self.signed_size(price_ticks).unsigned_abs()
    }

    pub fn best_bid(&self) -> Option<i64> {
        self.queues
            .iter()
            .rev()
            .find(|(_, &v)| v < 0)
            .map(|(&p, _)| p)
    }

    pub fn best_ask(&self) -> Option<i64> {
        self.queues.iter().find(|(_, &v)| v > 0).map(|(&p, _)| p)
    }

    pub fn best_bid_size(&self) -> u64 {
        self.best_bid().map_or(0, |p| self.queue_magnitude(p))
    }

    pub fn best_ask_size(&self) -> u64 {
        self.best_ask().map_or(0, |p| self.queue_magnitude(p))
    }

    /// Spread in ticks between best quotes.
    pub fn spread_ticks(&self) -> Option<i64> {
        Some(self.best_ask()? - self.best_bid()?)
    }

    /// First grid tick strictly above the reference price.
    pub fn first_ask_tick(&self) -> i64 {
        div_floor(self.ref_half_ticks, 2) + 1
    }

    /// First grid tick strictly below the reference price.
    pub fn first_bid_tick(&self) -> i64 {
        div_ceil(self.ref_half_ticks, 2) - 1
    }

    /// Tick price of relative level `level` (+1 first ask, -1 first bid).
    pub fn level_price(&self, level: i32) -> i64 {
        assert!(level != 0);
        if level > 0 {
            self.first_ask_tick() + (level - 1) as i64
        } else {
            self.first_bid_tick() + (level + 1) as i64
        }
    }

    /// Unsigned queue size at relative level `level`.
    pub fn level_size(&self, level: i32) -> u64 {
        self.queue_magnitude(self.level_price(level))
    }

    /// The best `k` non-empty levels per side, nearest first, as
    /// (price_ticks, size) pairs. Used for snapshot reconciliation.
    pub fn visible_levels(&self, k: usize) -> (Vec<(i64, u64)>, Vec<(i64, u64)>) {
        let asks = self
            .queues
            .iter()
            .filter(|(_, &v)| v > 0)
            .take(k)
            .map(|(&p, &v)| (p, v as u64))
            .collect();
        let bids = self
            .queues
            .iter()
            .rev()
            .filter(|(_, &v)| v < 0)
            .take(k)
            .map(|(&p, &v)| (p, v.unsigned_abs()))
            .collect();
        (bids, asks)
    }

    /// Raw queue edit without reference-price recomputation. The ingest
    /// path uses this for snapshot resyncs and first-message un-apply.
    pub fn set_queue(&mut self, price_ticks: i64, signed_size: i64) {
        if signed_size == 0 {
            self.queues.remove(&price_ticks);
        } else {
            self.queues.insert(price_ticks, signed_size);
        }
    }

    /// Recompute the reference price from current quotes, keeping the
    /// stored value as the previous one.
    pub fn refresh_reference(&mut self) -> Result<(), BookError> {
        self.ref_half_ticks = update_reference_price(self, self.ref_half_ticks)?;
        Ok(())
    }

    /// Recompute the reference price with an explicit previous value.
    pub fn set_reference_from_previous(&mut self, previous_half_ticks: i64) -> Result<(), BookError> {
        self.ref_half_ticks = update_reference_price(self, previous_half_ticks)?;
        Ok(())
    }

    /// Re-derive the reference price as if freshly seeded: the previous
    /// value is taken to be the exact mid (ties resolve low).
    pub fn derive_reference_from_mid(&mut self) -> Result<(), BookError> {
        let bb = self.best_bid().ok_or(BookError::EmptySide(Side::Bid))?;
        let ba = self.best_ask().ok_or(BookError::EmptySide(Side::Ask))?;
        self.ref_half_ticks = reference_rule(bb, ba, bb + ba);
        Ok(())
    }

    /// Overwrite the reference price without consulting the quotes.
    /// Intended for seeding states in tests and simulations.
    pub fn force_reference(&mut self, half_ticks: i64) {
        self.ref_half_ticks = half_ticks;
    }

    pub fn invariants_hold(&self) -> bool {
        let (Some(bb), Some(ba)) = (self.best_bid(), self.best_ask()) else {
            return false;
        };
        let ref_ht = self.ref_half_ticks;
        if !(2 * bb < ref_ht && ref_ht < 2 * ba) {
            return false;
        }
        self.queues
            .iter()
            .all(|(&p, &v)| if v < 0 { 2 * p < ref_ht } else { 2 * p > ref_ht })
    }
}

fn div_floor(a: i64, b: i64) -> i64 {
    let d = a / b;
    if (a % b != 0) && ((a < 0) != (b < 0)) {
        d - 1
    } else {
        d
    }
}

fn div_ceil(a: i64, b: i64) -> i64 {
    div_floor(a + b - 1, b)
}

/// The reference-price rule on half-tick integers: odd spreads take the
/// exact mid; even spreads take mid +/- half a tick, whichever is closer
/// to the previous value, preferring the lower candidate on exact ties.
fn reference_rule(best_bid: i64, best_ask: i64, previous_half_ticks: i64) -> i64 {
    let mid_ht = best_bid + best_ask;
    if (best_ask - best_bid) % 2 != 0 {
        return mid_ht;
    }
    let lo = mid_ht - 1;
    let hi = mid_ht + 1;
    if (previous_half_ticks - lo).abs() <= (previous_half_ticks - hi).abs() {
        lo
    } else {
        hi
    }
}

/// Recompute the reference price (in half ticks) after a book change.
pub fn update_reference_price(state: &BookState, previous_half_ticks: i64) -> Result<i64, BookError> {
    let bb = state.best_bid().ok_or(BookError::EmptySide(Side::Bid))?;
    let ba = state.best_ask().ok_or(BookError::EmptySide(Side::Ask))?;
    Ok(reference_rule(bb, ba, previous_half_ticks))
}

/// Map a tick price to its relative level: `+i` for the i-th tick strictly
/// above the reference, `-i` strictly below. The magnitude may exceed K;
/// callers filter.
pub fn relative_level(state: &BookState, price_ticks: i64, side: Side) -> Result<i32, BookError> {
    let ref_ht = state.ref_half_ticks;
    let price_ht = 2 * price_ticks;
    if price_ht == ref_ht {
        return Err(BookError::PriceAtReference(price_ticks));
    }
    match side {
        Side::Ask => {
            if price_ht < ref_ht {
                return Err(BookError::SideInconsistent { price_ticks, side });
            }
            Ok((price_ticks - state.first_ask_tick() + 1) as i32)
        }
        Side::Bid => {
            if price_ht > ref_ht {
                return Err(BookError::SideInconsistent { price_ticks, side });
            }
            Ok(-((state.first_bid_tick() - price_ticks + 1) as i32))
        }
    }
}

/// Apply one delta and recompute the reference price.
pub fn apply_delta(state: &BookState, delta: &BookDelta) -> Result<BookState, BookError> {
    assert!(delta.size > 0, "delta size must be nonzero");
    let mut next = state.clone();
    let resting = next.signed_size(delta.price_ticks);
    let sign = delta.side.sign();
    match delta.kind {
        DeltaKind::Insert => {
            if resting != 0 && resting.signum() != sign {
                return Err(BookError::SideConflict {
                    price_ticks: delta.price_ticks,
                    side: delta.side,
                });
            }
            next.set_queue(delta.price_ticks, resting + sign * delta.size as i64);
        }
        DeltaKind::Cancel | DeltaKind::Trade => {
            if resting == 0 || resting.signum() != sign || resting.unsigned_abs() < delta.size {
                return Err(BookError::OversizedReduction {
                    price_ticks: delta.price_ticks,
                    resting: if resting.signum() == sign {
                        resting.unsigned_abs()
                    } else {
                        0
                    },
                    requested: delta.size,
                });
            }
            next.set_queue(delta.price_ticks, resting - sign * delta.size as i64);
        }
    }
    next.refresh_reference()?;
    debug_assert!(next.invariants_hold());
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TickGrid {
        TickGrid::new(100)
    }

    fn book(levels: &[(Side, i64, u64)]) -> BookState {
        BookState::from_levels(levels.iter().copied(), 3).unwrap()
    }

    #[test]
    fn mid_price_on_odd_spread() {
        // $100.00 bid / $100.01 ask -> ref $100.005
        let b = book(&[(Side::Bid, 10000, 100), (Side::Ask, 10001, 100)]);
        assert_eq!(b.ref_half_ticks(), 20001);
        assert_eq!(grid().e4_from_half_ticks(20001), 1_000_050.0);
    }

    #[test]
    fn even_spread_prefers_closer_candidate() {
        let mut b = book(&[(Side::Bid, 10000, 100), (Side::Ask, 10002, 100)]);
        // candidates 100.005 / 100.015; previous 100.005 stays
        assert_eq!(update_reference_price(&b, 20001).unwrap(), 20001);
        // previous 100.015 stays on the upper candidate
        assert_eq!(update_reference_price(&b, 20003).unwrap(), 20003);
        // exact tie (previous at the even-spread mid) keeps the lower
        assert_eq!(update_reference_price(&b, 20002).unwrap(), 20001);
        b.ref_half_ticks = 20001;
        assert!(b.invariants_hold());
    }

    #[test]
    fn empty_book_insert_sequence() {
        let mut b = BookState {
            queues: BTreeMap::new(),
            ref_half_ticks: 0,
            k_levels: 3,
        };
        b.set_queue(10001, 100);
        assert!(update_reference_price(&b, 0).is_err());
        b.set_queue(10000, -100);
        b.ref_half_ticks = update_reference_price(&b, 20001).unwrap();
        assert_eq!(b.ref_half_ticks, 20001);
        assert_eq!(b.best_bid(), Some(10000));
        assert_eq!(b.best_ask(), Some(10001));
    }

    #[test]
    fn depleting_trade_moves_best_ask() {
        let b = book(&[
            (Side::Bid, 10000, 100),
            (Side::Ask, 10001, 50),
            (Side::Ask, 10002, 70),
        ]);
        let next = apply_delta(
            &b,
            &BookDelta {
                side: Side::Ask,
                price_ticks: 10001,
                size: 50,
                kind: DeltaKind::Trade,
            },
        )
        .unwrap();
        assert_eq!(next.best_ask(), Some(10002));
        assert_eq!(next.queue_magnitude(10001), 0);
        // spread 2 even, previous 100.005 -> stays
        assert_eq!(next.ref_half_ticks(), 20001);
    }

    #[test]
    fn even_spread_after_neutral_event_keeps_previous() {
        // spread 4 ticks: $99.98 bid / $100.02 ask, previous ref $100.005
        let mut b = book(&[(Side::Bid, 9998, 100), (Side::Ask, 10002, 100)]);
        b.ref_half_ticks = 20001;
        let next = apply_delta(
            &b,
            &BookDelta {
                side: Side::Bid,
                price_ticks: 9998,
                size: 10,
                kind: DeltaKind::Insert,
            },
        )
        .unwrap();
        // candidates 99.995 and 100.005; 100.005 is closer to the previous
        assert_eq!(next.ref_half_ticks(), 20001);
    }

    #[test]
    fn relative_levels_around_half_tick_reference() {
        let b = book(&[(Side::Bid, 10000, 100), (Side::Ask, 10001, 100)]);
        assert_eq!(b.ref_half_ticks(), 20001);
        assert_eq!(relative_level(&b, 10001, Side::Ask).unwrap(), 1);
        assert_eq!(relative_level(&b, 9998, Side::Bid).unwrap(), -3);
        assert_eq!(relative_level(&b, 10005, Side::Ask).unwrap(), 5);
        assert!(matches!(
            relative_level(&b, 10001, Side::Bid),
            Err(BookError::SideInconsistent { .. })
        ));
    }

    #[test]
    fn on_grid_reference_is_detected() {
        let mut b = book(&[(Side::Bid, 9999, 100), (Side::Ask, 10001, 100)]);
        b.ref_half_ticks = 20000; // seeded on-grid at $100.00
        assert!(matches!(
            relative_level(&b, 10000, Side::Ask),
            Err(BookError::PriceAtReference(10000))
        ));
        assert_eq!(relative_level(&b, 10001, Side::Ask).unwrap(), 1);
        assert_eq!(relative_level(&b, 9999, Side::Bid).unwrap(), -1);
    }

    #[test]
    fn oversized_reduction_rejected() {
        let b = book(&[(Side::Bid, 10000, 100), (Side::Ask, 10001, 30)]);
        let err = apply_delta(
            &b,
            &BookDelta {
                side: Side::Ask,
                price_ticks: 10001,
                size: 31,
                kind: DeltaKind::Cancel,
            },
        )
        .unwrap_err();
        assert!(matches!(err, BookError::OversizedReduction { resting: 30, .. }));
    }

    #[test]
    fn off_grid_price_rejected() {
        assert!(matches!(
            grid().ticks_from_e4(1_000_050),
            Err(BookError::OffGridPrice { .. })
        ));
        assert_eq!(grid().ticks_from_e4(1_000_100).unwrap(), 10001);
    }
}
