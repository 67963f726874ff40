//! Limit order book on a discrete price grid.
//!
//! Prices live on `p_min + k * tick` for integer `k` in `0..=k_max`. Quantities
//! are integer lots. Each price level is a FIFO queue of resting orders tagged
//! with the submitting agent, so fills can be attributed to makers and takers.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BookError {
    #[error("invalid price grid: {0}")]
    InvalidGrid(String),
    #[error("tick {tick} outside grid [0, {k_max}]")]
    TickOutOfRange { tick: i64, k_max: usize },
    #[error("order quantity must be positive")]
    ZeroQuantity,
    #[error("{side:?} limit at tick {tick} would cross the book")]
    Crossing { side: Side, tick: usize },
    #[error("insufficient liquidity: requested {requested}, available {available}")]
    InsufficientLiquidity { requested: u64, available: u64 },
    #[error("no resting volume on the {0:?} side")]
    EmptySide(Side),
}

/// Identifier of the agent that submitted an order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentId(pub u32);

pub type OrderId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Bid,
    Ask,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Bid => Side::Ask,
            Side::Ask => Side::Bid,
        }
    }
}

/// Direction of an aggressive order. A buy consumes the ask side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Buy,
    Sell,
}

impl Direction {
    pub fn consumed_side(self) -> Side {
        match self {
            Direction::Buy => Side::Ask,
            Direction::Sell => Side::Bid,
        }
    }

    pub fn sign(self) -> i64 {
        match self {
            Direction::Buy => 1,
            Direction::Sell => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceGrid {
    p_min: f64,
    p_max: f64,
    tick: f64,
    k_max: usize,
}

impl PriceGrid {
    pub fn new(p_min: f64, p_max: f64, tick: f64) -> Result<Self, BookError> {
        if !(p_min.is_finite() && p_max.is_finite() && tick.is_finite()) {
            return Err(BookError::InvalidGrid("non-finite bounds".into()));
        }
        if tick <= 0.0 {
            return Err(BookError::InvalidGrid("tick must be positive".into()));
        }
        if p_max <= p_min {
            return Err(BookError::InvalidGrid("p_max must exceed p_min".into()));
        }
        // Small slack so that ranges which are exact multiples of the tick in
        // decimal do not lose their last level to binary rounding.
        let k_max = ((p_max - p_min) / tick + 1e-9).floor() as usize;
        Ok(PriceGrid { p_min, p_max, tick, k_max })
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn tick(&self) -> f64 {
        self.tick
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn n_levels(&self) -> usize {
        self.k_max + 1
    }

    pub fn price(&self, tick: usize) -> f64 {
        self.p_min + tick as f64 * self.tick
    }

    /// Nearest grid index of a price, unclamped.
    pub fn nearest_tick(&self, price: f64) -> i64 {
        ((price - self.p_min) / self.tick).round() as i64
    }

    pub fn check_tick(&self, tick: i64) -> Result<usize, BookError> {
        if tick < 0 || tick as usize > self.k_max {
            Err(BookError::TickOutOfRange { tick, k_max: self.k_max })
        } else {
            Ok(tick as usize)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RestingOrder {
    pub id: OrderId,
    pub originator: AgentId,
    pub qty: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fill {
    pub tick: usize,
    pub price: f64,
    pub qty: u64,
    pub maker: AgentId,
    pub maker_order: OrderId,
    pub taker: AgentId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub direction: Direction,
    pub fills: Vec<Fill>,
}

impl Execution {
    pub fn filled_qty(&self) -> u64 {
        self.fills.iter().map(|f| f.qty).sum()
    }

    pub fn notional(&self) -> f64 {
        self.fills.iter().map(|f| f.qty as f64 * f.price).sum()
    }

    /// Volume-weighted average execution price, `None` for an empty execution.
    pub fn vwap(&self) -> Option<f64> {
        let q = self.filled_qty();
        (q > 0).then(|| self.notional() / q as f64)
    }
}

#[derive(Debug, Clone, Default)]
struct SideBook {
    levels: Vec<VecDeque<RestingOrder>>,
    volume: Vec<u64>,
}

impl SideBook {
    fn new(n: usize) -> Self {
        SideBook {
            levels: vec![VecDeque::new(); n],
            volume: vec![0; n],
        }
    }
}

/// Row of a depth snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub tick: usize,
    pub side: Side,
    pub volume: u64,
}

#[derive(Debug, Clone)]
pub struct OrderBook {
    grid: PriceGrid,
    bids: SideBook,
    asks: SideBook,
    best_bid: Option<usize>,
    best_ask: Option<usize>,
    next_id: OrderId,
}

impl OrderBook {
    pub fn new(grid: PriceGrid) -> Self {
        let n = grid.n_levels();
        OrderBook {
            grid,
            bids: SideBook::new(n),
            asks: SideBook::new(n),
            best_bid: None,
            best_ask: None,
            next_id: 1,
        }
    }

    pub fn grid(&self) -> &PriceGrid {
        &self.grid
    }

    fn side(&self, side: Side) -> &SideBook {
        match side {
            Side::Bid => &self.bids,
            Side::Ask => &self.asks,
        }
    }

    fn side_mut(&mut self, side: Side) -> &mut SideBook {
        match side {
            Side::Bid => &mut self.bids,
            Side::Ask => &mut self.asks,
        }
    }

    pub fn best_tick(&self, side: Side) -> Option<usize> {
        match side {
            Side::Bid => self.best_bid,
            Side::Ask => self.best_ask,
        }
    }

    pub fn best_bid(&self) -> Option<f64> {
        self.best_bid.map(|k| self.grid.price(k))
    }

    pub fn best_ask(&self) -> Option<f64> {
        self.best_ask.map(|k| self.grid.price(k))
    }

    pub fn mid(&self) -> Option<f64> {
        Some(0.5 * (self.best_bid()? + self.best_ask()?))
    }

    /// Best ask minus best bid.
    pub fn market_spread(&self) -> Option<f64> {
        Some(self.best_ask()? - self.best_bid()?)
    }

    pub fn spread_ticks(&self) -> Option<usize> {
        Some(self.best_ask? - self.best_bid?)
    }

    pub fn volume_at(&self, side: Side, tick: usize) -> u64 {
        self.side(side).volume.get(tick).copied().unwrap_or(0)
    }

    pub fn total_volume(&self, side: Side) -> u64 {
        self.side(side).volume.iter().sum()
    }

    /// Resting orders at a level in time priority.
    pub fn orders_at(&self, side: Side, tick: usize) -> impl Iterator<Item = &RestingOrder> {
        self.side(side).levels[tick].iter()
    }

    /// Full-grid volume vector for one side, indexed by tick.
    pub fn volumes(&self, side: Side) -> &[u64] {
        &self.side(side).volume
    }

    /// Non-empty levels from the touch outward as `(tick, volume)`.
    pub fn levels(&self, side: Side) -> Box<dyn Iterator<Item = (usize, u64)> + '_> {
        let vol = &self.side(side).volume;
        match (side, self.best_tick(side)) {
            (_, None) => Box::new(std::iter::empty()),
            (Side::Ask, Some(b)) => Box::new((b..vol.len()).map(move |k| (k, vol[k])).filter(|(_, v)| *v > 0)),
            (Side::Bid, Some(b)) => Box::new((0..=b).rev().map(move |k| (k, vol[k])).filter(|(_, v)| *v > 0)),
        }
    }

    pub fn levels_from_touch(&self, side: Side) -> Vec<(usize, u64)> {
        self.levels(side).collect()
    }

    /// Volumes of the first `m` non-empty levels from the touch, zero-padded.
    pub fn top_volumes(&self, side: Side, m: usize) -> Vec<u64> {
        let mut out: Vec<u64> = self.levels(side).take(m).map(|(_, v)| v).collect();
        out.resize(m, 0);
        out
    }

    fn refresh_best(&mut self, side: Side) {
        let vol = &self.side(side).volume;
        let best = match side {
            Side::Bid => vol.iter().rposition(|v| *v > 0),
            Side::Ask => vol.iter().position(|v| *v > 0),
        };
        match side {
            Side::Bid => self.best_bid = best,
            Side::Ask => self.best_ask = best,
        }
    }

    pub fn submit_limit(&mut self, side: Side, tick: i64, qty: u64, originator: AgentId) -> Result<OrderId, BookError> {
        let tick = self.grid.check_tick(tick)?;
        if qty == 0 {
            return Err(BookError::ZeroQuantity);
        }
        let crosses = match side {
            Side::Bid => self.best_ask.is_some_and(|a| tick >= a),
            Side::Ask => self.best_bid.is_some_and(|b| tick <= b),
        };
        if crosses {
            return Err(BookError::Crossing { side, tick });
        }
        let id = self.next_id;
        self.next_id += 1;
        let book = self.side_mut(side);
        book.levels[tick].push_back(RestingOrder { id, originator, qty });
        book.volume[tick] += qty;
        match side {
            Side::Bid => self.best_bid = Some(self.best_bid.map_or(tick, |b| b.max(tick))),
            Side::Ask => self.best_ask = Some(self.best_ask.map_or(tick, |a| a.min(tick))),
        }
        Ok(id)
    }

    /// Executes a market order in price-time priority. The order is rejected
    /// whole if the opposite side cannot fill it.
    pub fn submit_market(&mut self, direction: Direction, qty: u64, taker: AgentId) -> Result<Execution, BookError> {
        if qty == 0 {
            return Err(BookError::ZeroQuantity);
        }
        let side = direction.consumed_side();
        let available = self.total_volume(side);
        if available < qty {
            return Err(BookError::InsufficientLiquidity { requested: qty, available });
        }
        let mut remaining = qty;
        let mut fills = Vec::new();
        while remaining > 0 {
            let tick = self.best_tick(side).expect("volume checked above");
            let price = self.grid.price(tick);
            let book = self.side_mut(side);
            let level = &mut book.levels[tick];
            while remaining > 0 {
                let Some(front) = level.front_mut() else { break };
                let take = front.qty.min(remaining);
                fills.push(Fill {
                    tick,
                    price,
                    qty: take,
                    maker: front.originator,
                    maker_order: front.id,
                    taker,
                });
                front.qty -= take;
                remaining -= take;
                book.volume[tick] -= take;
                if front.qty == 0 {
                    level.pop_front();
                }
            }
            if book.volume[tick] == 0 {
                self.refresh_best(side);
            }
        }
        Ok(Execution { direction, fills })
    }

    /// Removes up to `qty` lots of `originator`'s resting volume at a level,
    /// newest first, and returns the quantity actually cancelled.
    pub fn cancel(&mut self, side: Side, tick: i64, qty: u64, originator: AgentId) -> Result<u64, BookError> {
        let tick = self.grid.check_tick(tick)?;
        let book = self.side_mut(side);
        let level = &mut book.levels[tick];
        let mut remaining = qty;
        let mut i = level.len();
        while remaining > 0 && i > 0 {
            i -= 1;
            if level[i].originator != originator {
                continue;
            }
            let take = level[i].qty.min(remaining);
            level[i].qty -= take;
            remaining -= take;
            if level[i].qty == 0 {
                level.remove(i);
            }
        }
        let cancelled = qty - remaining;
        book.volume[tick] -= cancelled;
        if book.volume[tick] == 0 {
            self.refresh_best(side);
        }
        Ok(cancelled)
    }

    /// Execution VWAP of a hypothetical market order without touching the book.
    pub fn vwap_for(&self, direction: Direction, qty: u64) -> Result<f64, BookError> {
        if qty == 0 {
            return Err(BookError::ZeroQuantity);
        }
        let side = direction.consumed_side();
        let mut remaining = qty;
        let mut notional = 0.0;
        for (tick, vol) in self.levels(side) {
            let take = vol.min(remaining);
            notional += take as f64 * self.grid.price(tick);
            remaining -= take;
            if remaining == 0 {
                return Ok(notional / qty as f64);
            }
        }
        Err(BookError::InsufficientLiquidity {
            requested: qty,
            available: qty - remaining,
        })
    }

    /// Distance between the VWAP of a size-`qty` market order and the mid.
    pub fn walk_cost(&self, direction: Direction, qty: u64) -> Result<f64, BookError> {
        let mid = self
            .mid()
            .ok_or(BookError::EmptySide(if self.best_bid.is_none() { Side::Bid } else { Side::Ask }))?;
        Ok((self.vwap_for(direction, qty)? - mid).abs())
    }

    /// Non-empty levels of both sides, bids from the touch then asks from the touch.
    pub fn snapshot(&self) -> Vec<SnapshotRow> {
        let mut rows = Vec::new();
        for side in [Side::Bid, Side::Ask] {
            for (tick, volume) in self.levels_from_touch(side) {
                rows.push(SnapshotRow { tick, side, volume });
            }
        }
        rows
    }

    /// Depth snapshot as CSV with header `tick,side,volume`.
    pub fn snapshot_csv(&self) -> String {
        let mut out = String::from("tick,side,volume\n");
        for r in self.snapshot() {
            let s = match r.side {
                Side::Bid => "bid",
                Side::Ask => "ask",
            };
            out.push_str(&format!("{},{},{}\n", r.tick, s, r.volume));
        }
        out
    }

    /// Checks the structural invariants; used by tests and the simulator.
    pub fn check_invariants(&self) -> Result<(), String> {
        for side in [Side::Bid, Side::Ask] {
            let book = self.side(side);
            for (k, level) in book.levels.iter().enumerate() {
                let sum: u64 = level.iter().map(|o| o.qty).sum();
                if sum != book.volume[k] {
                    return Err(format!("{side:?} level {k}: cached volume {} != {}", book.volume[k], sum));
                }
                if level.iter().any(|o| o.qty == 0) {
                    return Err(format!("{side:?} level {k}: zero-size resting order"));
                }
            }
        }
        let mut probe = self.clone();
        probe.refresh_best(Side::Bid);
        probe.refresh_best(Side::Ask);
        if probe.best_bid != self.best_bid || probe.best_ask != self.best_ask {
            return Err("stale best price cache".into());
        }
        if let (Some(b), Some(a)) = (self.best_bid, self.best_ask) {
            if b >= a {
                return Err(format!("crossed book: bid {b} >= ask {a}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ECN: AgentId = AgentId(0);
    const LP: AgentId = AgentId(1);

    fn grid() -> PriceGrid {
        PriceGrid::new(100.0, 101.0, 0.05).unwrap()
    }

    #[test]
    fn grid_levels() {
        let g = PriceGrid::new(1.0, 1.02, 0.00005).unwrap();
        assert_eq!(g.k_max(), 400);
        assert!(PriceGrid::new(1.0, 1.0, 0.1).is_err());
        assert!(PriceGrid::new(1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn empty_book_has_no_mid() {
        let book = OrderBook::new(grid());
        assert_eq!(book.mid(), None);
        assert_eq!(book.market_spread(), None);
    }

    #[test]
    fn walk_cost_example() {
        let g = PriceGrid::new(100.0, 101.0, 0.1).unwrap();
        let mut book = OrderBook::new(g);
        book.submit_limit(Side::Bid, 0, 5, ECN).unwrap(); // 100.0
        book.submit_limit(Side::Ask, 5, 5, ECN).unwrap(); // 100.5
        book.submit_limit(Side::Ask, 6, 5, ECN).unwrap(); // 100.6
        assert!((book.mid().unwrap() - 100.25).abs() < 1e-12);
        // VWAP of 10 lots is 100.55, mid 100.25
        assert!((book.walk_cost(Direction::Buy, 10).unwrap() - 0.30).abs() < 1e-12);
        assert!(matches!(book.walk_cost(Direction::Buy, 11), Err(BookError::InsufficientLiquidity { .. })));
    }

    #[test]
    fn crossing_limit_rejected() {
        let mut book = OrderBook::new(grid());
        book.submit_limit(Side::Ask, 10, 3, ECN).unwrap();
        book.submit_limit(Side::Bid, 8, 3, ECN).unwrap();
        assert!(matches!(book.submit_limit(Side::Bid, 10, 1, LP), Err(BookError::Crossing { .. })));
        assert!(matches!(book.submit_limit(Side::Ask, 8, 1, LP), Err(BookError::Crossing { .. })));
        assert!(book.submit_limit(Side::Bid, 9, 1, LP).is_ok());
    }

    #[test]
    fn out_of_grid_rejected() {
        let mut book = OrderBook::new(grid());
        assert!(matches!(book.submit_limit(Side::Bid, -1, 1, ECN), Err(BookError::TickOutOfRange { .. })));
        assert!(matches!(book.submit_limit(Side::Bid, 21, 1, ECN), Err(BookError::TickOutOfRange { .. })));
        assert!(matches!(book.submit_limit(Side::Bid, 3, 0, ECN), Err(BookError::ZeroQuantity)));
    }

    #[test]
    fn market_order_larger_than_depth_rejected() {
        let mut book = OrderBook::new(grid());
        book.submit_limit(Side::Ask, 10, 3, ECN).unwrap();
        let err = book.submit_market(Direction::Buy, 4, LP).unwrap_err();
        assert_eq!(err, BookError::InsufficientLiquidity { requested: 4, available: 3 });
        assert_eq!(book.volume_at(Side::Ask, 10), 3);
    }

    #[test]
    fn fifo_priority_and_attribution() {
        let mut book = OrderBook::new(grid());
        let a = book.submit_limit(Side::Ask, 10, 2, AgentId(7)).unwrap();
        let b = book.submit_limit(Side::Ask, 10, 3, AgentId(8)).unwrap();
        let ex = book.submit_market(Direction::Buy, 4, LP).unwrap();
        assert_eq!(ex.fills.len(), 2);
        assert_eq!((ex.fills[0].maker_order, ex.fills[0].qty, ex.fills[0].maker), (a, 2, AgentId(7)));
        assert_eq!((ex.fills[1].maker_order, ex.fills[1].qty, ex.fills[1].maker), (b, 2, AgentId(8)));
        assert!(ex.fills.iter().all(|f| f.taker == LP));
        assert_eq!(book.volume_at(Side::Ask, 10), 1);
    }

    #[test]
    fn market_walks_levels_and_updates_touch() {
        let mut book = OrderBook::new(grid());
        book.submit_limit(Side::Bid, 5, 2, ECN).unwrap();
        book.submit_limit(Side::Bid, 4, 2, ECN).unwrap();
        book.submit_limit(Side::Ask, 7, 1, ECN).unwrap();
        let ex = book.submit_market(Direction::Sell, 3, LP).unwrap();
        assert_eq!(ex.filled_qty(), 3);
        assert_eq!(book.best_tick(Side::Bid), Some(4));
        assert!((ex.vwap().unwrap() - (2.0 * 100.25 + 100.2) / 3.0).abs() < 1e-12);
        book.check_invariants().unwrap();
    }

    #[test]
    fn cancel_only_own_volume() {
        let mut book = OrderBook::new(grid());
        book.submit_limit(Side::Bid, 5, 2, ECN).unwrap();
        book.submit_limit(Side::Bid, 5, 4, LP).unwrap();
        assert_eq!(book.cancel(Side::Bid, 5, 10, ECN).unwrap(), 2);
        assert_eq!(book.volume_at(Side::Bid, 5), 4);
        assert_eq!(book.cancel(Side::Bid, 5, 1, LP).unwrap(), 1);
        assert_eq!(book.cancel(Side::Bid, 5, 3, LP).unwrap(), 3);
        assert_eq!(book.best_tick(Side::Bid), None);
    }

    #[test]
    fn snapshot_csv_format() {
        let mut book = OrderBook::new(grid());
        book.submit_limit(Side::Bid, 5, 2, ECN).unwrap();
        book.submit_limit(Side::Ask, 7, 1, ECN).unwrap();
        assert_eq!(book.snapshot_csv(), "tick,side,volume\n5,bid,2\n7,ask,1\n");
    }

    #[derive(Debug, Clone)]
    enum Op {
        Limit(bool, i64, u64, u32),
        Market(bool, u64, u32),
        Cancel(bool, i64, u64, u32),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (any::<bool>(), 0i64..21, 1u64..6, 0u32..3).prop_map(|(s, k, q, a)| Op::Limit(s, k, q, a)),
            (any::<bool>(), 1u64..8, 0u32..3).prop_map(|(s, q, a)| Op::Market(s, q, a)),
            (any::<bool>(), 0i64..21, 1u64..6, 0u32..3).prop_map(|(s, k, q, a)| Op::Cancel(s, k, q, a)),
        ]
    }

    proptest! {
        #[test]
        fn invariants_hold_under_random_flow(ops in proptest::collection::vec(op(), 1..120)) {
            let mut book = OrderBook::new(grid());
            let mut traded = 0u64;
            let mut added = 0u64;
            let mut cancelled = 0u64;
            for o in ops {
                match o {
                    Op::Limit(b, k, q, a) => {
                        let side = if b { Side::Bid } else { Side::Ask };
                        if book.submit_limit(side, k, q, AgentId(a)).is_ok() { added += q; }
                    }
                    Op::Market(b, q, a) => {
                        let d = if b { Direction::Buy } else { Direction::Sell };
                        let before = book.total_volume(d.consumed_side());
                        match book.submit_market(d, q, AgentId(a)) {
                            Ok(ex) => {
                                prop_assert_eq!(ex.filled_qty(), q);
                                traded += q;
                                // fills come in non-worsening price order
                                for w in ex.fills.windows(2) {
                                    match d {
                                        Direction::Buy => prop_assert!(w[0].tick <= w[1].tick),
                                        Direction::Sell => prop_assert!(w[0].tick >= w[1].tick),
                                    }
                                }
                            }
                            Err(_) => prop_assert_eq!(book.total_volume(d.consumed_side()), before),
                        }
                    }
                    Op::Cancel(b, k, q, a) => {
                        let side = if b { Side::Bid } else { Side::Ask };
                        cancelled += book.cancel(side, k, q, AgentId(a)).unwrap();
                    }
                }
                book.check_invariants().map_err(TestCaseError::fail)?;
            }
            let resting = book.total_volume(Side::Bid) + book.total_volume(Side::Ask);
            prop_assert_eq!(added, resting + traded + cancelled);
        }
    }
}
