//! Liquidity providers, liquidity takers, their types, pricing and rewards.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lob::{Direction, OrderBook, Side};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("no peer supertypes to connect to")]
    EmptyPeerSet,
    #[error("ECN cannot price size {0}")]
    Unpriceable(u64),
}

/// Distribution of one scalar type parameter within a supertype.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamDist {
    Fixed {
        value: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Normal draw clipped to `[lo, hi]`.
    ClippedNormal {
        mean: f64,
        std: f64,
        lo: f64,
        hi: f64,
    },
}

impl ParamDist {
    pub fn fixed(value: f64) -> Self {
        ParamDist::Fixed { value }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let ok = match *self {
            ParamDist::Fixed { value } => value.is_finite(),
            ParamDist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            ParamDist::ClippedNormal { mean, std, lo, hi } => mean.is_finite() && std >= 0.0 && lo <= hi,
        };
        if ok {
            Ok(())
        } else {
            Err(AgentError::InvalidParam(format!("{self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ParamDist::Fixed { value } => value,
            ParamDist::Uniform { lo, hi } => {
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            }
            ParamDist::ClippedNormal { mean, std, lo, hi } => {
                if std == 0.0 {
                    return mean.clamp(lo, hi);
                }
                Normal::new(mean, std).expect("validated std").sample(rng).clamp(lo, hi)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ParamDist::Fixed { value } => value,
            ParamDist::Uniform { lo, hi } => 0.5 * (lo + hi),
            ParamDist::ClippedNormal { mean, .. } => mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSupertype {
    pub name: String,
    /// Inventory risk aversion.
    pub gamma: ParamDist,
    /// PnL scale.
    pub eta: ParamDist,
    /// Weight of PnL against the market share objective.
    pub omega: ParamDist,
    #[serde(default = "one")]
    pub market_share_target: f64,
    /// Connection probability to each LT supertype.
    pub connectivity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtSupertype {
    pub name: String,
    pub gamma: ParamDist,
    pub eta: ParamDist,
    pub omega: ParamDist,
    /// Target fraction of sells.
    pub sell_target: ParamDist,
    /// Target fraction of buys.
    pub buy_target: ParamDist,
    /// Trade size in lots.
    pub trade_size: u64,
    /// Connection probability to each LP supertype.
    pub connectivity: Vec<f64>,
}

impl LpSupertype {
    /// Point-mass supertype with a market share target of one.
    pub fn point(name: &str, gamma: f64, eta: f64, omega: f64, connectivity: Vec<f64>) -> Self {
        LpSupertype {
            name: name.into(),
            gamma: ParamDist::fixed(gamma),
            eta: ParamDist::fixed(eta),
            omega: ParamDist::fixed(omega),
            market_share_target: 1.0,
            connectivity,
        }
    }
}

impl LtSupertype {
    /// Point-mass supertype without risk aversion.
    pub fn point(name: &str, eta: f64, omega: f64, sell_target: f64, buy_target: f64, trade_size: u64, connectivity: Vec<f64>) -> Self {
        LtSupertype {
            name: name.into(),
            gamma: ParamDist::fixed(0.0),
            eta: ParamDist::fixed(eta),
            omega: ParamDist::fixed(omega),
            sell_target: ParamDist::fixed(sell_target),
            buy_target: ParamDist::fixed(buy_target),
            trade_size,
            connectivity,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn check_probs(v: &[f64]) -> Result<(), AgentError> {
    if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(AgentError::InvalidParam("connectivity probabilities must lie in [0, 1]".into()));
    }
    Ok(())
}

impl LpSupertype {
    pub fn validate(&self, n_lt_supertypes: usize) -> Result<(), AgentError> {
        for d in [&self.gamma, &self.eta, &self.omega] {
            d.validate()?;
        }
        if n_lt_supertypes == 0 {
            return Err(AgentError::EmptyPeerSet);
        }
        if self.connectivity.len() != n_lt_supertypes {
            return Err(AgentError::InvalidParam(format!(
                "LP supertype {} has {} connectivity entries for {} LT supertypes",
                self.name,
                self.connectivity.len(),
                n_lt_supertypes
            )));
        }
        check_probs(&self.connectivity)
    }
}

impl LtSupertype {
    pub fn validate(&self, n_lp_supertypes: usize) -> Result<(), AgentError> {
        for d in [&self.gamma, &self.eta, &self.omega, &self.sell_target, &self.buy_target] {
            d.validate()?;
        }
        if self.trade_size == 0 {
            return Err(AgentError::InvalidParam("trade size must be positive".into()));
        }
        if n_lp_supertypes == 0 {
            return Err(AgentError::EmptyPeerSet);
        }
        if self.connectivity.len() != n_lp_supertypes {
            return Err(AgentError::InvalidParam(format!("LT supertype {} connectivity length mismatch", self.name)));
        }
        check_probs(&self.connectivity)
    }
}

/// Realized LP type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpType {
    pub supertype: usize,
    pub gamma: f64,
    pub eta: f64,
    pub omega: f64,
    pub market_share_target: f64,
    /// Fraction of each LT supertype's agents this LP is connected to.
    pub connected_fraction: Vec<f64>,
}

/// Realized LT type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtType {
    pub supertype: usize,
    pub gamma: f64,
    pub eta: f64,
    pub omega: f64,
    pub sell_target: f64,
    pub buy_target: f64,
    pub trade_size: u64,
    pub connected_fraction: Vec<f64>,
}

impl LpType {
    pub fn features(&self) -> Vec<f64> {
        let mut f = vec![self.gamma, self.eta, self.omega, self.market_share_target];
        f.extend(&self.connected_fraction);
        f
    }
}

impl LtType {
    pub fn features(&self) -> Vec<f64> {
        let mut f = vec![self.gamma, self.eta, self.omega, self.sell_target, self.buy_target, self.trade_size as f64];
        f.extend(&self.connected_fraction);
        f
    }
}

/// Supertypes with agent counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupertypeProfile {
    pub lp: Vec<(LpSupertype, usize)>,
    pub lt: Vec<(LtSupertype, usize)>,
}

impl SupertypeProfile {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.lp.is_empty() || self.lp.iter().map(|x| x.1).sum::<usize>() == 0 {
            return Err(AgentError::InvalidParam("at least one LP is required".into()));
        }
        for (s, _) in &self.lp {
            s.validate(self.lt.len())?;
        }
        for (s, _) in &self.lt {
            s.validate(self.lp.len())?;
        }
        Ok(())
    }

    pub fn n_lp(&self) -> usize {
        self.lp.iter().map(|x| x.1).sum()
    }

    pub fn n_lt(&self) -> usize {
        self.lt.iter().map(|x| x.1).sum()
    }
}

/// Sampled agents and their connectivity graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub lp: Vec<LpType>,
    pub lt: Vec<LtType>,
    /// `links[lp][lt]`.
    pub links: Vec<Vec<bool>>,
}

/// Samples every agent's type. An LP of supertype `a` and an LT of
/// supertype `c` are linked with probability `p_lp[a][c] * p_lt[c][a]`.
pub fn sample_population<R: Rng + ?Sized>(profile: &SupertypeProfile, rng: &mut R) -> Result<Population, AgentError> {
    profile.validate()?;
    let lp_st: Vec<usize> = profile.lp.iter().enumerate().flat_map(|(i, (_, n))| std::iter::repeat_n(i, *n)).collect();
    let lt_st: Vec<usize> = profile.lt.iter().enumerate().flat_map(|(i, (_, n))| std::iter::repeat_n(i, *n)).collect();
    let mut links = vec![vec![false; lt_st.len()]; lp_st.len()];
    for (i, a) in lp_st.iter().enumerate() {
        for (k, c) in lt_st.iter().enumerate() {
            let p = profile.lp[*a].0.connectivity[*c] * profile.lt[*c].0.connectivity[*a];
            links[i][k] = rng.random::<f64>() < p;
        }
    }
    let fraction = |count: usize, total: usize| if total == 0 { 0.0 } else { count as f64 / total as f64 };
    let lp = lp_st
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let s = &profile.lp[*a].0;
            let connected_fraction = (0..profile.lt.len())
                .map(|c| {
                    let n = lt_st.iter().enumerate().filter(|(k, sc)| **sc == c && links[i][*k]).count();
                    fraction(n, profile.lt[c].1)
                })
                .collect();
            LpType {
                supertype: *a,
                gamma: s.gamma.sample(rng),
                eta: s.eta.sample(rng),
                omega: s.omega.sample(rng).clamp(0.0, 1.0),
                market_share_target: s.market_share_target,
                connected_fraction,
            }
        })
        .collect();
    let lt = lt_st
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let s = &profile.lt[*c].0;
            let connected_fraction = (0..profile.lp.len())
                .map(|a| {
                    let n = lp_st.iter().enumerate().filter(|(i, sa)| **sa == a && links[*i][k]).count();
                    fraction(n, profile.lp[a].1)
                })
                .collect();
            LtType {
                supertype: *c,
                gamma: s.gamma.sample(rng),
                eta: s.eta.sample(rng),
                omega: s.omega.sample(rng).clamp(0.0, 1.0),
                sell_target: s.sell_target.sample(rng),
                buy_target: s.buy_target.sample(rng),
                trade_size: s.trade_size,
                connected_fraction,
            }
        })
        .collect();
    Ok(Population { lp, lt, links })
}

/// LP pricing, skew and hedging choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpAction {
    pub spread: f64,
    pub skew: f64,
    pub hedge: f64,
}

impl LpAction {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(self.spread.is_finite() && self.skew.is_finite()) || self.spread < -1.0 {
            return Err(AgentError::InvalidParam(format!("spread tweak {} below -1", self.spread)));
        }
        if !(0.0..=1.0).contains(&self.hedge) {
            return Err(AgentError::InvalidParam(format!("hedge fraction {} outside [0, 1]", self.hedge)));
        }
        Ok(())
    }

    /// Per-side tweaks `(ask, bid)` equivalent to `(spread, skew)`.
    pub fn side_tweaks(&self) -> (f64, f64) {
        to_side_tweaks(self.spread, self.skew)
    }
}

pub fn to_side_tweaks(spread: f64, skew: f64) -> (f64, f64) {
    (0.5 * spread + skew, 0.5 * spread - skew)
}

pub fn from_side_tweaks(ask: f64, bid: f64) -> (f64, f64) {
    (ask + bid, 0.5 * (ask - bid))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LtAction {
    Buy,
    Sell,
    Idle,
}

impl LtAction {
    pub fn direction(self) -> Option<Direction> {
        match self {
            LtAction::Buy => Some(Direction::Buy),
            LtAction::Sell => Some(Direction::Sell),
            LtAction::Idle => None,
        }
    }
}

/// Read-only view of the ECN used for pricing.
#[derive(Debug, Clone, PartialEq)]
pub struct EcnView {
    pub mid: f64,
    pub market_spread: f64,
    asks: Vec<(f64, u64)>,
    bids: Vec<(f64, u64)>,
}

impl EcnView {
    pub fn from_book(book: &OrderBook) -> Option<Self> {
        let level = |side| -> Vec<(f64, u64)> { book.levels_from_touch(side).into_iter().map(|(k, v)| (book.grid().price(k), v)).collect() };
        Some(EcnView {
            mid: book.mid()?,
            market_spread: book.market_spread()?,
            asks: level(Side::Ask),
            bids: level(Side::Bid),
        })
    }

    /// VWAP of a hypothetical market order.
    pub fn vwap(&self, direction: Direction, qty: u64) -> Option<f64> {
        if qty == 0 {
            return None;
        }
        let levels = match direction {
            Direction::Buy => &self.asks,
            Direction::Sell => &self.bids,
        };
        let mut remaining = qty;
        let mut notional = 0.0;
        for (p, v) in levels {
            let take = (*v).min(remaining);
            notional += take as f64 * p;
            remaining -= take;
            if remaining == 0 {
                return Some(notional / qty as f64);
            }
        }
        None
    }

    /// Distance of the VWAP of a size-`qty` market order from the mid.
    pub fn walk_cost(&self, direction: Direction, qty: u64) -> Option<f64> {
        Some((self.vwap(direction, qty)? - self.mid).abs())
    }

    /// Average of the buy and sell walk costs.
    pub fn symmetric_cost(&self, qty: u64) -> Option<f64> {
        Some(0.5 * (self.walk_cost(Direction::Buy, qty)? + self.walk_cost(Direction::Sell, qty)?))
    }

    /// Volumes of the first `m` levels per side, asks then bids, zero-padded.
    pub fn top_volumes(&self, m: usize) -> Vec<f64> {
        let pad = |l: &[(f64, u64)]| -> Vec<f64> { (0..m).map(|i| l.get(i).map_or(0.0, |x| x.1 as f64)).collect() };
        let mut v = pad(&self.asks);
        v.extend(pad(&self.bids));
        v
    }
}

/// Price curves quoted by an LP for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpQuote {
    pub mid: f64,
    pub market_spread: f64,
    pub spread: f64,
    pub skew: f64,
    /// LP price grid increment.
    pub increment: f64,
}

fn round_up(x: f64, inc: f64) -> f64 {
    (x / inc - 1e-9).ceil() * inc
}

fn round_down(x: f64, inc: f64) -> f64 {
    (x / inc + 1e-9).floor() * inc
}

impl LpQuote {
    /// Ask price for a trade whose symmetric ECN cost is `cost`.
    pub fn ask_at_cost(&self, cost: f64) -> f64 {
        let raw = self.mid + cost + 0.5 * self.spread * self.market_spread + self.skew * self.market_spread;
        round_up(raw, self.increment)
    }

    pub fn bid_at_cost(&self, cost: f64) -> f64 {
        let raw = self.mid - cost - 0.5 * self.spread * self.market_spread + self.skew * self.market_spread;
        round_down(raw, self.increment)
    }

    pub fn ask(&self, view: &EcnView, qty: u64) -> Result<f64, AgentError> {
        Ok(self.ask_at_cost(view.symmetric_cost(qty).ok_or(AgentError::Unpriceable(qty))?))
    }

    pub fn bid(&self, view: &EcnView, qty: u64) -> Result<f64, AgentError> {
        Ok(self.bid_at_cost(view.symmetric_cost(qty).ok_or(AgentError::Unpriceable(qty))?))
    }

    /// Price at which the LP fills a counterparty trading in `direction`.
    pub fn price_for(&self, view: &EcnView, direction: Direction, qty: u64) -> Result<f64, AgentError> {
        match direction {
            Direction::Buy => self.ask(view, qty),
            Direction::Sell => self.bid(view, qty),
        }
    }
}

pub fn lp_quote(action: &LpAction, view: &EcnView, increment: f64) -> Result<LpQuote, AgentError> {
    action.validate()?;
    if !(increment > 0.0) {
        return Err(AgentError::InvalidParam("price increment must be positive".into()));
    }
    Ok(LpQuote {
        mid: view.mid,
        market_spread: view.market_spread,
        spread: action.spread,
        skew: action.skew,
        increment,
    })
}

/// A trade from the agent's point of view; positive `qty` is a purchase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub qty: i64,
    pub price: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PnlDelta {
    pub inventory: f64,
    pub spread: f64,
}

impl PnlDelta {
    pub fn total(&self) -> f64 {
        self.inventory + self.spread
    }

    /// PnL net of the inventory penalty `gamma * |inventory PnL|`.
    pub fn risk_adjusted(&self, gamma: f64) -> f64 {
        self.total() - gamma * self.inventory.abs()
    }
}

/// Running PnL split into inventory and spread parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PnlLedger {
    pub inventory: i64,
    pub cash: f64,
    pub pnl_inventory: f64,
    pub pnl_spread: f64,
    pub abs_inventory_pnl: f64,
    pub terminal_penalty: f64,
}

impl PnlLedger {
    pub fn total(&self) -> f64 {
        self.pnl_inventory + self.pnl_spread - self.terminal_penalty
    }

    /// Mark-to-market value `cash + inventory * mid`.
    pub fn mark_to_market(&self, mid: f64) -> f64 {
        self.cash + self.inventory as f64 * mid
    }

    /// Books trades executed against reference mid `prev_mid`, then marks the
    /// resulting inventory from `prev_mid` to `mid`.
    pub fn update(&mut self, trades: &[Trade], prev_mid: f64, mid: f64) -> PnlDelta {
        let mut spread = 0.0;
        for t in trades {
            spread += t.qty as f64 * (prev_mid - t.price);
            self.cash -= t.qty as f64 * t.price;
            self.inventory += t.qty;
        }
        let inventory = self.inventory as f64 * (mid - prev_mid);
        self.pnl_spread += spread;
        self.pnl_inventory += inventory;
        self.abs_inventory_pnl += inventory.abs();
        PnlDelta { inventory, spread }
    }

    pub fn risk_adjusted(&self, gamma: f64) -> f64 {
        self.total() - gamma * self.abs_inventory_pnl
    }
}

/// Expected `|inventory PnL|` over one step when the mid moves by a centered
/// Gaussian of standard deviation `sigma`: `sqrt(2 / pi) * sigma * |q|`.
pub fn expected_abs_inventory_pnl(sigma: f64, inventory: i64) -> f64 {
    (2.0 / std::f64::consts::PI).sqrt() * sigma * inventory.unsigned_abs() as f64
}

/// Terminal inventory penalty; the default charges nothing.
pub trait TerminalPenalty: Send + Sync {
    fn penalty(&self, inventory: i64, mid: f64) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoPenalty;

impl TerminalPenalty for NoPenalty {
    fn penalty(&self, _: i64, _: f64) -> f64 {
        0.0
    }
}

/// Market share distance `|avg share - target|`.
pub fn market_share_distance(avg_share: f64, target: f64) -> f64 {
    (avg_share - target).abs()
}

/// One LP reward `omega * eta * dPnL_gamma - (1 - omega) * dM`.
pub fn lp_reward(ty: &LpType, pnl: &PnlDelta, prev_avg_share: f64, avg_share: f64) -> f64 {
    let dm = market_share_distance(avg_share, ty.market_share_target) - market_share_distance(prev_avg_share, ty.market_share_target);
    ty.omega * ty.eta * pnl.risk_adjusted(ty.gamma) - (1.0 - ty.omega) * dm
}

/// Running buy and sell fractions of an LT.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TradeFractions {
    pub buys: u64,
    pub sells: u64,
    pub steps: u64,
}

impl TradeFractions {
    pub fn push(&mut self, action: LtAction) {
        self.steps += 1;
        match action {
            LtAction::Buy => self.buys += 1,
            LtAction::Sell => self.sells += 1,
            LtAction::Idle => {}
        }
    }

    /// `(sell fraction, buy fraction)`.
    pub fn fractions(&self) -> (f64, f64) {
        if self.steps == 0 {
            return (0.0, 0.0);
        }
        (self.sells as f64 / self.steps as f64, self.buys as f64 / self.steps as f64)
    }

    pub fn distance(&self, sell_target: f64, buy_target: f64) -> f64 {
        let (s, b) = self.fractions();
        0.5 * ((s - sell_target).abs() + (b - buy_target).abs())
    }
}

/// One LT reward `omega * eta * dPnL_gamma - (1 - omega) * dQ`.
pub fn lt_reward(ty: &LtType, pnl: &PnlDelta, prev: &TradeFractions, now: &TradeFractions) -> f64 {
    let dq = now.distance(ty.sell_target, ty.buy_target) - prev.distance(ty.sell_target, ty.buy_target);
    ty.omega * ty.eta * pnl.risk_adjusted(ty.gamma) - (1.0 - ty.omega) * dq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lob::{AgentId, PriceGrid};
    use crate::rng::substream;
    use proptest::prelude::*;

    fn view() -> EcnView {
        EcnView {
            mid: 100.0,
            market_spread: 0.2,
            asks: vec![(100.1, 5), (100.2, 5)],
            bids: vec![(99.9, 5), (99.8, 5)],
        }
    }

    fn lp_type(omega: f64) -> LpType {
        LpType {
            supertype: 0,
            gamma: 0.0,
            eta: 1.0,
            omega,
            market_share_target: 1.0,
            connected_fraction: vec![1.0],
        }
    }

    #[test]
    fn zero_tweaks_quote_at_ecn_cost() {
        let q = lp_quote(
            &LpAction {
                spread: 0.0,
                skew: 0.0,
                hedge: 0.0,
            },
            &view(),
            1e-5,
        )
        .unwrap();
        assert!((q.ask_at_cost(0.25) - 100.25).abs() < 1e-9);
        assert!((q.bid_at_cost(0.25) - 99.75).abs() < 1e-9);
        // ten lots walk to 100.15 on either side
        assert!((q.ask(&view(), 10).unwrap() - 100.15).abs() < 1e-9);
    }

    #[test]
    fn minimum_spread_collapses_top_of_book() {
        let q = lp_quote(
            &LpAction {
                spread: -1.0,
                skew: 0.0,
                hedge: 0.0,
            },
            &view(),
            1e-5,
        )
        .unwrap();
        let c = view().symmetric_cost(1).unwrap();
        assert!((q.ask_at_cost(c) - 100.0).abs() < 1e-9);
        assert!((q.bid_at_cost(c) - 100.0).abs() < 1e-9);
        assert!(lp_quote(
            &LpAction {
                spread: -1.5,
                skew: 0.0,
                hedge: 0.0
            },
            &view(),
            1e-5
        )
        .is_err());
    }

    #[test]
    fn prices_round_outward() {
        let q = lp_quote(
            &LpAction {
                spread: 0.0,
                skew: 0.0,
                hedge: 0.0,
            },
            &view(),
            0.1,
        )
        .unwrap();
        assert!((q.ask_at_cost(0.01) - 100.1).abs() < 1e-9);
        assert!((q.bid_at_cost(0.01) - 99.9).abs() < 1e-9);
    }

    #[test]
    fn view_matches_book_walk_cost() {
        let g = PriceGrid::new(100.0, 101.0, 0.1).unwrap();
        let mut book = OrderBook::new(g);
        book.submit_limit(Side::Bid, 0, 5, AgentId(0)).unwrap();
        book.submit_limit(Side::Ask, 5, 5, AgentId(0)).unwrap();
        book.submit_limit(Side::Ask, 6, 5, AgentId(0)).unwrap();
        let v = EcnView::from_book(&book).unwrap();
        assert!((v.walk_cost(Direction::Buy, 10).unwrap() - 0.30).abs() < 1e-12);
        assert_eq!(v.walk_cost(Direction::Sell, 6), None);
    }

    #[test]
    fn tweak_bijection() {
        let (a, b) = to_side_tweaks(0.6, 0.1);
        assert!((a - 0.4).abs() < 1e-12 && (b - 0.2).abs() < 1e-12);
        let (s, k) = from_side_tweaks(a, b);
        assert!((s - 0.6).abs() < 1e-12 && (k - 0.1).abs() < 1e-12);
    }

    #[test]
    fn pnl_examples() {
        let mut l = PnlLedger {
            inventory: 5,
            ..Default::default()
        };
        let d = l.update(&[], 100.0, 100.1);
        assert!((d.inventory - 0.5).abs() < 1e-9 && d.spread == 0.0);
        let mut l = PnlLedger::default();
        let d = l.update(&[Trade { qty: -2, price: 100.3 }], 100.0, 100.0);
        assert!((d.spread - 0.6).abs() < 1e-9);
    }

    #[test]
    fn brownian_inventory_pnl_matches_formula() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::rng::substream(3, "mid", 0);
        let mut l = PnlLedger {
            inventory: -3,
            ..Default::default()
        };
        let mut mid = 1.0;
        let n = 200_000;
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let next = mid + 1e-4 * z;
            l.update(&[], mid, next);
            mid = next;
        }
        let want = expected_abs_inventory_pnl(1e-4, -3);
        assert!((l.abs_inventory_pnl / n as f64 - want).abs() < 0.01 * want);
    }

    #[test]
    fn lp_reward_example() {
        // omega = 0, share 0.20 -> 0.25 with target 1
        let r = lp_reward(&lp_type(0.0), &PnlDelta::default(), 0.20, 0.25);
        assert!((r - 0.05).abs() < 1e-12);
    }

    #[test]
    fn lt_fraction_example() {
        let ty = LtType {
            supertype: 0,
            gamma: 0.0,
            eta: 1.0,
            omega: 0.0,
            sell_target: 0.5,
            buy_target: 0.5,
            trade_size: 1,
            connected_fraction: vec![],
        };
        let mut f = TradeFractions::default();
        f.push(LtAction::Buy);
        let prev = f;
        f.push(LtAction::Sell);
        assert_eq!(f.fractions(), (0.5, 0.5));
        assert_eq!(f.distance(0.5, 0.5), 0.0);
        assert!((lt_reward(&ty, &PnlDelta::default(), &prev, &f) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn population_respects_zero_connectivity() {
        let lp = LpSupertype {
            name: "lp".into(),
            gamma: ParamDist::Uniform { lo: 0.0, hi: 1.0 },
            eta: ParamDist::fixed(1.0),
            omega: ParamDist::fixed(1.0),
            market_share_target: 1.0,
            connectivity: vec![0.0, 1.0],
        };
        let lt = |n: &str| LtSupertype {
            name: n.into(),
            gamma: ParamDist::fixed(0.0),
            eta: ParamDist::fixed(1.0),
            omega: ParamDist::fixed(0.0),
            sell_target: ParamDist::fixed(0.5),
            buy_target: ParamDist::fixed(0.5),
            trade_size: 1,
            connectivity: vec![1.0],
        };
        let profile = SupertypeProfile {
            lp: vec![(lp, 2)],
            lt: vec![(lt("a"), 3), (lt("b"), 4)],
        };
        let pop = sample_population(&profile, &mut substream(1, "pop", 0)).unwrap();
        assert_eq!(pop.lp.len(), 2);
        assert_eq!(pop.lp[0].connected_fraction, vec![0.0, 1.0]);
        assert!(pop.links.iter().all(|row| row[..3].iter().all(|l| !l) && row[3..].iter().all(|l| *l)));
        let empty = SupertypeProfile {
            lp: profile.lp.clone(),
            lt: vec![],
        };
        assert_eq!(sample_population(&empty, &mut substream(1, "pop", 0)).unwrap_err(), AgentError::EmptyPeerSet);
    }

    proptest! {
        #[test]
        fn pnl_identity(trades in proptest::collection::vec((-5i64..6, 99.0f64..101.0, 99.0f64..101.0), 1..40)) {
            let mut l = PnlLedger::default();
            let mut mid = 100.0;
            for (q, p, next) in trades {
                l.update(&[Trade { qty: q, price: p }], mid, next);
                mid = next;
                prop_assert!((l.total() - l.mark_to_market(mid)).abs() < 1e-8);
            }
        }

        #[test]
        fn ask_never_below_bid_for_nonneg_spread(spread in 0.0f64..3.0, skew in -2.0f64..2.0, cost in 0.0f64..1.0) {
            let q = lp_quote(&LpAction { spread, skew, hedge: 0.0 }, &view(), 1e-5).unwrap();
            prop_assert!(q.ask_at_cost(cost) - q.bid_at_cost(cost) >= -1e-9);
        }

        #[test]
        fn fractions_bounded(actions in proptest::collection::vec(0u8..3, 1..100)) {
            let mut f = TradeFractions::default();
            for a in actions {
                f.push([LtAction::Buy, LtAction::Sell, LtAction::Idle][a as usize]);
                let (s, b) = f.fractions();
                prop_assert!((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&b) && s + b <= 1.0 + 1e-12);
            }
        }
    }
}
