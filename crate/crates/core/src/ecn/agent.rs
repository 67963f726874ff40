//! The ECN agent: turns a sampled snapshot variation into order flow.

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use super::EcnError;
use crate::lob::{AgentId, BookError, Direction, Execution, OrderBook, PriceGrid, Side};

/// Change between two consecutive snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotVariation {
    /// Signed variations, ask levels `1..=m` then bid levels `1..=m`.
    pub deltas: Vec<f64>,
    pub spread_ticks: usize,
    pub mid_change_half_ticks: i64,
}

impl SnapshotVariation {
    /// Builds a variation from a raw `2m + 2` vector
    /// `[deltas.., spread in ticks, mid change in ticks]`, clamping removals
    /// to one, the spread to `[1, 3]` ticks and the mid change to half ticks.
    pub fn from_raw(raw: &[f64], m: usize) -> Result<Self, EcnError> {
        if raw.len() != 2 * m + 2 {
            return Err(EcnError::InvalidParams(format!(
                "variation vector has length {}, expected {}",
                raw.len(),
                2 * m + 2
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(EcnError::NonFinite);
        }
        Ok(SnapshotVariation {
            deltas: raw[..2 * m].iter().map(|d| d.max(-1.0)).collect(),
            spread_ticks: raw[2 * m].round().clamp(1.0, 3.0) as usize,
            mid_change_half_ticks: (2.0 * raw[2 * m + 1]).round() as i64,
        })
    }

    pub fn m(&self) -> usize {
        self.deltas.len() / 2
    }
}

/// Distribution of child order sizes in lots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OrderSizeDist {
    /// Geometric on `{1, 2, ..}` with the given mean.
    Geometric { mean: f64 },
    /// Uniform draw from observed sizes.
    Empirical { sizes: Vec<u64> },
}

impl Default for OrderSizeDist {
    fn default() -> Self {
        OrderSizeDist::Geometric { mean: 3.0 }
    }
}

impl OrderSizeDist {
    pub fn validate(&self) -> Result<(), EcnError> {
        match self {
            OrderSizeDist::Geometric { mean } if !(*mean >= 1.0 && mean.is_finite()) => Err(EcnError::InvalidParams("geometric size mean must be >= 1".into())),
            OrderSizeDist::Empirical { sizes } if sizes.is_empty() || sizes.contains(&0) => {
                Err(EcnError::InvalidParams("empirical sizes must be non-empty and positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            OrderSizeDist::Geometric { mean } => {
                if *mean <= 1.0 {
                    return 1;
                }
                let g = Geometric::new(1.0 / mean).expect("probability in (0, 1)");
                1 + g.sample(rng)
            }
            OrderSizeDist::Empirical { sizes } => sizes[rng.random_range(0..sizes.len())],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EcnOrderKind {
    Market(Direction),
    Limit(Side, usize),
    Cancel(Side, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcnOrder {
    pub kind: EcnOrderKind,
    pub qty: u64,
}

/// Ticks of one side ordered from the touch outward.
fn outward_ticks(side: Side, n: usize) -> Box<dyn Iterator<Item = usize>> {
    match side {
        Side::Ask => Box::new(0..n),
        Side::Bid => Box::new((0..n).rev()),
    }
}

/// Plans meta orders that move the book's volumes by `delta` (full-grid,
/// per side, indexed by tick). Removals that start at the touch and deplete
/// levels in order become one market order; the rest are cancels and limits.
/// Removals precede additions so that no limit order crosses.
pub fn plan_meta_orders(book: &OrderBook, delta_ask: &[i64], delta_bid: &[i64]) -> Result<Vec<EcnOrder>, EcnError> {
    let n = book.grid().n_levels();
    if delta_ask.len() != n || delta_bid.len() != n {
        return Err(EcnError::InvalidParams("delta vectors must span the grid".into()));
    }
    let mut markets = Vec::new();
    let mut cancels = Vec::new();
    let mut limits = Vec::new();
    for (side, delta) in [(Side::Ask, delta_ask), (Side::Bid, delta_bid)] {
        let vols = book.volumes(side);
        for k in 0..n {
            if (vols[k] as i64) + delta[k] < 0 {
                return Err(EcnError::InvalidParams(format!("{side:?} tick {k}: removal exceeds resting volume")));
            }
        }
        let mut consumed = vec![false; n];
        let first = outward_ticks(side, n).find(|k| delta[*k] != 0);
        if let Some(i0) = first {
            if delta[i0] < 0 && book.best_tick(side) == Some(i0) {
                let mut total = 0u64;
                for k in outward_ticks(side, n) {
                    if vols[k] == 0 && delta[k] == 0 {
                        continue;
                    }
                    if delta[k] >= 0 {
                        break;
                    }
                    let take = delta[k].unsigned_abs();
                    total += take;
                    consumed[k] = true;
                    if take < vols[k] {
                        break;
                    }
                }
                let dir = match side {
                    Side::Ask => Direction::Buy,
                    Side::Bid => Direction::Sell,
                };
                markets.push(EcnOrder {
                    kind: EcnOrderKind::Market(dir),
                    qty: total,
                });
            }
        }
        for k in outward_ticks(side, n) {
            if consumed[k] || delta[k] == 0 {
                continue;
            }
            let order = if delta[k] < 0 {
                EcnOrder {
                    kind: EcnOrderKind::Cancel(side, k),
                    qty: delta[k].unsigned_abs(),
                }
            } else {
                EcnOrder {
                    kind: EcnOrderKind::Limit(side, k),
                    qty: delta[k] as u64,
                }
            };
            if delta[k] < 0 {
                cancels.push(order);
            } else {
                limits.push(order);
            }
        }
    }
    markets.extend(cancels);
    markets.extend(limits);
    Ok(markets)
}

/// Splits each meta order into child orders with sizes drawn from `dist`;
/// the last child absorbs the remainder.
pub fn split_meta_orders<R: Rng + ?Sized>(meta: &[EcnOrder], dist: &OrderSizeDist, rng: &mut R) -> Vec<EcnOrder> {
    let mut out = Vec::new();
    for o in meta {
        let mut remaining = o.qty;
        while remaining > 0 {
            let q = dist.sample(rng).min(remaining);
            out.push(EcnOrder { kind: o.kind, qty: q });
            remaining -= q;
        }
    }
    out
}

/// Meta orders for the volume change `delta`, split into child orders.
pub fn build_orders<R: Rng + ?Sized>(
    book: &OrderBook,
    delta_ask: &[i64],
    delta_bid: &[i64],
    dist: &OrderSizeDist,
    rng: &mut R,
) -> Result<Vec<EcnOrder>, EcnError> {
    Ok(split_meta_orders(&plan_meta_orders(book, delta_ask, delta_bid)?, dist, rng))
}

pub fn apply_orders(book: &mut OrderBook, orders: &[EcnOrder], agent: AgentId) -> Result<Vec<Execution>, BookError> {
    let mut execs = Vec::new();
    for o in orders {
        match o.kind {
            EcnOrderKind::Market(dir) => execs.push(book.submit_market(dir, o.qty, agent)?),
            EcnOrderKind::Limit(side, k) => {
                book.submit_limit(side, k as i64, o.qty, agent)?;
            }
            EcnOrderKind::Cancel(side, k) => {
                book.cancel(side, k as i64, o.qty, agent)?;
            }
        }
    }
    Ok(execs)
}

/// Least-squares decay rate `alpha` of `ln V_i ~ c - alpha * i` over levels
/// `i = 1..=m`.
pub fn fit_decay_rate(volumes: &[f64]) -> Result<f64, EcnError> {
    let pts: Vec<(f64, f64)> = volumes
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, v)| ((i + 1) as f64, v.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(EcnError::InvalidParams("need two positive levels to fit a decay".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Ok(-sxy / sxx)
}

/// Layout of the ECN book produced by the agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BookShape {
    /// Levels driven by the variation model.
    pub m: usize,
    /// Total levels per side; levels past `m` follow `A exp(-alpha k)`.
    pub depth: usize,
    pub alpha: f64,
}

impl BookShape {
    pub fn validate(&self) -> Result<(), EcnError> {
        if self.m == 0 || self.depth < self.m || !self.alpha.is_finite() {
            return Err(EcnError::InvalidParams("book shape needs 1 <= m <= depth and finite alpha".into()));
        }
        Ok(())
    }

    /// Volumes for levels `1..=depth` given the top `m`; the tail is
    /// `A exp(-alpha k)` with `ln A` fitted to the top levels at slope `alpha`.
    pub fn extend(&self, top: &[u64]) -> Vec<u64> {
        let m = top.len();
        let log_a = top
            .iter()
            .enumerate()
            .map(|(i, v)| (*v.max(&1) as f64).ln() + self.alpha * (i + 1) as f64)
            .sum::<f64>()
            / m as f64;
        let mut out = top.to_vec();
        for k in m + 1..=self.depth {
            out.push((log_a - self.alpha * k as f64).exp().round() as u64);
        }
        out
    }
}

/// Full-grid target volumes `(ask, bid)` after a variation. `mid_half` is
/// the reference mid in half ticks (`best_bid + best_ask` in tick units).
pub fn target_volumes(book: &OrderBook, variation: &SnapshotVariation, shape: &BookShape, mid_half: i64) -> Result<(Vec<u64>, Vec<u64>), EcnError> {
    shape.validate()?;
    let m = shape.m;
    if variation.m() != m {
        return Err(EcnError::InvalidParams(format!("variation has {} levels, shape has {m}", variation.m())));
    }
    let mut tops = Vec::with_capacity(2);
    for (s, side) in [Side::Ask, Side::Bid].into_iter().enumerate() {
        let cur = book.top_volumes(side, m);
        let new: Vec<u64> = (0..m)
            .map(|i| {
                let d = variation.deltas[s * m + i];
                let v = (1.0 - (-d).max(0.0)) * cur[i] as f64 + d.max(0.0);
                v.round().max(1.0) as u64
            })
            .collect();
        tops.push(shape.extend(&new));
    }
    let spread = variation.spread_ticks as i64;
    let grid = book.grid();
    let new_mid = mid_half + variation.mid_change_half_ticks;
    // Half-tick targets round to the even bid tick so the mid has no drift.
    let twice_bid = new_mid - spread;
    let mut bid = twice_bid.div_euclid(2);
    if twice_bid.rem_euclid(2) == 1 && bid.rem_euclid(2) == 1 {
        bid += 1;
    }
    let depth = shape.depth as i64;
    let lo = depth - 1;
    let hi = grid.k_max() as i64 - (depth - 1) - spread;
    if lo > hi {
        return Err(EcnError::InvalidParams("grid too small for the book depth".into()));
    }
    bid = bid.clamp(lo, hi);
    let ask = bid + spread;
    let n = grid.n_levels();
    let mut ask_v = vec![0; n];
    let mut bid_v = vec![0; n];
    for i in 0..shape.depth {
        ask_v[(ask + i as i64) as usize] = tops[0][i];
        bid_v[(bid - i as i64) as usize] = tops[1][i];
    }
    Ok((ask_v, bid_v))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EcnStepReport {
    pub orders: Vec<EcnOrder>,
    pub executions: Vec<Execution>,
}

/// Agent that maintains the ECN book from sampled variations.
#[derive(Debug, Clone)]
pub struct EcnAgent {
    pub id: AgentId,
    pub shape: BookShape,
    pub size_dist: OrderSizeDist,
    last_mid_half: Option<i64>,
}

impl EcnAgent {
    pub fn new(id: AgentId, shape: BookShape, size_dist: OrderSizeDist) -> Result<Self, EcnError> {
        shape.validate()?;
        size_dist.validate()?;
        Ok(EcnAgent {
            id,
            shape,
            size_dist,
            last_mid_half: None,
        })
    }

    /// Current mid in half ticks, falling back to the last seen value when a
    /// side of the book is empty.
    pub fn reference_mid_half(&mut self, book: &OrderBook) -> Result<i64, EcnError> {
        if let (Some(b), Some(a)) = (book.best_tick(Side::Bid), book.best_tick(Side::Ask)) {
            self.last_mid_half = Some((a + b) as i64);
        }
        self.last_mid_half.ok_or(EcnError::EmptyBook)
    }

    pub fn step<R: Rng + ?Sized>(&mut self, book: &mut OrderBook, variation: &SnapshotVariation, rng: &mut R) -> Result<EcnStepReport, EcnError> {
        let mid_half = self.reference_mid_half(book)?;
        let (ta, tb) = target_volumes(book, variation, &self.shape, mid_half)?;
        let da: Vec<i64> = ta.iter().zip(book.volumes(Side::Ask)).map(|(t, c)| *t as i64 - *c as i64).collect();
        let db: Vec<i64> = tb.iter().zip(book.volumes(Side::Bid)).map(|(t, c)| *t as i64 - *c as i64).collect();
        let orders = build_orders(book, &da, &db, &self.size_dist, rng)?;
        let executions = apply_orders(book, &orders, self.id)?;
        self.reference_mid_half(book)?;
        Ok(EcnStepReport { orders, executions })
    }
}

/// Builds the initial book from a `2m + 1` vector
/// `[log ask volumes.., log bid volumes.., spread in ticks]` around `p0`.
pub fn initial_book(grid: PriceGrid, p0: f64, raw: &[f64], shape: &BookShape, agent: AgentId) -> Result<OrderBook, EcnError> {
    shape.validate()?;
    let m = shape.m;
    if raw.len() != 2 * m + 1 {
        return Err(EcnError::InvalidParams(format!(
            "initial vector has length {}, expected {}",
            raw.len(),
            2 * m + 1
        )));
    }
    if raw.iter().any(|v| !v.is_finite()) || !p0.is_finite() {
        return Err(EcnError::NonFinite);
    }
    let vols = |s: usize| -> Vec<u64> { raw[s * m..(s + 1) * m].iter().map(|l| l.exp().round().max(1.0) as u64).collect() };
    let spread = raw[2 * m].round().max(1.0) as usize;
    let mut book = OrderBook::new(grid);
    let empty = SnapshotVariation {
        deltas: vec![0.0; 2 * m],
        spread_ticks: spread,
        mid_change_half_ticks: 0,
    };
    let mid_half = (2.0 * (p0 - grid.p_min()) / grid.tick()).round() as i64;
    let (ask, bid) = (shape.extend(&vols(0)), shape.extend(&vols(1)));
    let (ta, tb) = target_volumes(&book, &empty, shape, mid_half)?;
    let a0 = ta.iter().position(|v| *v > 0).expect("target has volume");
    let b0 = tb.iter().rposition(|v| *v > 0).expect("target has volume");
    for i in 0..shape.depth {
        if ask[i] > 0 {
            book.submit_limit(Side::Ask, (a0 + i) as i64, ask[i], agent)?;
        }
        if bid[i] > 0 {
            book.submit_limit(Side::Bid, b0 as i64 - i as i64, bid[i], agent)?;
        }
    }
    Ok(book)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    const ECN: AgentId = AgentId(0);

    fn grid() -> PriceGrid {
        PriceGrid::new(1.0, 1.02, 0.00005).unwrap()
    }

    fn shape() -> BookShape {
        BookShape { m: 5, depth: 10, alpha: 0.5 }
    }

    fn start_book() -> OrderBook {
        let raw = [3.0, 3.2, 3.1, 2.9, 2.5, 3.0, 3.3, 3.0, 2.8, 2.6, 1.0];
        initial_book(grid(), 1.01, &raw, &shape(), ECN).unwrap()
    }

    #[test]
    fn decay_fit_example() {
        let a = fit_decay_rate(&[100.0, 61.0, 37.0, 22.0, 13.0]).unwrap();
        assert!((a - 0.51).abs() < 0.005, "{a}");
    }

    #[test]
    fn variation_clamps() {
        let v = SnapshotVariation::from_raw(&[-1.7, 2.0, 0.3, -0.2, 5.0, 0.26], 2).unwrap();
        assert_eq!(v.deltas, vec![-1.0, 2.0, 0.3, -0.2]);
        assert_eq!(v.spread_ticks, 3);
        assert_eq!(v.mid_change_half_ticks, 1);
        assert!(SnapshotVariation::from_raw(&[0.0; 5], 2).is_err());
    }

    #[test]
    fn initial_book_layout() {
        let book = start_book();
        assert_eq!(book.spread_ticks(), Some(1));
        assert!((book.mid().unwrap() - 1.01).abs() < 0.00005);
        assert_eq!(book.levels_from_touch(Side::Ask).len(), 10);
        assert_eq!(book.top_volumes(Side::Ask, 2), vec![20, 25]);
        book.check_invariants().unwrap();
    }

    #[test]
    fn meta_order_example_market_then_limits() {
        let mut book = OrderBook::new(grid());
        book.submit_limit(Side::Bid, 10, 5, ECN).unwrap();
        book.submit_limit(Side::Ask, 11, 5, ECN).unwrap();
        book.submit_limit(Side::Ask, 12, 4, ECN).unwrap();
        book.submit_limit(Side::Ask, 13, 4, ECN).unwrap();
        let n = grid().n_levels();
        let mut da = vec![0i64; n];
        da[11] = -5;
        da[12] = -2;
        da[14] = 3;
        let db = vec![0i64; n];
        let plan = plan_meta_orders(&book, &da, &db).unwrap();
        assert_eq!(
            plan,
            vec![
                EcnOrder {
                    kind: EcnOrderKind::Market(Direction::Buy),
                    qty: 7
                },
                EcnOrder {
                    kind: EcnOrderKind::Limit(Side::Ask, 14),
                    qty: 3
                },
            ]
        );
    }

    #[test]
    fn partial_touch_then_deeper_removal_uses_cancel() {
        let mut book = OrderBook::new(grid());
        book.submit_limit(Side::Bid, 10, 5, ECN).unwrap();
        book.submit_limit(Side::Bid, 9, 5, ECN).unwrap();
        book.submit_limit(Side::Ask, 12, 5, ECN).unwrap();
        let n = grid().n_levels();
        let mut db = vec![0i64; n];
        db[10] = -2;
        db[9] = -3;
        let plan = plan_meta_orders(&book, &vec![0; n], &db).unwrap();
        assert_eq!(
            plan[0],
            EcnOrder {
                kind: EcnOrderKind::Market(Direction::Sell),
                qty: 2
            }
        );
        assert_eq!(
            plan[1],
            EcnOrder {
                kind: EcnOrderKind::Cancel(Side::Bid, 9),
                qty: 3
            }
        );
    }

    #[test]
    fn geometric_sizes_have_requested_mean() {
        let d = OrderSizeDist::Geometric { mean: 4.0 };
        let mut rng = substream(1, "sizes", 0);
        let n = 200_000;
        let s: u64 = (0..n).map(|_| d.sample(&mut rng)).sum();
        assert!((s as f64 / n as f64 - 4.0).abs() < 0.05);
    }

    #[test]
    fn agent_step_reaches_target() {
        let mut book = start_book();
        let mut agent = EcnAgent::new(ECN, shape(), OrderSizeDist::default()).unwrap();
        let mut rng = substream(3, "ecn", 0);
        let v = SnapshotVariation::from_raw(&[-0.5, 3.0, -1.0, 0.0, 2.0, 0.2, -0.3, 1.0, 0.0, -0.9, 2.0, -1.5], 5).unwrap();
        let mid_half = agent.reference_mid_half(&book).unwrap();
        let (ta, tb) = target_volumes(&book, &v, &shape(), mid_half).unwrap();
        agent.step(&mut book, &v, &mut rng).unwrap();
        assert_eq!(book.volumes(Side::Ask), &ta[..]);
        assert_eq!(book.volumes(Side::Bid), &tb[..]);
        assert_eq!(book.spread_ticks(), Some(2));
        book.check_invariants().unwrap();
    }

    proptest! {
        #[test]
        fn orders_reproduce_volume_change(raw in proptest::collection::vec(-1.5f64..6.0, 12), seed in 0u64..1000) {
            let mut book = start_book();
            let v = SnapshotVariation::from_raw(&raw, 5).unwrap();
            let mid_half = (book.best_tick(Side::Bid).unwrap() + book.best_tick(Side::Ask).unwrap()) as i64;
            let (ta, tb) = target_volumes(&book, &v, &shape(), mid_half).unwrap();
            let da: Vec<i64> = ta.iter().zip(book.volumes(Side::Ask)).map(|(t, c)| *t as i64 - *c as i64).collect();
            let db: Vec<i64> = tb.iter().zip(book.volumes(Side::Bid)).map(|(t, c)| *t as i64 - *c as i64).collect();
            let mut rng = substream(seed, "split", 0);
            let orders = build_orders(&book, &da, &db, &OrderSizeDist::default(), &mut rng).unwrap();
            let meta = plan_meta_orders(&book, &da, &db).unwrap();
            prop_assert_eq!(orders.iter().map(|o| o.qty).sum::<u64>(), meta.iter().map(|o| o.qty).sum::<u64>());
            apply_orders(&mut book, &orders, ECN).unwrap();
            prop_assert_eq!(book.volumes(Side::Ask), &ta[..]);
            prop_assert_eq!(book.volumes(Side::Bid), &tb[..]);
            book.check_invariants().map_err(TestCaseError::fail)?;
        }
    }
}
