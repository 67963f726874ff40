//! Multi-stage market episodes: ECN update, LP quoting and hedging, LT
//! trading, then rewards once the next mid is known.

pub mod experiments;
pub mod metrics;
pub mod policy;
pub mod spectrum;
pub mod train;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    lp_quote, lp_reward, lt_reward, sample_population, AgentError, EcnView, LpAction, LpQuote, LpSupertype, LtAction, LtSupertype, PnlDelta, PnlLedger,
    Population, SupertypeProfile, Trade, TradeFractions,
};
use crate::ecn::{initial_book, EcnAgent, EcnError, EcnModel};
use crate::lob::{AgentId, BookError, Direction, OrderBook, PriceGrid};
use crate::policy::{PolicyError, TableKey};
use crate::rng::{substream, substream_seed, SimRng};

pub use metrics::{behavior_metrics, flow_response_curve, holding_times, skew_intensity, BehaviorMetrics, HoldingTime};
pub use policy::{
    Decision, Discretizer, FeatureBins, FixedLp, FixedLt, LpFeature, LpPolicy, LpTypeFeature, LtFeature, LtPolicy, LtTypeFeature, StationaryLt, SupertypeLt,
    TabularLp, TabularLt,
};

/// A violated cross-agent invariant, named by a stable id.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invariant {id} violated: {detail}")]
pub struct InvariantBreach {
    pub id: &'static str,
    pub detail: String,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ecn(#[from] EcnError),
    #[error(transparent)]
    Book(#[from] BookError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub p_min: f64,
    pub p_max: f64,
    pub tick: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            p_min: 0.95,
            p_max: 1.05,
            tick: 1e-4,
        }
    }
}

/// Whether LP hedges hit the ECN before or after LT trades of the same step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HedgeTiming {
    #[default]
    BeforeTrades,
    AfterTrades,
}

fn default_hedge_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub horizon: usize,
    pub profile: SupertypeProfile,
    pub grid: GridSpec,
    pub p0: f64,
    /// LP price increment.
    pub lp_increment: f64,
    #[serde(default)]
    pub hedge_timing: HedgeTiming,
    #[serde(default = "default_hedge_grid")]
    pub hedge_cost_grid: Vec<f64>,
    pub ecn: EcnModel,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn new(profile: SupertypeProfile, ecn: EcnModel) -> Self {
        EpisodeConfig {
            horizon: 100,
            profile,
            grid: GridSpec::default(),
            p0: 1.0,
            lp_increment: 1e-5,
            hedge_timing: HedgeTiming::BeforeTrades,
            hedge_cost_grid: default_hedge_grid(),
            ecn,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.horizon == 0 {
            return Err(SimError::Config("horizon must be at least 1".into()));
        }
        self.profile.validate()?;
        if self.profile.n_lp() == 0 {
            return Err(SimError::Config("at least one LP is required".into()));
        }
        if !(self.lp_increment > 0.0) {
            return Err(SimError::Config("LP price increment must be positive".into()));
        }
        if !(self.grid.p_min < self.p0 && self.p0 < self.grid.p_max) {
            return Err(SimError::Config("initial price outside the grid".into()));
        }
        self.ecn.validate()?;
        Ok(())
    }

    pub fn price_grid(&self) -> Result<PriceGrid, SimError> {
        Ok(PriceGrid::new(self.grid.p_min, self.grid.p_max, self.grid.tick)?)
    }
}

/// Base market: a first LP whose flow-LT connectivity is `flow_connectivity`,
/// two further LPs, `n_flow` flow LTs with even targets and `n_pnl` PnL LTs.
/// PnL scales are one over the default tick.
pub fn desk_profile(flow_connectivity: f64, n_flow: usize, n_pnl: usize) -> SupertypeProfile {
    let eta = 1e4;
    SupertypeProfile {
        lp: vec![
            (LpSupertype::point("lp_first", 0.5, eta, 1.0, vec![flow_connectivity, 1.0]), 1),
            (LpSupertype::point("lp_other", 0.5, eta, 1.0, vec![1.0, 1.0]), 2),
        ],
        lt: vec![
            (LtSupertype::point("lt_flow", eta, 0.0, 0.5, 0.5, 1, vec![1.0, 1.0]), n_flow),
            (LtSupertype::point("lt_pnl", eta, 1.0, 0.5, 0.5, 1, vec![1.0, 1.0]), n_pnl),
        ],
    }
}

/// What an LP sees when quoting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpObservation {
    pub mid: f64,
    pub mid_move_ticks: f64,
    pub market_spread_ticks: f64,
    pub inventory: i64,
    pub time_fraction: f64,
    pub market_share: f64,
    pub top_volumes: Vec<f64>,
    /// Walk cost of hedging each fraction of the hedge-cost grid.
    pub hedge_costs: Vec<f64>,
}

/// What an LT sees before trading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtObservation {
    pub mid: f64,
    pub mid_move_ticks: f64,
    pub inventory: i64,
    pub time_fraction: f64,
    pub sell_fraction: f64,
    pub buy_fraction: f64,
    /// Best available buy price minus mid, in units of the market spread.
    pub buy_cost: f64,
    /// Mid minus best available sell price, in units of the market spread.
    pub sell_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Venue {
    Lp(usize),
    Ecn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpStep {
    pub obs: LpObservation,
    pub action: LpAction,
    pub key: Option<TableKey>,
    pub reward: f64,
    pub pnl: PnlDelta,
    /// Quantity sold to LTs at the LP's ask.
    pub flow_ask: u64,
    /// Quantity bought from LTs at the LP's bid.
    pub flow_bid: u64,
    pub hedge_qty: i64,
    pub hedge_failed: bool,
    pub share: Option<f64>,
    pub avg_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtStep {
    pub obs: LtObservation,
    pub action: LtAction,
    pub key: Option<TableKey>,
    pub reward: f64,
    pub pnl: PnlDelta,
    pub venue: Option<Venue>,
    pub price: Option<f64>,
    pub filled: u64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub t: usize,
    pub mid: f64,
    pub next_mid: f64,
    pub spread_ticks: usize,
    pub lt_volume: u64,
    pub ecn_lt_volume: u64,
    pub ecn_share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub population: Population,
    pub hedge_timing: HedgeTiming,
    pub lp: Vec<Vec<LpStep>>,
    pub lt: Vec<Vec<LtStep>>,
    pub steps: Vec<StepSummary>,
    pub lp_ledgers: Vec<PnlLedger>,
    pub lt_ledgers: Vec<PnlLedger>,
    pub clamped_actions: usize,
    pub skipped_trades: usize,
    pub failed_hedges: usize,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn lp_return(&self, i: usize) -> f64 {
        self.lp[i].iter().map(|s| s.reward).sum()
    }

    pub fn lt_return(&self, k: usize) -> f64 {
        self.lt[k].iter().map(|s| s.reward).sum()
    }

    /// Per-step CSV with one row per agent and step.
    pub fn to_csv(&self, episode: usize) -> String {
        let mut out = String::from("episode,t,agent,class,spread,skew,hedge,lt_action,reward,inventory,mid\n");
        let mut lp_inv = vec![0i64; self.lp.len()];
        let mut lt_inv = vec![0i64; self.lt.len()];
        for (t, s) in self.steps.iter().enumerate() {
            for (i, traj) in self.lp.iter().enumerate() {
                let st = &traj[t];
                lp_inv[i] = st.obs.inventory;
                out.push_str(&format!(
                    "{episode},{t},{i},lp,{:.16e},{:.16e},{:.16e},,{:.16e},{},{:.16e}\n",
                    st.action.spread, st.action.skew, st.action.hedge, st.reward, lp_inv[i], s.mid
                ));
            }
            for (k, traj) in self.lt.iter().enumerate() {
                let st = &traj[t];
                lt_inv[k] = st.obs.inventory;
                let a = match st.action {
                    LtAction::Buy => "buy",
                    LtAction::Sell => "sell",
                    LtAction::Idle => "idle",
                };
                out.push_str(&format!("{episode},{t},{k},lt,,,,{a},{:.16e},{},{:.16e}\n", st.reward, lt_inv[k], s.mid));
            }
        }
        out
    }

    /// SHA-256 of the CSV export, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv(0).as_bytes()))
    }

    /// Checks cross-agent accounting: LT fills routed to each LP match the
    /// LP's recorded flow, shares lie in `[0, 1]` and sum to at most one,
    /// and every ledger is finite.
    pub fn check_invariants(&self) -> Result<(), InvariantBreach> {
        let breach = |id: &'static str, detail: String| Err(InvariantBreach { id, detail });
        let mut routed = vec![(0u64, 0u64); self.lp.len()];
        for steps in &self.lt {
            for s in steps {
                if let Some(Venue::Lp(i)) = s.venue {
                    match s.action {
                        LtAction::Buy => routed[i].0 += s.filled,
                        LtAction::Sell => routed[i].1 += s.filled,
                        LtAction::Idle => return breach("sim.flow_conservation", format!("idle LT routed to LP {i}")),
                    }
                }
            }
        }
        for (i, steps) in self.lp.iter().enumerate() {
            let ask: u64 = steps.iter().map(|s| s.flow_ask).sum();
            let bid: u64 = steps.iter().map(|s| s.flow_bid).sum();
            if (ask, bid) != routed[i] {
                return breach(
                    "sim.flow_conservation",
                    format!("LP {i} recorded ({ask}, {bid}) but LTs routed {:?}", routed[i]),
                );
            }
        }
        for t in 0..self.steps.len() {
            let mut total = 0.0;
            for (i, steps) in self.lp.iter().enumerate() {
                let s = &steps[t];
                let m = s.share.unwrap_or(0.0);
                if !(0.0..=1.0).contains(&m) || !(0.0..=1.0 + 1e-12).contains(&s.avg_share) {
                    return breach("sim.share_bounds", format!("LP {i} share {m} average {} at step {t}", s.avg_share));
                }
                total += m;
            }
            if total > 1.0 + 1e-9 {
                return breach("sim.share_bounds", format!("LP shares sum to {total} at step {t}"));
            }
        }
        if let Some(k) = self
            .lp_ledgers
            .iter()
            .chain(&self.lt_ledgers)
            .position(|l| !(l.total().is_finite() && l.cash.is_finite()))
        {
            return breach("sim.finite_pnl", format!("ledger {k} is not finite"));
        }
        Ok(())
    }
}

fn best_index<R: Rng + ?Sized>(candidates: &[(Venue, f64)], direction: Direction, rng: &mut R) -> Option<usize> {
    let better = |a: f64, b: f64| match direction {
        Direction::Buy => a < b,
        Direction::Sell => a > b,
    };
    let best = candidates.iter().map(|c| c.1).reduce(|a, b| if better(b, a) { b } else { a })?;
    let tol = 1e-12 * best.abs().max(1.0);
    let tied: Vec<usize> = (0..candidates.len()).filter(|i| (candidates[*i].1 - best).abs() <= tol).collect();
    Some(tied[rng.random_range(0..tied.len())])
}

/// Picks the venue with the best price for the LT (lowest for a buy, highest
/// for a sell). Ties are broken uniformly at random.
pub fn route_trade<R: Rng + ?Sized>(direction: Direction, lp_prices: &[(usize, f64)], ecn_price: Option<f64>, rng: &mut R) -> Option<(Venue, f64)> {
    let mut c: Vec<(Venue, f64)> = lp_prices.iter().map(|(i, p)| (Venue::Lp(*i), *p)).collect();
    if let Some(p) = ecn_price {
        c.push((Venue::Ecn, p));
    }
    best_index(&c, direction, rng).map(|i| c[i])
}

fn clamp_lp_action(a: LpAction) -> (LpAction, bool) {
    let mut c = a;
    if !c.spread.is_finite() {
        c.spread = 0.0;
    }
    if !c.skew.is_finite() {
        c.skew = 0.0;
    }
    c.spread = c.spread.max(-1.0);
    c.hedge = if c.hedge.is_finite() { c.hedge.clamp(0.0, 1.0) } else { 0.0 };
    (c, c != a)
}

struct Rngs {
    population: SimRng,
    ecn: SimRng,
    decisions: SimRng,
    routing: SimRng,
}

impl Rngs {
    fn new(seed: u64) -> Self {
        Rngs {
            population: substream(seed, "population", 0),
            ecn: substream(seed, "ecn", 0),
            decisions: substream(seed, "decisions", 0),
            routing: substream(seed, "routing", 0),
        }
    }
}

const ECN_ID: AgentId = AgentId(0);

fn lp_id(i: usize) -> AgentId {
    AgentId(1 + i as u32)
}

fn lt_id(n_lp: usize, k: usize) -> AgentId {
    AgentId((1 + n_lp + k) as u32)
}

/// Runs one episode whose randomness is derived from `rng`.
pub fn run_episode(config: &EpisodeConfig, lp_policy: &dyn LpPolicy, lt_policy: &dyn LtPolicy, rng: &mut SimRng) -> Result<Trajectory, SimError> {
    let seed: u64 = rng.random();
    run_episode_seeded(config, lp_policy, lt_policy, seed)
}

/// Runs a batch of episodes in parallel; episode `b` uses its own substream
/// of `config.seed`, so results do not depend on the thread count.
pub fn run_batch(config: &EpisodeConfig, lp_policy: &dyn LpPolicy, lt_policy: &dyn LtPolicy, first: u64, n: usize) -> Result<Vec<Trajectory>, SimError> {
    (0..n as u64)
        .into_par_iter()
        .map(|b| run_episode_seeded(config, lp_policy, lt_policy, substream_seed(config.seed, "episode", first + b)))
        .collect()
}

fn ecn_view(book: &OrderBook) -> Result<EcnView, SimError> {
    EcnView::from_book(book).ok_or(SimError::Ecn(EcnError::EmptyBook))
}

pub fn run_episode_seeded(config: &EpisodeConfig, lp_policy: &dyn LpPolicy, lt_policy: &dyn LtPolicy, seed: u64) -> Result<Trajectory, SimError> {
    config.validate()?;
    let mut rngs = Rngs::new(seed);
    let population = sample_population(&config.profile, &mut rngs.population)?;
    let n_lp = population.lp.len();
    let n_lt = population.lt.len();
    let horizon = config.horizon;
    let grid = config.price_grid()?;
    let tick = grid.tick();
    let sampler = config.ecn.sampler()?;
    let mut ecn = EcnAgent::new(ECN_ID, config.ecn.shape, config.ecn.size_dist.clone())?;
    let init = sampler.sample_initial(&mut rngs.ecn);
    let mut book = initial_book(grid, config.p0, &init, &config.ecn.shape, ECN_ID)?;

    let mut lp_ledgers = vec![PnlLedger::default(); n_lp];
    let mut lt_ledgers = vec![PnlLedger::default(); n_lt];
    let mut lp_steps: Vec<Vec<LpStep>> = vec![Vec::with_capacity(horizon); n_lp];
    let mut lt_steps: Vec<Vec<LtStep>> = vec![Vec::with_capacity(horizon); n_lt];
    let mut steps = Vec::with_capacity(horizon);
    let mut share_sum = vec![0.0; n_lp];
    let mut active_steps = 0usize;
    let mut fractions = vec![TradeFractions::default(); n_lt];
    let mut clamped = 0usize;
    let mut skipped = 0usize;
    let mut failed_hedges = 0usize;
    let mut last_mid = config.p0;
    let mut lt_order: Vec<usize> = (0..n_lt).collect();

    ecn.step(&mut book, &sampler.sample_variation(&mut rngs.ecn), &mut rngs.ecn)?;
    let mut mid = book.mid().ok_or(EcnError::EmptyBook)?;

    for t in 0..horizon {
        let view = ecn_view(&book)?;
        let x_t = view.market_spread;
        let spread_ticks = book.spread_ticks().unwrap_or(0);
        let mid_move_ticks = (mid - last_mid) / tick;
        let time_fraction = t as f64 / horizon as f64;
        let top = view.top_volumes(config.ecn.m);

        let mut lp_trades: Vec<Vec<Trade>> = vec![Vec::new(); n_lp];
        let mut lt_trades: Vec<Vec<Trade>> = vec![Vec::new(); n_lt];
        let mut quotes: Vec<LpQuote> = Vec::with_capacity(n_lp);
        for i in 0..n_lp {
            let q = lp_ledgers[i].inventory;
            let hedge_dir = if q > 0 { Direction::Sell } else { Direction::Buy };
            let hedge_costs = config
                .hedge_cost_grid
                .iter()
                .map(|f| {
                    let size = (f * q.unsigned_abs() as f64).round() as u64;
                    if size == 0 {
                        0.0
                    } else {
                        view.walk_cost(hedge_dir, size).unwrap_or(f64::INFINITY).min(1e3 * x_t) / x_t
                    }
                })
                .collect();
            let obs = LpObservation {
                mid,
                mid_move_ticks,
                market_spread_ticks: spread_ticks as f64,
                inventory: q,
                time_fraction,
                market_share: if active_steps > 0 { share_sum[i] / active_steps as f64 } else { 0.0 },
                top_volumes: top.clone(),
                hedge_costs,
            };
            let d = lp_policy.decide(&obs, &population.lp[i], &mut rngs.decisions);
            let (action, was_clamped) = clamp_lp_action(d.action);
            clamped += usize::from(was_clamped);
            quotes.push(lp_quote(&action, &view, config.lp_increment)?);
            lp_steps[i].push(LpStep {
                obs,
                action,
                key: d.key,
                reward: 0.0,
                pnl: PnlDelta::default(),
                flow_ask: 0,
                flow_bid: 0,
                hedge_qty: 0,
                hedge_failed: false,
                share: None,
                avg_share: 0.0,
            });
        }

        let hedge = |book: &mut OrderBook, lp_steps: &mut [Vec<LpStep>], lp_trades: &mut [Vec<Trade>], failed: &mut usize| {
            for i in 0..n_lp {
                let st = lp_steps[i].last_mut().expect("pushed above");
                let q = st.obs.inventory;
                let size = (st.action.hedge * q.unsigned_abs() as f64).round() as u64;
                if size == 0 {
                    continue;
                }
                let dir = if q > 0 { Direction::Sell } else { Direction::Buy };
                match book.submit_market(dir, size, lp_id(i)) {
                    Ok(exec) => {
                        for f in &exec.fills {
                            lp_trades[i].push(Trade {
                                qty: dir.sign() * f.qty as i64,
                                price: f.price,
                            });
                        }
                        st.hedge_qty = dir.sign() * size as i64;
                    }
                    Err(_) => {
                        st.hedge_failed = true;
                        *failed += 1;
                    }
                }
            }
        };
        if config.hedge_timing == HedgeTiming::BeforeTrades {
            hedge(&mut book, &mut lp_steps, &mut lp_trades, &mut failed_hedges);
        }

        lt_order.shuffle(&mut rngs.routing);
        let mut lp_flow = vec![0u64; n_lp];
        let mut ecn_flow = 0u64;
        let mut lt_pending: Vec<Option<LtStep>> = vec![None; n_lt];
        for &k in &lt_order {
            let ty = &population.lt[k];
            let qty = ty.trade_size;
            let connected: Vec<usize> = (0..n_lp).filter(|i| population.links[*i][k]).collect();
            let price_list = |dir: Direction, book: &OrderBook| -> (Vec<(usize, f64)>, Option<f64>) {
                let lps = connected
                    .iter()
                    .filter_map(|i| quotes[*i].price_for(&view, dir, qty).ok().map(|p| (*i, p)))
                    .collect();
                (lps, book.vwap_for(dir, qty).ok())
            };
            let best_price = |dir: Direction, book: &OrderBook| -> Option<f64> {
                let (lps, e) = price_list(dir, book);
                let all = lps.iter().map(|x| x.1).chain(e);
                match dir {
                    Direction::Buy => all.reduce(f64::min),
                    Direction::Sell => all.reduce(f64::max),
                }
            };
            let (sell_frac, buy_frac) = fractions[k].fractions();
            let obs = LtObservation {
                mid,
                mid_move_ticks,
                inventory: lt_ledgers[k].inventory,
                time_fraction,
                sell_fraction: sell_frac,
                buy_fraction: buy_frac,
                buy_cost: best_price(Direction::Buy, &book).map_or(f64::INFINITY, |p| (p - mid) / x_t),
                sell_cost: best_price(Direction::Sell, &book).map_or(f64::INFINITY, |p| (mid - p) / x_t),
            };
            let d = lt_policy.decide(&obs, ty, &mut rngs.decisions);
            let mut step = LtStep {
                obs,
                action: d.action,
                key: d.key,
                reward: 0.0,
                pnl: PnlDelta::default(),
                venue: None,
                price: None,
                filled: 0,
                skipped: false,
            };
            if let Some(dir) = d.action.direction() {
                let (lps, e) = price_list(dir, &book);
                match route_trade(dir, &lps, e, &mut rngs.routing) {
                    Some((Venue::Lp(i), p)) => {
                        lp_trades[i].push(Trade {
                            qty: -dir.sign() * qty as i64,
                            price: p,
                        });
                        lt_trades[k].push(Trade {
                            qty: dir.sign() * qty as i64,
                            price: p,
                        });
                        lp_flow[i] += qty;
                        let st = lp_steps[i].last_mut().expect("pushed above");
                        match dir {
                            Direction::Buy => st.flow_ask += qty,
                            Direction::Sell => st.flow_bid += qty,
                        }
                        step.venue = Some(Venue::Lp(i));
                        step.price = Some(p);
                        step.filled = qty;
                    }
                    Some((Venue::Ecn, _)) => {
                        let exec = book.submit_market(dir, qty, lt_id(n_lp, k))?;
                        for f in &exec.fills {
                            lt_trades[k].push(Trade {
                                qty: dir.sign() * f.qty as i64,
                                price: f.price,
                            });
                        }
                        ecn_flow += qty;
                        step.venue = Some(Venue::Ecn);
                        step.price = exec.vwap();
                        step.filled = qty;
                    }
                    None => {
                        step.skipped = true;
                        skipped += 1;
                    }
                }
            }
            lt_pending[k] = Some(step);
        }
        if config.hedge_timing == HedgeTiming::AfterTrades {
            hedge(&mut book, &mut lp_steps, &mut lp_trades, &mut failed_hedges);
        }

        let lt_volume: u64 = lp_flow.iter().sum::<u64>() + ecn_flow;
        if lt_volume > 0 {
            active_steps += 1;
        }
        ecn.step(&mut book, &sampler.sample_variation(&mut rngs.ecn), &mut rngs.ecn)?;
        let next_mid = book.mid().ok_or(EcnError::EmptyBook)?;

        for i in 0..n_lp {
            let st = lp_steps[i].last_mut().expect("pushed above");
            let prev_avg = st.obs.market_share;
            if lt_volume > 0 {
                let share = lp_flow[i] as f64 / lt_volume as f64;
                share_sum[i] += share;
                st.share = Some(share);
            }
            st.avg_share = if active_steps > 0 { share_sum[i] / active_steps as f64 } else { 0.0 };
            st.pnl = lp_ledgers[i].update(&lp_trades[i], mid, next_mid);
            st.reward = lp_reward(&population.lp[i], &st.pnl, prev_avg, st.avg_share);
        }
        for k in 0..n_lt {
            let mut st = lt_pending[k].take().expect("every LT decided");
            let before = fractions[k];
            fractions[k].push(st.action);
            st.pnl = lt_ledgers[k].update(&lt_trades[k], mid, next_mid);
            st.reward = lt_reward(&population.lt[k], &st.pnl, &before, &fractions[k]);
            lt_steps[k].push(st);
        }
        steps.push(StepSummary {
            t,
            mid,
            next_mid,
            spread_ticks,
            lt_volume,
            ecn_lt_volume: ecn_flow,
            ecn_share: (lt_volume > 0).then(|| ecn_flow as f64 / lt_volume as f64),
        });
        last_mid = mid;
        mid = next_mid;
    }

    Ok(Trajectory {
        population,
        hedge_timing: config.hedge_timing,
        lp: lp_steps,
        lt: lt_steps,
        steps,
        lp_ledgers,
        lt_ledgers,
        clamped_actions: clamped,
        skipped_trades: skipped,
        failed_hedges,
    })
}

#[cfg(test)]
mod tests;
