//! Single-LT environment on a fixed mid path, used to trace how learned
//! trading shifts from quantity targets to PnL as the PnL weight grows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LtObservation, LtPolicy, SimError, TabularLt};
use crate::agents::{lt_reward, LtAction, LtType, PnlLedger, Trade, TradeFractions};
use crate::policy::{ascent_step, grad_estimate, AgentEpisode, Baseline, Step};
use crate::rng::{substream, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPathEnv {
    /// Mid prices `P_0..=P_T`.
    pub path: Vec<f64>,
    /// Distance from mid at which the LT trades.
    pub half_spread: f64,
    pub tick: f64,
}

impl FixedPathEnv {
    /// `P_t = p0 + amplitude * sin(2 pi periods t / T)`.
    pub fn sine(horizon: usize, p0: f64, amplitude: f64, periods: f64, half_spread: f64, tick: f64) -> Self {
        let path = (0..=horizon)
            .map(|t| p0 + amplitude * (std::f64::consts::TAU * periods * t as f64 / horizon as f64).sin())
            .collect();
        FixedPathEnv { path, half_spread, tick }
    }

    pub fn horizon(&self) -> usize {
        self.path.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.path.len() < 2 || self.path.iter().any(|p| !p.is_finite()) || !(self.tick > 0.0) || !(self.half_spread >= 0.0) {
            return Err(SimError::Config("fixed path needs at least two finite prices and positive tick".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEpisode {
    pub actions: Vec<LtAction>,
    pub steps: AgentEpisode,
    pub rewards: Vec<f64>,
    pub ledger: PnlLedger,
    pub fractions: TradeFractions,
}

impl SpectrumEpisode {
    pub fn pnl(&self) -> f64 {
        self.ledger.total()
    }
}

pub fn run_fixed_path(env: &FixedPathEnv, policy: &dyn LtPolicy, ty: &LtType, rng: &mut SimRng) -> SpectrumEpisode {
    let horizon = env.horizon();
    let mut ledger = PnlLedger::default();
    let mut fractions = TradeFractions::default();
    let mut actions = Vec::with_capacity(horizon);
    let mut steps = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let spread_units = if env.half_spread > 0.0 { 1.0 } else { 0.0 };
    for t in 0..horizon {
        let mid = env.path[t];
        let (sell_fraction, buy_fraction) = fractions.fractions();
        let obs = LtObservation {
            mid,
            mid_move_ticks: if t > 0 { (mid - env.path[t - 1]) / env.tick } else { 0.0 },
            inventory: ledger.inventory,
            time_fraction: t as f64 / horizon as f64,
            sell_fraction,
            buy_fraction,
            buy_cost: 0.5 * spread_units,
            sell_cost: 0.5 * spread_units,
        };
        let d = policy.decide(&obs, ty, rng);
        let trades: Vec<Trade> = match d.action.direction() {
            Some(dir) => {
                let s = dir.sign();
                vec![Trade {
                    qty: s * ty.trade_size as i64,
                    price: mid + s as f64 * env.half_spread,
                }]
            }
            None => Vec::new(),
        };
        let before = fractions;
        fractions.push(d.action);
        let pnl = ledger.update(&trades, mid, env.path[t + 1]);
        let r = lt_reward(ty, &pnl, &before, &fractions);
        actions.push(d.action);
        rewards.push(r);
        if let Some(key) = d.key {
            steps.push(Step { key, reward: r });
        }
    }
    SpectrumEpisode {
        actions,
        steps,
        rewards,
        ledger,
        fractions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumTrainOptions {
    pub iterations: usize,
    pub batch: usize,
    pub step: f64,
    pub baseline: Baseline,
    pub seed: u64,
}

impl Default for SpectrumTrainOptions {
    fn default() -> Self {
        SpectrumTrainOptions {
            iterations: 300,
            batch: 32,
            step: 0.5,
            baseline: Baseline::MeanRewardToGo,
            seed: 0,
        }
    }
}

/// Trains one shared table for all `types` together; every episode holds one
/// independent agent per type.
pub fn train_fixed_path(env: &FixedPathEnv, policy: &mut TabularLt, types: &[LtType], opts: &SpectrumTrainOptions) -> Result<Vec<f64>, SimError> {
    env.validate()?;
    let mut returns = Vec::with_capacity(opts.iterations);
    for it in 0..opts.iterations {
        let mut batch = Vec::with_capacity(opts.batch);
        let mut total = 0.0;
        for b in 0..opts.batch {
            let mut rng = substream(opts.seed, "spectrum", (it * opts.batch + b) as u64);
            let eps: Vec<AgentEpisode> = types
                .iter()
                .map(|ty| {
                    let e = run_fixed_path(env, &*policy, ty, &mut rng);
                    total += e.rewards.iter().sum::<f64>();
                    e.steps
                })
                .collect();
            batch.push(eps);
        }
        // Baselines are kept per type since reward scales differ across weights.
        let mut shared = vec![0.0; policy.table.len()];
        for i in 0..types.len() {
            let own: Vec<Vec<AgentEpisode>> = batch.iter().map(|ep| vec![ep[i].clone()]).collect();
            let g = grad_estimate(&own, &policy.table, 1.0, opts.baseline)?;
            shared.iter_mut().zip(&g.shared).for_each(|(s, v)| *s += v);
        }
        ascent_step(&mut policy.table, &shared, opts.step)?;
        returns.push(total / (opts.batch * types.len().max(1)) as f64);
    }
    Ok(returns)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub omega: f64,
    pub sell_fraction: f64,
    pub buy_fraction: f64,
    pub pnl: f64,
}

/// Mean end-of-episode trade fractions and PnL of each type.
pub fn evaluate_fixed_path<R: Rng + ?Sized>(env: &FixedPathEnv, policy: &dyn LtPolicy, types: &[LtType], episodes: usize, rng: &mut R) -> Vec<SpectrumPoint> {
    let seed: u64 = rng.random();
    types
        .iter()
        .map(|ty| {
            let mut sell = 0.0;
            let mut buy = 0.0;
            let mut pnl = 0.0;
            for e in 0..episodes {
                let mut r = substream(seed, "evaluate", e as u64);
                let ep = run_fixed_path(env, policy, ty, &mut r);
                let (s, b) = ep.fractions.fractions();
                sell += s;
                buy += b;
                pnl += ep.pnl();
            }
            let n = episodes.max(1) as f64;
            SpectrumPoint {
                omega: ty.omega,
                sell_fraction: sell / n,
                buy_fraction: buy / n,
                pnl: pnl / n,
            }
        })
        .collect()
}
