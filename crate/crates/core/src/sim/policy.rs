//! Agent policies used during rollouts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LpObservation, LtObservation};
use crate::agents::{LpAction, LpType, LtAction, LtType};
use crate::policy::{Parameterization, PolicyError, TableKey, TabularPolicy};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Decision<A> {
    pub action: A,
    pub key: Option<TableKey>,
}

impl<A> Decision<A> {
    pub fn fixed(action: A) -> Self {
        Decision { action, key: None }
    }
}

pub trait LpPolicy: Sync {
    fn decide(&self, obs: &LpObservation, ty: &LpType, rng: &mut SimRng) -> Decision<LpAction>;
}

pub trait LtPolicy: Sync {
    fn decide(&self, obs: &LtObservation, ty: &LtType, rng: &mut SimRng) -> Decision<LtAction>;
}

/// Always quotes the same action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedLp(pub LpAction);

impl LpPolicy for FixedLp {
    fn decide(&self, _: &LpObservation, _: &LpType, _: &mut SimRng) -> Decision<LpAction> {
        Decision::fixed(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedLt(pub LtAction);

impl LtPolicy for FixedLt {
    fn decide(&self, _: &LtObservation, _: &LtType, _: &mut SimRng) -> Decision<LtAction> {
        Decision::fixed(self.0)
    }
}

/// Buys with probability `buy`, sells with probability `sell`, otherwise idles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryLt {
    pub buy: f64,
    pub sell: f64,
}

impl Default for StationaryLt {
    fn default() -> Self {
        StationaryLt { buy: 0.5, sell: 0.5 }
    }
}

impl LtPolicy for StationaryLt {
    fn decide(&self, _: &LtObservation, _: &LtType, rng: &mut SimRng) -> Decision<LtAction> {
        let u: f64 = rng.random();
        let action = if u < self.buy {
            LtAction::Buy
        } else if u < self.buy + self.sell {
            LtAction::Sell
        } else {
            LtAction::Idle
        };
        Decision::fixed(action)
    }
}

/// Stationary behavior chosen by the LT's supertype; the last entry covers
/// any supertype beyond the list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupertypeLt(pub Vec<StationaryLt>);

impl LtPolicy for SupertypeLt {
    fn decide(&self, obs: &LtObservation, ty: &LtType, rng: &mut SimRng) -> Decision<LtAction> {
        match self.0.get(ty.supertype).or(self.0.last()) {
            Some(p) => p.decide(obs, ty, rng),
            None => Decision::fixed(LtAction::Idle),
        }
    }
}

/// Uniform bucketing of one feature: bucket `i` collects values with exactly
/// `i` edges at or below them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBins<F> {
    pub feature: F,
    pub edges: Vec<f64>,
}

impl<F> FeatureBins<F> {
    pub fn n_buckets(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn bucket(&self, x: f64) -> usize {
        self.edges.iter().take_while(|e| x >= **e).count()
    }
}

/// Mixed-radix product of per-feature buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretizer<F> {
    pub bins: Vec<FeatureBins<F>>,
}

impl<F> Default for Discretizer<F> {
    fn default() -> Self {
        Discretizer { bins: Vec::new() }
    }
}

impl<F> Discretizer<F> {
    pub fn new(bins: Vec<FeatureBins<F>>) -> Self {
        Discretizer { bins }
    }

    pub fn n_buckets(&self) -> usize {
        self.bins.iter().map(FeatureBins::n_buckets).product()
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        for b in &self.bins {
            if b.edges.iter().any(|e| !e.is_finite()) || b.edges.windows(2).any(|w| w[0] >= w[1]) {
                return Err(PolicyError::Invalid("bin edges must be finite and increasing".into()));
            }
        }
        Ok(())
    }

    pub fn index(&self, value: impl Fn(&F) -> f64) -> usize {
        self.bins.iter().fold(0, |acc, b| acc * b.n_buckets() + b.bucket(value(&b.feature)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpFeature {
    Inventory,
    TimeFraction,
    MarketShare,
    MidMove,
    MarketSpread,
    TopVolume(usize),
    HedgeCost(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpTypeFeature {
    Gamma,
    Eta,
    Omega,
    MarketShareTarget,
    Connectivity(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LtFeature {
    Inventory,
    TimeFraction,
    MidMove,
    SellFraction,
    BuyFraction,
    /// Running sell fraction minus the sell target.
    SellGap,
    /// Running buy fraction minus the buy target.
    BuyGap,
    BuyCost,
    SellCost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LtTypeFeature {
    Gamma,
    Eta,
    Omega,
    SellTarget,
    BuyTarget,
    TradeSize,
    Connectivity(usize),
}

pub fn lp_feature(obs: &LpObservation, f: LpFeature) -> f64 {
    match f {
        LpFeature::Inventory => obs.inventory as f64,
        LpFeature::TimeFraction => obs.time_fraction,
        LpFeature::MarketShare => obs.market_share,
        LpFeature::MidMove => obs.mid_move_ticks,
        LpFeature::MarketSpread => obs.market_spread_ticks,
        LpFeature::TopVolume(i) => obs.top_volumes.get(i).copied().unwrap_or(0.0),
        LpFeature::HedgeCost(i) => obs.hedge_costs.get(i).copied().unwrap_or(0.0),
    }
}

pub fn lp_type_feature(ty: &LpType, f: LpTypeFeature) -> f64 {
    match f {
        LpTypeFeature::Gamma => ty.gamma,
        LpTypeFeature::Eta => ty.eta,
        LpTypeFeature::Omega => ty.omega,
        LpTypeFeature::MarketShareTarget => ty.market_share_target,
        LpTypeFeature::Connectivity(c) => ty.connected_fraction.get(c).copied().unwrap_or(0.0),
    }
}

pub fn lt_feature(obs: &LtObservation, ty: &LtType, f: LtFeature) -> f64 {
    match f {
        LtFeature::Inventory => obs.inventory as f64,
        LtFeature::TimeFraction => obs.time_fraction,
        LtFeature::MidMove => obs.mid_move_ticks,
        LtFeature::SellFraction => obs.sell_fraction,
        LtFeature::BuyFraction => obs.buy_fraction,
        LtFeature::SellGap => obs.sell_fraction - ty.sell_target,
        LtFeature::BuyGap => obs.buy_fraction - ty.buy_target,
        LtFeature::BuyCost => obs.buy_cost,
        LtFeature::SellCost => obs.sell_cost,
    }
}

pub fn lt_type_feature(ty: &LtType, f: LtTypeFeature) -> f64 {
    match f {
        LtTypeFeature::Gamma => ty.gamma,
        LtTypeFeature::Eta => ty.eta,
        LtTypeFeature::Omega => ty.omega,
        LtTypeFeature::SellTarget => ty.sell_target,
        LtTypeFeature::BuyTarget => ty.buy_target,
        LtTypeFeature::TradeSize => ty.trade_size as f64,
        LtTypeFeature::Connectivity(c) => ty.connected_fraction.get(c).copied().unwrap_or(0.0),
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Shared tabular LP policy over a discrete action grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularLp {
    pub version: u32,
    pub table: TabularPolicy,
    pub states: Discretizer<LpFeature>,
    pub types: Discretizer<LpTypeFeature>,
    pub actions: Vec<LpAction>,
}

impl TabularLp {
    pub fn new(
        param: Parameterization,
        states: Discretizer<LpFeature>,
        types: Discretizer<LpTypeFeature>,
        actions: Vec<LpAction>,
    ) -> Result<Self, PolicyError> {
        states.validate()?;
        types.validate()?;
        for a in &actions {
            a.validate().map_err(|e| PolicyError::Invalid(e.to_string()))?;
        }
        let table = TabularPolicy::uniform(param, states.n_buckets(), types.n_buckets(), actions.len())?;
        Ok(TabularLp {
            version: CHECKPOINT_VERSION,
            table,
            states,
            types,
            actions,
        })
    }

    /// Cartesian product of spread, skew and hedge grids.
    pub fn action_grid(spreads: &[f64], skews: &[f64], hedges: &[f64]) -> Vec<LpAction> {
        let mut out = Vec::new();
        for s in spreads {
            for k in skews {
                for h in hedges {
                    out.push(LpAction {
                        spread: *s,
                        skew: *k,
                        hedge: *h,
                    });
                }
            }
        }
        out
    }

    pub fn state_index(&self, obs: &LpObservation) -> usize {
        self.states.index(|f| lp_feature(obs, *f))
    }

    pub fn type_index(&self, ty: &LpType) -> usize {
        self.types.index(|f| lp_type_feature(ty, *f))
    }
}

impl LpPolicy for TabularLp {
    fn decide(&self, obs: &LpObservation, ty: &LpType, rng: &mut SimRng) -> Decision<LpAction> {
        let key = self.table.sample(self.state_index(obs), self.type_index(ty), rng);
        Decision {
            action: self.actions[key.action],
            key: Some(key),
        }
    }
}

pub const LT_ACTIONS: [LtAction; 3] = [LtAction::Buy, LtAction::Sell, LtAction::Idle];

/// Shared tabular LT policy over buy, sell and idle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularLt {
    pub version: u32,
    pub table: TabularPolicy,
    pub states: Discretizer<LtFeature>,
    pub types: Discretizer<LtTypeFeature>,
}

impl TabularLt {
    pub fn new(param: Parameterization, states: Discretizer<LtFeature>, types: Discretizer<LtTypeFeature>) -> Result<Self, PolicyError> {
        states.validate()?;
        types.validate()?;
        let table = TabularPolicy::uniform(param, states.n_buckets(), types.n_buckets(), LT_ACTIONS.len())?;
        Ok(TabularLt {
            version: CHECKPOINT_VERSION,
            table,
            states,
            types,
        })
    }

    pub fn state_index(&self, obs: &LtObservation, ty: &LtType) -> usize {
        self.states.index(|f| lt_feature(obs, ty, *f))
    }

    pub fn type_index(&self, ty: &LtType) -> usize {
        self.types.index(|f| lt_type_feature(ty, *f))
    }
}

impl LtPolicy for TabularLt {
    fn decide(&self, obs: &LtObservation, ty: &LtType, rng: &mut SimRng) -> Decision<LtAction> {
        let key = self.table.sample(self.state_index(obs, ty), self.type_index(ty), rng);
        Decision {
            action: LT_ACTIONS[key.action],
            key: Some(key),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_count_edges_at_or_below() {
        let b = FeatureBins {
            feature: LpFeature::Inventory,
            edges: vec![-0.5, 0.5],
        };
        assert_eq!(b.bucket(-3.0), 0);
        assert_eq!(b.bucket(-0.5), 1);
        assert_eq!(b.bucket(0.0), 1);
        assert_eq!(b.bucket(0.5), 2);
    }

    #[test]
    fn mixed_radix_index() {
        let d = Discretizer::new(vec![
            FeatureBins {
                feature: LpFeature::Inventory,
                edges: vec![0.0],
            },
            FeatureBins {
                feature: LpFeature::TimeFraction,
                edges: vec![0.25, 0.5, 0.75],
            },
        ]);
        assert_eq!(d.n_buckets(), 8);
        let idx = d.index(|f| match f {
            LpFeature::Inventory => 1.0,
            _ => 0.6,
        });
        assert_eq!(idx, 4 + 2);
        assert_eq!(Discretizer::<LpFeature>::default().n_buckets(), 1);
        assert!(Discretizer::new(vec![FeatureBins {
            feature: LpFeature::Inventory,
            edges: vec![1.0, 0.0]
        }])
        .validate()
        .is_err());
    }

    #[test]
    fn action_grid_is_cartesian() {
        let g = TabularLp::action_grid(&[0.0, 1.0], &[-0.5, 0.0, 0.5], &[0.0]);
        assert_eq!(g.len(), 6);
        assert_eq!(
            g[4],
            LpAction {
                spread: 1.0,
                skew: 0.0,
                hedge: 0.0
            }
        );
    }
}
