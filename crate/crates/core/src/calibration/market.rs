//! Desk-scale market calibration problem: LP supertype connectivities and
//! risk-aversion distributions are calibrated against market-share targets
//! while a shared LP table learns.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::objective::{calib_reward, fitted_values, CalStats, CalibrationTargets};
use super::{CalibrationEnv, CalibrationError, EpisodeOutcome, ParamBox};
use crate::agents::{LpSupertype, LtSupertype, ParamDist, SupertypeProfile};
use crate::ecn::EcnModel;
use crate::policy::{ascent_step, grad_estimate, Baseline, Parameterization};
use crate::rng::substream_seed;
use crate::sim::train::lp_episodes;
use crate::sim::{run_episode_seeded, Discretizer, EpisodeConfig, FeatureBins, LpFeature, LpTypeFeature, StationaryLt, SupertypeLt, TabularLp, Trajectory};

/// Largest risk-aversion mean and standard deviation the calibrator may set.
pub const GAMMA_MEAN_MAX: f64 = 5.0;
pub const GAMMA_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketCalibration {
    pub horizon: usize,
    /// Agents per LP supertype.
    pub lp_counts: Vec<usize>,
    /// Agents per LT supertype.
    pub lt_counts: Vec<usize>,
    pub lt_trade_sizes: Vec<u64>,
    /// Probability that a frozen LT buys, and separately that it sells, each step.
    pub lt_trade_prob: f64,
    /// Also calibrate each LP supertype's risk-aversion mean and std.
    pub calibrate_gamma: bool,
    pub lp_eta: f64,
    pub lp_omega: f64,
    pub spreads: Vec<f64>,
    pub skews: Vec<f64>,
    pub inventory_edges: Vec<f64>,
    pub gamma_edges: Vec<f64>,
    pub zeta: f64,
    pub targets: CalibrationTargets,
    pub seed: u64,
}

impl Default for MarketCalibration {
    fn default() -> Self {
        MarketCalibration {
            horizon: 20,
            lp_counts: vec![1, 3],
            lt_counts: vec![6, 6],
            lt_trade_sizes: vec![1, 2],
            lt_trade_prob: 0.5,
            calibrate_gamma: true,
            lp_eta: 1e4,
            lp_omega: 1.0,
            spreads: vec![-0.5, 0.0, 1.0],
            skews: vec![0.0],
            inventory_edges: vec![-2.5, 2.5],
            gamma_edges: vec![1.0],
            zeta: 1.0,
            targets: CalibrationTargets::experiment4(),
            seed: 0,
        }
    }
}

impl MarketCalibration {
    fn per_lp(&self) -> usize {
        self.lt_counts.len() + if self.calibrate_gamma { 2 } else { 0 }
    }

    pub fn dim(&self) -> usize {
        self.lp_counts.len() * self.per_lp()
    }

    /// Coordinate names: per LP supertype, its connectivity to each LT
    /// supertype, then the risk-aversion mean and std.
    pub fn coordinate_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.lp_counts.len() {
            out.extend((0..self.lt_counts.len()).map(|k| format!("lp{i}_conn_lt{k}")));
            if self.calibrate_gamma {
                out.push(format!("lp{i}_gamma_mean"));
                out.push(format!("lp{i}_gamma_std"));
            }
        }
        out
    }

    fn coordinate_range(&self, j: usize) -> f64 {
        match j % self.per_lp() {
            k if k < self.lt_counts.len() => 1.0,
            k if k == self.lt_counts.len() => GAMMA_MEAN_MAX,
            _ => GAMMA_STD_MAX,
        }
    }

    pub fn state_box(&self) -> ParamBox {
        let d = self.dim();
        ParamBox {
            lo: vec![0.0; d],
            hi: (0..d).map(|j| self.coordinate_range(j)).collect(),
        }
    }

    /// Increments may span the whole state range in either direction.
    pub fn action_box(&self) -> ParamBox {
        let hi: Vec<f64> = (0..self.dim()).map(|j| self.coordinate_range(j)).collect();
        ParamBox {
            lo: hi.iter().map(|h| -h).collect(),
            hi,
        }
    }

    /// Connectivities at one half, risk-aversion mean one and std one half.
    pub fn default_lambda0(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| match j % self.per_lp() {
                k if k < self.lt_counts.len() => 0.5,
                k if k == self.lt_counts.len() => 1.0,
                _ => 0.5,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |m: &str| Err(CalibrationError::Config(m.into()));
        if self.lp_counts.is_empty() || self.lt_counts.is_empty() || self.lp_counts.contains(&0) {
            return bad("LP and LT supertypes need agents");
        }
        if self.lt_trade_sizes.len() != self.lt_counts.len() || self.lt_trade_sizes.contains(&0) {
            return bad("one positive trade size per LT supertype is required");
        }
        if !(0.0..=0.5).contains(&self.lt_trade_prob) || self.spreads.is_empty() || self.skews.is_empty() || self.horizon == 0 {
            return bad("trade probability must lie in [0, 0.5] and the action grid and horizon must be non-empty");
        }
        self.targets.validate()
    }

    pub fn profile(&self, lambda: &[f64]) -> Result<SupertypeProfile, CalibrationError> {
        if lambda.len() != self.dim() {
            return Err(CalibrationError::Config(format!(
                "profile needs {} coordinates, got {}",
                self.dim(),
                lambda.len()
            )));
        }
        let lambda = self.state_box().clamp(lambda);
        let k = self.lt_counts.len();
        let lp = self
            .lp_counts
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let p = &lambda[i * self.per_lp()..(i + 1) * self.per_lp()];
                let mut st = LpSupertype::point(&format!("lp{i}"), 0.0, self.lp_eta, self.lp_omega, p[..k].to_vec());
                if self.calibrate_gamma {
                    st.gamma = ParamDist::ClippedNormal {
                        mean: p[k],
                        std: p[k + 1],
                        lo: 0.0,
                        hi: GAMMA_MEAN_MAX,
                    };
                }
                (st, *n)
            })
            .collect();
        let lt = self
            .lt_counts
            .iter()
            .zip(&self.lt_trade_sizes)
            .enumerate()
            .map(|(k, (n, size))| {
                (
                    LtSupertype::point(&format!("lt{k}"), self.lp_eta, 0.0, 0.5, 0.5, *size, vec![1.0; self.lp_counts.len()]),
                    *n,
                )
            })
            .collect();
        Ok(SupertypeProfile { lp, lt })
    }

    /// A fresh shared LP table for this problem.
    pub fn initial_policy(&self) -> Result<TabularLp, CalibrationError> {
        let states = Discretizer::new(vec![FeatureBins {
            feature: LpFeature::Inventory,
            edges: self.inventory_edges.clone(),
        }]);
        let types = Discretizer::new(vec![FeatureBins {
            feature: LpTypeFeature::Gamma,
            edges: self.gamma_edges.clone(),
        }]);
        let actions = TabularLp::action_grid(&self.spreads, &self.skews, &[0.0]);
        TabularLp::new(Parameterization::Softmax, states, types, actions).map_err(|e| CalibrationError::Sim(e.into()))
    }
}

/// Market problem plus the shared LP table it trains.
#[derive(Debug, Clone)]
pub struct MarketCalibrationEnv {
    pub spec: MarketCalibration,
    pub policy: TabularLp,
    base: EpisodeConfig,
    lt: SupertypeLt,
}

impl MarketCalibrationEnv {
    pub fn new(spec: MarketCalibration) -> Result<Self, CalibrationError> {
        spec.validate()?;
        let policy = spec.initial_policy()?;
        let mut base = EpisodeConfig::new(spec.profile(&spec.default_lambda0())?, EcnModel::synthetic(3));
        base.horizon = spec.horizon;
        base.seed = spec.seed;
        base.validate()?;
        let lt = SupertypeLt(vec![StationaryLt {
            buy: spec.lt_trade_prob,
            sell: spec.lt_trade_prob,
        }]);
        Ok(MarketCalibrationEnv { spec, policy, base, lt })
    }

    /// Runs one episode per profile under the current table.
    pub fn rollouts(&self, profiles: &[Vec<f64>], iteration: usize) -> Result<Vec<Trajectory>, CalibrationError> {
        let first = (iteration * profiles.len()) as u64;
        profiles
            .par_iter()
            .enumerate()
            .map(|(b, lambda)| {
                let mut config = self.base.clone();
                config.profile = self.spec.profile(lambda)?;
                Ok(run_episode_seeded(
                    &config,
                    &self.policy,
                    &self.lt,
                    substream_seed(self.spec.seed, "calibration-episode", first + b as u64),
                )?)
            })
            .collect()
    }
}

impl CalibrationEnv for MarketCalibrationEnv {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn target_names(&self) -> Vec<String> {
        self.spec
            .targets
            .targets
            .iter()
            .map(|t| format!("{:?}", t.metric).to_lowercase().replace([' ', '{', '}', ':'], ""))
            .collect()
    }

    fn step(&mut self, profiles: &[Vec<f64>], alpha_shared: f64, iteration: usize) -> Result<Vec<EpisodeOutcome>, CalibrationError> {
        let trajs = self.rollouts(profiles, iteration)?;
        let n_st = self.spec.lp_counts.len();
        let outcomes = trajs
            .iter()
            .map(|t| {
                let stats = CalStats::from_trajectory(t, n_st);
                Ok(EpisodeOutcome {
                    reward: calib_reward(&stats, &self.spec.targets)?,
                    fitted: fitted_values(&stats, &self.spec.targets)?,
                })
            })
            .collect::<Result<Vec<_>, CalibrationError>>()?;
        if alpha_shared > 0.0 {
            let g = grad_estimate(&lp_episodes(&trajs), &self.policy.table, self.spec.zeta, Baseline::AgentMeanRewardToGo)
                .map_err(|e| CalibrationError::Sim(e.into()))?;
            ascent_step(&mut self.policy.table, &g.shared, alpha_shared).map_err(|e| CalibrationError::Sim(e.into()))?;
        }
        Ok(outcomes)
    }
}

/// Paired CALSHEQ and BO runs on one market problem with equal budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketComparison {
    pub spec: MarketCalibration,
    pub iterations: usize,
    pub batch: usize,
    pub initial_std: f64,
    pub schedule: super::TwoTimescaleSchedule,
    pub bo_period: usize,
    pub bo: super::BoOptions,
}

impl Default for MarketComparison {
    fn default() -> Self {
        MarketComparison {
            spec: MarketCalibration::default(),
            iterations: 300,
            batch: 60,
            initial_std: 0.1,
            schedule: super::TwoTimescaleSchedule {
                shared: 0.02,
                cal: 0.1,
                cal_power: 0.7,
            },
            bo_period: 50,
            bo: super::BoOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonOutcome {
    pub calsheq: Vec<super::TraceRow>,
    pub bo: Vec<super::TraceRow>,
    pub bo_history: Vec<(Vec<f64>, f64)>,
    pub calibrator: super::CalibratorPolicy,
}

impl MarketComparison {
    pub fn run_calsheq(&self, on_iteration: impl FnMut(&super::TraceRow)) -> Result<(Vec<super::TraceRow>, super::CalibratorPolicy), CalibrationError> {
        let mut env = MarketCalibrationEnv::new(self.spec.clone())?;
        let l0 = self.spec.default_lambda0();
        let mut policy = super::CalibratorPolicy::anchored(&l0, self.spec.state_box(), self.spec.action_box(), self.initial_std)?;
        let opts = super::CalsheqOptions {
            iterations: self.iterations,
            batch: self.batch,
            schedule: self.schedule,
            seed: self.spec.seed,
            ..Default::default()
        };
        let trace = super::calsheq(&mut env, &mut policy, &l0, &opts, on_iteration)?;
        Ok((trace, policy))
    }

    pub fn run_bo(&self, on_iteration: impl FnMut(&super::TraceRow)) -> Result<(Vec<super::TraceRow>, Vec<(Vec<f64>, f64)>), CalibrationError> {
        let mut env = MarketCalibrationEnv::new(self.spec.clone())?;
        let opts = super::BoLoopOptions {
            period: self.bo_period,
            budget: self.iterations,
            batch: self.batch,
            shared_step: self.schedule.shared,
            bo: self.bo.clone(),
            seed: self.spec.seed,
        };
        super::bo_calibration_loop(&mut env, &self.spec.state_box(), &self.spec.default_lambda0(), &opts, on_iteration)
    }

    pub fn run(&self) -> Result<ComparisonOutcome, CalibrationError> {
        let (calsheq, calibrator) = self.run_calsheq(|_| {})?;
        let (bo, bo_history) = self.run_bo(|_| {})?;
        Ok(ComparisonOutcome {
            calsheq,
            bo,
            bo_history,
            calibrator,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_follow_parameter_ranges() {
        let m = MarketCalibration::default();
        assert_eq!(m.dim(), 8);
        let s = m.state_box();
        assert_eq!(s.hi, vec![1.0, 1.0, 5.0, 2.0, 1.0, 1.0, 5.0, 2.0]);
        assert_eq!(m.action_box().lo, vec![-1.0, -1.0, -5.0, -2.0, -1.0, -1.0, -5.0, -2.0]);
        assert_eq!(m.coordinate_names()[2], "lp0_gamma_mean");
        let no_gamma = MarketCalibration {
            calibrate_gamma: false,
            ..MarketCalibration::default()
        };
        assert_eq!(no_gamma.state_box().hi, vec![1.0; 4]);
    }

    #[test]
    fn profile_maps_coordinates() {
        let m = MarketCalibration::default();
        let p = m.profile(&[0.1, 0.2, 1.5, 0.3, 0.4, 0.9, 7.0, 0.5]).unwrap();
        assert_eq!(p.lp[0].0.connectivity, vec![0.1, 0.2]);
        assert_eq!(p.lp[1].0.connectivity, vec![0.4, 0.9]);
        assert_eq!(p.lp[1].1, 3);
        // out-of-box coordinates are clamped
        assert_eq!(
            p.lp[1].0.gamma,
            ParamDist::ClippedNormal {
                mean: 5.0,
                std: 0.5,
                lo: 0.0,
                hi: 5.0
            }
        );
        assert_eq!(p.lt[1].0.trade_size, 2);
        assert!(m.profile(&[0.5]).is_err());
    }

    #[test]
    fn zero_connectivity_leaves_flow_to_the_ecn() {
        let m = MarketCalibration {
            calibrate_gamma: false,
            ..MarketCalibration::default()
        };
        let mut env = MarketCalibrationEnv::new(m).unwrap();
        let out = env.step(&[vec![0.0; 4], vec![1.0; 4]], 0.0, 0).unwrap();
        assert_eq!(out[0].fitted, vec![0.0, 0.0]);
        assert!(out[1].fitted[1] > 0.3);
        assert!(out.iter().all(|o| o.reward > 0.0 && o.reward <= 1.0));
    }

    #[test]
    fn short_comparison_is_reproducible() {
        let c = MarketComparison {
            iterations: 4,
            batch: 4,
            bo_period: 2,
            spec: MarketCalibration {
                horizon: 5,
                ..MarketCalibration::default()
            },
            ..MarketComparison::default()
        };
        let a = c.run().unwrap();
        assert_eq!(a.calsheq.len(), 4);
        assert_eq!(a.bo_history.len(), 2);
        assert_eq!(a, c.run().unwrap());
    }
}
