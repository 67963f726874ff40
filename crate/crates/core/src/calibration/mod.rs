//! Equilibrium calibration: a two-timescale RL calibrator over supertype
//! profiles trained jointly with the shared policy, and a Bayesian
//! optimization baseline.

pub mod calibrator;
pub mod gp;
pub mod market;
pub mod objective;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibrator::{
    reinforce_calibrator_grad, CalibratorGrad, CalibratorMode, CalibratorPolicy, CalibratorStep, ParamBox, TwoTimescaleSchedule, LOG_STD_FLOOR,
};
pub use gp::{bo_suggest, matern52, ucb_argmax, BoOptions, Gp, GpOptions};
pub use market::{MarketCalibration, MarketCalibrationEnv};
pub use objective::{
    calib_reward, deciles, fitted_values, percentile_nearest_rank, target_loss, CalStats, CalibrationTargets, Comparator, Loss, Metric, Target,
};

use crate::rng::substream;
use crate::sim::SimError;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid calibration config: {0}")]
    Config(String),
    #[error("trajectories lack the statistic for {0:?}")]
    MissingStatistic(Metric),
    #[error("calibrator standard deviation collapsed")]
    DegenerateStd,
    #[error("kernel matrix ill-conditioned even with maximal jitter")]
    IllConditioned,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Reward and fitted target values of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub reward: f64,
    pub fitted: Vec<f64>,
}

/// A problem the calibrator acts on: one episode per supplied profile, then
/// one shared-policy update at rate `alpha_shared`.
pub trait CalibrationEnv {
    fn dim(&self) -> usize;
    fn target_names(&self) -> Vec<String>;
    fn step(&mut self, profiles: &[Vec<f64>], alpha_shared: f64, iteration: usize) -> Result<Vec<EpisodeOutcome>, CalibrationError>;
}

/// One row of a calibration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub lambda_mean: Vec<f64>,
    pub fitted_mean: Vec<f64>,
}

impl TraceRow {
    fn from_batch(iteration: usize, profiles: &[Vec<f64>], outcomes: &[EpisodeOutcome]) -> Self {
        let n = outcomes.len().max(1) as f64;
        let reward_mean = outcomes.iter().map(|o| o.reward).sum::<f64>() / n;
        let reward_std = (outcomes.iter().map(|o| (o.reward - reward_mean).powi(2)).sum::<f64>() / n).sqrt();
        TraceRow {
            iteration,
            reward_mean,
            reward_std,
            lambda_mean: column_means(profiles),
            fitted_mean: column_means(&outcomes.iter().map(|o| o.fitted.clone()).collect::<Vec<_>>()),
        }
    }

    pub fn csv_header(dim: usize, targets: &[String]) -> String {
        let mut cols = vec!["iteration".to_string(), "reward_mean".into(), "reward_std".into()];
        cols.extend((0..dim).map(|j| format!("lambda_{j}")));
        cols.extend(targets.iter().map(|t| format!("fitted_{t}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.iteration.to_string(),
            format!("{:.16e}", self.reward_mean),
            format!("{:.16e}", self.reward_std),
        ];
        cols.extend(self.lambda_mean.iter().chain(&self.fitted_mean).map(|v| format!("{v:.16e}")));
        cols.join(",")
    }
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else { return Vec::new() };
    let n = rows.len() as f64;
    (0..first.len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Writes a trace as CSV.
pub fn write_trace<W: std::io::Write>(mut w: W, dim: usize, targets: &[String], trace: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "{}", TraceRow::csv_header(dim, targets))?;
    for r in trace {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Mean over iterations of the average absolute change of the batch-mean
/// profile, each coordinate measured in units of its box width.
pub fn mean_abs_increment(trace: &[TraceRow], bounds: &ParamBox) -> f64 {
    if trace.len() < 2 {
        return 0.0;
    }
    let w = bounds.width();
    let total: f64 = trace
        .windows(2)
        .map(|p| {
            let d = p[0].lambda_mean.len().max(1) as f64;
            p[1].lambda_mean
                .iter()
                .zip(&p[0].lambda_mean)
                .zip(&w)
                .map(|((a, b), w)| if *w > 0.0 { (a - b).abs() / w } else { 0.0 })
                .sum::<f64>()
                / d
        })
        .sum();
    total / (trace.len() - 1) as f64
}

/// Mean reward over the last `k` rows.
pub fn tail_reward(trace: &[TraceRow], k: usize) -> f64 {
    let tail = &trace[trace.len().saturating_sub(k.max(1))..];
    tail.iter().map(|r| r.reward_mean).sum::<f64>() / tail.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalsheqOptions {
    pub iterations: usize,
    /// Parallel episodes per iteration.
    pub batch: usize,
    pub schedule: TwoTimescaleSchedule,
    pub mean_baseline: bool,
    /// Pair episode slots with opposite Gaussian draws.
    pub mirrored: bool,
    pub seed: u64,
}

impl Default for CalsheqOptions {
    fn default() -> Self {
        CalsheqOptions {
            iterations: 500,
            batch: 60,
            schedule: TwoTimescaleSchedule::default(),
            mean_baseline: true,
            mirrored: true,
            seed: 0,
        }
    }
}

/// Joint calibrator and shared-policy training. Every episode slot keeps its
/// own profile, moved each iteration by a calibrator increment; the
/// calibrator then takes a REINFORCE step on the episode rewards.
pub fn calsheq<E: CalibrationEnv + ?Sized>(
    env: &mut E,
    policy: &mut CalibratorPolicy,
    lambda0: &[f64],
    opts: &CalsheqOptions,
    mut on_iteration: impl FnMut(&TraceRow),
) -> Result<Vec<TraceRow>, CalibrationError> {
    if opts.batch == 0 || lambda0.len() != policy.dim() || env.dim() != policy.dim() {
        return Err(CalibrationError::Config("batch must be positive and dimensions must agree".into()));
    }
    opts.schedule.validate(None)?;
    let mut rng = substream(opts.seed, "calibrator", 0);
    let mut state = vec![policy.state_box.clamp(lambda0); opts.batch];
    let mut trace = Vec::with_capacity(opts.iterations);
    for n in 0..opts.iterations {
        let mut noise: Vec<Vec<f64>> = Vec::with_capacity(opts.batch);
        while noise.len() < opts.batch {
            let z = policy.draw_noise(&mut rng);
            if opts.mirrored && noise.len() + 1 < opts.batch {
                noise.push(z.iter().map(|v| -v).collect());
            }
            noise.push(z);
        }
        let steps: Vec<CalibratorStep> = state.iter().zip(&noise).map(|(s, z)| policy.step_with_noise(s, z)).collect();
        let profiles: Vec<Vec<f64>> = steps.iter().map(|s| s.next.clone()).collect();
        let outcomes = env.step(&profiles, opts.schedule.alpha_shared(n), n)?;
        if outcomes.len() != profiles.len() {
            return Err(CalibrationError::Config("environment returned the wrong number of outcomes".into()));
        }
        let batch: Vec<(CalibratorStep, f64)> = steps.into_iter().zip(outcomes.iter().map(|o| o.reward)).collect();
        let g = reinforce_calibrator_grad(policy, &batch, opts.mean_baseline)?;
        policy.apply(&g, opts.schedule.alpha_cal(n));
        let row = TraceRow::from_batch(n, &profiles, &outcomes);
        on_iteration(&row);
        trace.push(row);
        state = profiles;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoLoopOptions {
    /// Shared-policy iterations per profile.
    pub period: usize,
    /// Total shared-policy iterations.
    pub budget: usize,
    pub batch: usize,
    pub shared_step: f64,
    pub bo: BoOptions,
    pub seed: u64,
}

impl Default for BoLoopOptions {
    fn default() -> Self {
        BoLoopOptions {
            period: 100,
            budget: 500,
            batch: 60,
            shared_step: 0.02,
            bo: BoOptions::default(),
            seed: 0,
        }
    }
}

/// Holds each profile for `period` shared-policy iterations, records the
/// last iteration's mean reward, and asks the GP for the next profile. The
/// second profile is uniform in the box because a suggestion needs two
/// evaluations.
pub fn bo_calibration_loop<E: CalibrationEnv + ?Sized>(
    env: &mut E,
    bounds: &ParamBox,
    lambda0: &[f64],
    opts: &BoLoopOptions,
    mut on_iteration: impl FnMut(&TraceRow),
) -> Result<(Vec<TraceRow>, Vec<(Vec<f64>, f64)>), CalibrationError> {
    if opts.period == 0 || opts.batch == 0 || lambda0.len() != bounds.dim() || env.dim() != bounds.dim() {
        return Err(CalibrationError::Config("period and batch must be positive and dimensions must agree".into()));
    }
    let mut rng = substream(opts.seed, "bayes-opt", 0);
    let mut history: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut trace = Vec::with_capacity(opts.budget);
    let mut current = bounds.clamp(lambda0);
    let mut last_reward = 0.0;
    for n in 0..opts.budget {
        if n > 0 && n % opts.period == 0 {
            history.push((current.clone(), last_reward));
            current = if history.len() < 2 {
                bounds.sample_uniform(&mut rng)
            } else {
                bo_suggest(&history, bounds, &opts.bo, &mut rng)?
            };
        }
        let profiles = vec![current.clone(); opts.batch];
        let outcomes = env.step(&profiles, opts.shared_step, n)?;
        let row = TraceRow::from_batch(n, &profiles, &outcomes);
        last_reward = row.reward_mean;
        on_iteration(&row);
        trace.push(row);
    }
    if opts.budget > 0 {
        history.push((current, last_reward));
    }
    Ok((trace, history))
}

/// Highest-reward evaluation in a BO history.
pub fn best_evaluation(history: &[(Vec<f64>, f64)]) -> Option<&(Vec<f64>, f64)> {
    history.iter().max_by(|a, b| a.1.total_cmp(&b.1))
}

/// Closed-form single-parameter problem with `r = 1 / (1 + |Lambda - peak|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBandit {
    pub peak: f64,
    /// Standard deviation of additive reward noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyBandit {
    fn default() -> Self {
        ToyBandit {
            peak: 0.6,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl ToyBandit {
    pub fn bounds() -> ParamBox {
        ParamBox { lo: vec![0.0], hi: vec![1.0] }
    }

    pub fn reward(&self, lambda: f64) -> f64 {
        1.0 / (1.0 + (lambda - self.peak).abs())
    }
}

impl CalibrationEnv for ToyBandit {
    fn dim(&self) -> usize {
        1
    }

    fn target_names(&self) -> Vec<String> {
        vec!["lambda".into()]
    }

    fn step(&mut self, profiles: &[Vec<f64>], _: f64, iteration: usize) -> Result<Vec<EpisodeOutcome>, CalibrationError> {
        let mut rng = substream(self.seed, "toy-bandit", iteration as u64);
        Ok(profiles
            .iter()
            .map(|p| {
                let eps: f64 = if self.noise > 0.0 {
                    self.noise * (rng.random::<f64>() - 0.5) * 12f64.sqrt()
                } else {
                    0.0
                };
                EpisodeOutcome {
                    reward: self.reward(p[0]) + eps,
                    fitted: vec![p[0]],
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;
