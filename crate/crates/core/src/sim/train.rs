//! Shared-policy training loop over simulated episodes.

use serde::{Deserialize, Serialize};

use super::{run_batch, EpisodeConfig, LtPolicy, SimError, TabularLp, TabularLt, Trajectory};
use crate::policy::{ascent_step, clip_rewards, grad_estimate, AgentEpisode, Baseline, Step};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub iterations: usize,
    pub batch: usize,
    pub lp_step: f64,
    pub lt_step: f64,
    pub zeta: f64,
    pub baseline: Baseline,
    /// Rewards are clipped to `[-r_max, r_max]` when set.
    pub reward_clip: Option<f64>,
    pub train_lp: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iterations: 100,
            batch: 16,
            lp_step: 0.1,
            lt_step: 0.1,
            zeta: 1.0,
            baseline: Baseline::MeanRewardToGo,
            reward_clip: None,
            train_lp: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub lp_return_by_supertype: Vec<f64>,
    pub lt_return_by_supertype: Vec<f64>,
    /// Change of the mean LP return since the previous iteration.
    pub improvement: f64,
    pub lp_grad_norm: f64,
    pub lt_grad_norm: f64,
    pub clipped_rewards: usize,
}

impl TrainLogRow {
    pub fn csv_header(n_lp: usize, n_lt: usize) -> String {
        let mut cols = vec!["iteration".to_string()];
        cols.extend((0..n_lp).map(|i| format!("lp_return_{i}")));
        cols.extend((0..n_lt).map(|i| format!("lt_return_{i}")));
        cols.extend(["improvement", "lp_grad_norm", "lt_grad_norm", "clipped_rewards"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.iteration.to_string()];
        cols.extend(
            self.lp_return_by_supertype
                .iter()
                .chain(&self.lt_return_by_supertype)
                .map(|v| format!("{v:.16e}")),
        );
        cols.extend([
            format!("{:.16e}", self.improvement),
            format!("{:.16e}", self.lp_grad_norm),
            format!("{:.16e}", self.lt_grad_norm),
            self.clipped_rewards.to_string(),
        ]);
        cols.join(",")
    }
}

pub fn lp_episodes(trajs: &[Trajectory]) -> Vec<Vec<AgentEpisode>> {
    trajs
        .iter()
        .map(|t| {
            t.lp.iter()
                .map(|steps| steps.iter().filter_map(|s| s.key.map(|key| Step { key, reward: s.reward })).collect())
                .collect()
        })
        .collect()
}

pub fn lt_episodes(trajs: &[Trajectory]) -> Vec<Vec<AgentEpisode>> {
    trajs
        .iter()
        .map(|t| {
            t.lt.iter()
                .map(|steps| steps.iter().filter_map(|s| s.key.map(|key| Step { key, reward: s.reward })).collect())
                .collect()
        })
        .collect()
}

fn mean_by_supertype(trajs: &[Trajectory], lp: bool, n_supertypes: usize) -> Vec<f64> {
    let mut sum = vec![0.0; n_supertypes];
    let mut cnt = vec![0usize; n_supertypes];
    for t in trajs {
        if lp {
            for (i, ty) in t.population.lp.iter().enumerate() {
                sum[ty.supertype] += t.lp_return(i);
                cnt[ty.supertype] += 1;
            }
        } else {
            for (k, ty) in t.population.lt.iter().enumerate() {
                sum[ty.supertype] += t.lt_return(k);
                cnt[ty.supertype] += 1;
            }
        }
    }
    sum.iter().zip(&cnt).map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 }).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// LT side of a training run: a frozen policy or a shared table to learn.
pub enum LtSide<'a> {
    Frozen(&'a dyn LtPolicy),
    Learn(&'a mut TabularLt),
}

/// Alternates batch rollouts under the current shared tables with one
/// gradient step per trained class.
pub fn train(
    config: &EpisodeConfig,
    lp: &mut TabularLp,
    mut lt: LtSide<'_>,
    opts: &TrainOptions,
    mut on_iteration: impl FnMut(&TrainLogRow),
) -> Result<Vec<TrainLogRow>, SimError> {
    let mut log = Vec::with_capacity(opts.iterations);
    let mut prev_mean: Option<f64> = None;
    for it in 0..opts.iterations {
        let first = (it * opts.batch) as u64;
        let trajs = match &lt {
            LtSide::Frozen(p) => run_batch(config, &*lp, *p, first, opts.batch)?,
            LtSide::Learn(t) => run_batch(config, &*lp, &**t, first, opts.batch)?,
        };
        let mut clipped = 0;
        let mut lp_norm = 0.0;
        let mut lt_norm = 0.0;
        if opts.train_lp {
            let mut eps = lp_episodes(&trajs);
            if let Some(r) = opts.reward_clip {
                clipped += clip_rewards(&mut eps, r);
            }
            let g = grad_estimate(&eps, &lp.table, opts.zeta, opts.baseline)?;
            lp_norm = norm(&g.shared);
            ascent_step(&mut lp.table, &g.shared, opts.lp_step)?;
        }
        if let (LtSide::Learn(table), false) = (&mut lt, trajs[0].lt.is_empty()) {
            let mut eps = lt_episodes(&trajs);
            if let Some(r) = opts.reward_clip {
                clipped += clip_rewards(&mut eps, r);
            }
            let g = grad_estimate(&eps, &table.table, opts.zeta, opts.baseline)?;
            lt_norm = norm(&g.shared);
            ascent_step(&mut table.table, &g.shared, opts.lt_step)?;
        }
        let lp_ret = mean_by_supertype(&trajs, true, config.profile.lp.len());
        let mean = trajs
            .iter()
            .map(|t| (0..t.lp.len()).map(|i| t.lp_return(i)).sum::<f64>() / t.lp.len() as f64)
            .sum::<f64>()
            / trajs.len() as f64;
        let row = TrainLogRow {
            iteration: it,
            lp_return_by_supertype: lp_ret,
            lt_return_by_supertype: mean_by_supertype(&trajs, false, config.profile.lt.len()),
            improvement: prev_mean.map_or(0.0, |p| mean - p),
            lp_grad_norm: lp_norm,
            lt_grad_norm: lt_norm,
            clipped_rewards: clipped,
        };
        prev_mean = Some(mean);
        on_iteration(&row);
        log.push(row);
    }
    Ok(log)
}
