use serde::{Deserialize, Serialize};

use super::CalibrationError;
use crate::sim::{Trajectory, Venue};

/// Nearest-rank percentile: the smallest sample with at least `p` percent of
/// the samples at or below it.
pub fn percentile_nearest_rank(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() || !(p > 0.0 && p <= 100.0) {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * s.len() as f64).ceil() as usize;
    Some(s[rank.clamp(1, s.len()) - 1])
}

/// Deciles 10%..90%.
pub fn deciles(samples: &[f64]) -> Option<Vec<f64>> {
    (1..=9).map(|p| percentile_nearest_rank(samples, 10.0 * p as f64)).collect()
}

/// Episode statistics that calibration targets refer to.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalStats {
    /// Summed episode-average market share of each LP supertype's agents.
    pub share_by_supertype: Vec<f64>,
    pub total_share: f64,
    /// Sizes of individual LT fills received by each LP supertype.
    pub trade_sizes: Vec<Vec<f64>>,
}

impl CalStats {
    pub fn from_trajectory(t: &Trajectory, n_supertypes: usize) -> Self {
        let mut share = vec![0.0; n_supertypes];
        for (i, ty) in t.population.lp.iter().enumerate() {
            if ty.supertype < n_supertypes {
                share[ty.supertype] += t.lp[i].last().map_or(0.0, |s| s.avg_share);
            }
        }
        let mut sizes = vec![Vec::new(); n_supertypes];
        for steps in &t.lt {
            for s in steps {
                if let (Some(Venue::Lp(i)), true) = (s.venue, s.filled > 0) {
                    let st = t.population.lp[i].supertype;
                    if st < n_supertypes {
                        sizes[st].push(s.filled as f64);
                    }
                }
            }
        }
        CalStats {
            total_share: share.iter().sum(),
            share_by_supertype: share,
            trade_sizes: sizes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Metric {
    MarketShare {
        supertype: usize,
    },
    TotalMarketShare,
    /// The nine deciles of a supertype's fill sizes.
    TradeSizeDeciles {
        supertype: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Eq,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `|target - value|`.
    Abs,
    /// `max(target - value, 0)`.
    HingeBelow,
    /// Mean absolute difference over a vector of percentiles.
    PercentileL1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub metric: Metric,
    pub comparator: Comparator,
    pub value: Vec<f64>,
    pub weight: f64,
    pub loss: Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTargets {
    pub targets: Vec<Target>,
}

impl CalibrationTargets {
    /// Supertype-1 share at least 15%, total at least 80%, and supertype-1
    /// fill-size deciles `[8,8,8,9,9,9,10,10,10]`.
    pub fn experiment1() -> Self {
        CalibrationTargets {
            targets: vec![
                Target {
                    metric: Metric::MarketShare { supertype: 0 },
                    comparator: Comparator::Ge,
                    value: vec![0.15],
                    weight: 0.5,
                    loss: Loss::HingeBelow,
                },
                Target {
                    metric: Metric::TotalMarketShare,
                    comparator: Comparator::Ge,
                    value: vec![0.8],
                    weight: 0.5,
                    loss: Loss::HingeBelow,
                },
                Target {
                    metric: Metric::TradeSizeDeciles { supertype: 0 },
                    comparator: Comparator::Eq,
                    value: vec![8.0, 8.0, 8.0, 9.0, 9.0, 9.0, 10.0, 10.0, 10.0],
                    weight: 0.2,
                    loss: Loss::PercentileL1,
                },
            ],
        }
    }

    /// Supertype-1 share equal to 25% and total at least 80%.
    pub fn experiment4() -> Self {
        CalibrationTargets {
            targets: vec![
                Target {
                    metric: Metric::MarketShare { supertype: 0 },
                    comparator: Comparator::Eq,
                    value: vec![0.25],
                    weight: 1.0,
                    loss: Loss::Abs,
                },
                Target {
                    metric: Metric::TotalMarketShare,
                    comparator: Comparator::Ge,
                    value: vec![0.8],
                    weight: 1.0,
                    loss: Loss::HingeBelow,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        for t in &self.targets {
            if !(t.weight > 0.0 && t.weight.is_finite()) {
                return Err(CalibrationError::Config(format!("target weight {} must be positive", t.weight)));
            }
            let want = if t.loss == Loss::PercentileL1 { 9 } else { 1 };
            if t.value.len() != want || t.value.iter().any(|v| !v.is_finite()) {
                return Err(CalibrationError::Config(format!("target {:?} needs {want} finite values", t.metric)));
            }
        }
        Ok(())
    }
}

fn scalar(stats: &CalStats, metric: Metric) -> Result<f64, CalibrationError> {
    match metric {
        Metric::MarketShare { supertype } => stats
            .share_by_supertype
            .get(supertype)
            .copied()
            .ok_or(CalibrationError::MissingStatistic(metric)),
        Metric::TotalMarketShare => Ok(stats.total_share),
        Metric::TradeSizeDeciles { .. } => Err(CalibrationError::MissingStatistic(metric)),
    }
}

/// Observed value of each target, one scalar per target (the mean decile
/// for percentile targets).
pub fn fitted_values(stats: &CalStats, targets: &CalibrationTargets) -> Result<Vec<f64>, CalibrationError> {
    targets
        .targets
        .iter()
        .map(|t| match t.metric {
            Metric::TradeSizeDeciles { supertype } => {
                let d = stats
                    .trade_sizes
                    .get(supertype)
                    .and_then(|s| deciles(s))
                    .ok_or(CalibrationError::MissingStatistic(t.metric))?;
                Ok(d.iter().sum::<f64>() / 9.0)
            }
            m => scalar(stats, m),
        })
        .collect()
}

/// Loss of one target.
pub fn target_loss(stats: &CalStats, t: &Target) -> Result<f64, CalibrationError> {
    Ok(match t.loss {
        Loss::Abs => (t.value[0] - scalar(stats, t.metric)?).abs(),
        Loss::HingeBelow => (t.value[0] - scalar(stats, t.metric)?).max(0.0),
        Loss::PercentileL1 => {
            let Metric::TradeSizeDeciles { supertype } = t.metric else {
                return Err(CalibrationError::Config("percentile loss needs a decile metric".into()));
            };
            // a supertype that received no fills is maximally off target
            let d = match stats.trade_sizes.get(supertype) {
                Some(s) if !s.is_empty() => deciles(s).ok_or(CalibrationError::MissingStatistic(t.metric))?,
                Some(_) => vec![0.0; 9],
                None => return Err(CalibrationError::MissingStatistic(t.metric)),
            };
            d.iter().zip(&t.value).map(|(a, b)| (a - b).abs()).sum::<f64>() / 9.0
        }
    })
}

/// `r = 1 / (1 + sum_k w_k loss_k)`, in `(0, 1]`.
pub fn calib_reward(stats: &CalStats, targets: &CalibrationTargets) -> Result<f64, CalibrationError> {
    let mut total = 0.0;
    for t in &targets.targets {
        total += t.weight * target_loss(stats, t)?;
    }
    Ok(1.0 / (1.0 + total))
}
