use serde::{Deserialize, Serialize};

use super::Trajectory;

/// OLS slope of `y` on `x`; `None` when `x` is constant or empty.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let sxx: f64 = x[..n].iter().map(|v| (v - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = x[..n].iter().zip(&y[..n]).map(|(a, b)| (a - mx) * (b - my)).sum();
    Some(sxy / sxx)
}

/// Slope of the skew on the inventory held when quoting, pooled over
/// trajectories.
pub fn skew_intensity(trajs: &[Trajectory], lp: usize) -> Option<f64> {
    let (q, k): (Vec<f64>, Vec<f64>) = trajs
        .iter()
        .flat_map(|t| t.lp[lp].iter().map(|s| (s.obs.inventory as f64, s.action.skew)))
        .unzip();
    ols_slope(&q, &k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldingTime {
    pub t: usize,
    pub inventory: i64,
    pub tau: usize,
    pub censored: bool,
}

/// For each non-zero inventory, the first lag at which the sign changes,
/// censored at the end of the path.
pub fn holding_times(inventory: &[i64]) -> Vec<HoldingTime> {
    let n = inventory.len();
    (0..n)
        .filter(|t| inventory[*t] != 0)
        .map(|t| {
            let s = inventory[t].signum();
            match (t + 1..n).find(|u| inventory[*u].signum() != s) {
                Some(u) => HoldingTime {
                    t,
                    inventory: inventory[t],
                    tau: u - t,
                    censored: false,
                },
                None => HoldingTime {
                    t,
                    inventory: inventory[t],
                    tau: n - t,
                    censored: true,
                },
            }
        })
        .collect()
}

/// Mean flow per price level from `(level, flow)` observations, with levels
/// rounded to multiples of `bucket`.
pub fn flow_response(points: impl IntoIterator<Item = (f64, u64)>, bucket: f64) -> Vec<(f64, f64)> {
    let mut acc: std::collections::BTreeMap<i64, (f64, usize)> = std::collections::BTreeMap::new();
    for (e, flow) in points {
        let entry = acc.entry((e / bucket).round() as i64).or_insert((0.0, 0));
        entry.0 += flow as f64;
        entry.1 += 1;
    }
    acc.into_iter().map(|(k, (f, c))| (k as f64 * bucket, f / c as f64)).collect()
}

/// Flow response of one LP, each side quoted at level `spread / 2 +- skew`.
pub fn flow_response_curve(trajs: &[Trajectory], lp: usize, bucket: f64) -> Vec<(f64, f64)> {
    let points = trajs.iter().flat_map(|tr| {
        tr.lp[lp].iter().flat_map(|s| {
            let (ea, eb) = s.action.side_tweaks();
            [(ea, s.flow_ask), (eb, s.flow_bid)]
        })
    });
    flow_response(points, bucket)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMetrics {
    pub skew_intensity: Option<f64>,
    pub mean_hedge_fraction: f64,
    pub mean_price_level: f64,
    pub mean_holding_time: Option<f64>,
    pub censored_fraction: f64,
    pub holding_by_inventory: Vec<(i64, f64)>,
    pub market_share: f64,
    pub pnl: f64,
    pub abs_inventory: f64,
}

/// Behavior of one LP pooled over trajectories; market share, PnL and
/// absolute inventory are per-episode means.
pub fn behavior_metrics(trajs: &[Trajectory], lp: usize) -> BehaviorMetrics {
    let steps: Vec<_> = trajs.iter().flat_map(|t| t.lp[lp].iter()).collect();
    let n = steps.len().max(1) as f64;
    let episodes = trajs.len().max(1) as f64;
    let mut holds = Vec::new();
    for t in trajs {
        let inv: Vec<i64> = t.lp[lp].iter().map(|s| s.obs.inventory).collect();
        holds.extend(holding_times(&inv));
    }
    let uncensored: Vec<f64> = holds.iter().filter(|h| !h.censored).map(|h| h.tau as f64).collect();
    let mut by_inv: std::collections::BTreeMap<i64, (f64, usize)> = std::collections::BTreeMap::new();
    for h in holds.iter().filter(|h| !h.censored) {
        let e = by_inv.entry(h.inventory).or_insert((0.0, 0));
        e.0 += h.tau as f64;
        e.1 += 1;
    }
    BehaviorMetrics {
        skew_intensity: skew_intensity(trajs, lp),
        mean_hedge_fraction: steps.iter().map(|s| s.action.hedge).sum::<f64>() / n,
        mean_price_level: steps.iter().map(|s| 0.5 * s.action.spread).sum::<f64>() / n,
        mean_holding_time: (!uncensored.is_empty()).then(|| uncensored.iter().sum::<f64>() / uncensored.len() as f64),
        censored_fraction: if holds.is_empty() {
            0.0
        } else {
            holds.iter().filter(|h| h.censored).count() as f64 / holds.len() as f64
        },
        holding_by_inventory: by_inv.into_iter().map(|(q, (s, c))| (q, s / c as f64)).collect(),
        market_share: trajs.iter().map(|t| t.lp[lp].last().map_or(0.0, |s| s.avg_share)).sum::<f64>() / episodes,
        pnl: trajs.iter().map(|t| t.lp_ledgers[lp].total()).sum::<f64>() / episodes,
        abs_inventory: steps.iter().map(|s| s.obs.inventory.abs() as f64).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_line() {
        let q = [-2.0, -1.0, 0.0, 1.0, 3.0];
        let k: Vec<f64> = q.iter().map(|v| -0.1 * v).collect();
        assert!((ols_slope(&q, &k).unwrap() + 0.1).abs() < 1e-15);
        assert_eq!(ols_slope(&q, &[0.0; 5]), Some(0.0));
        assert_eq!(ols_slope(&[1.0, 1.0], &[0.0, 2.0]), None);
    }

    #[test]
    fn flow_response_examples() {
        assert_eq!(flow_response([(0.1, 2), (0.1, 4)], 0.05), vec![(0.1, 3.0)]);
        let f = flow_response([(0.2, 0), (0.2, 0), (0.1, 5)], 0.05);
        assert_eq!(f, vec![(0.1, 5.0), (0.2, 0.0)]);
    }

    #[test]
    fn holding_time_first_sign_flip() {
        let h = holding_times(&[2, 1, -1]);
        assert_eq!(
            h[0],
            HoldingTime {
                t: 0,
                inventory: 2,
                tau: 2,
                censored: false
            }
        );
        assert_eq!(h[1].tau, 1);
        assert_eq!(
            h[2],
            HoldingTime {
                t: 2,
                inventory: -1,
                tau: 1,
                censored: true
            }
        );
        assert_eq!(holding_times(&[3, 0])[0].tau, 1);
        assert!(holding_times(&[0, 0]).is_empty());
    }
}
