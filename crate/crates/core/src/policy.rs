//! Tabular policies shared across agents and their gradient updates.
//!
//! A policy is a table `theta[s][lambda][a]` over discretized states `s`,
//! agent types `lambda` and actions `a`. Every agent of a population samples
//! from the same table, conditioned on its own state and type.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("step size {alpha} is not below 2 / beta = {limit}")]
    StepTooLarge { alpha: f64, limit: f64 },
    #[error("non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameterization {
    /// Table entries are probabilities; each slice lies on the simplex.
    Direct,
    /// Table entries are logits.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TableKey {
    pub state: usize,
    pub ty: usize,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub param: Parameterization,
    pub n_states: usize,
    pub n_types: usize,
    pub n_actions: usize,
    pub theta: Vec<f64>,
}

impl TabularPolicy {
    /// Uniform action probabilities in every slice.
    pub fn uniform(param: Parameterization, n_states: usize, n_types: usize, n_actions: usize) -> Result<Self, PolicyError> {
        if n_states == 0 || n_types == 0 || n_actions == 0 {
            return Err(PolicyError::Invalid("table dimensions must be positive".into()));
        }
        let init = match param {
            Parameterization::Direct => 1.0 / n_actions as f64,
            Parameterization::Softmax => 0.0,
        };
        Ok(TabularPolicy {
            param,
            n_states,
            n_types,
            n_actions,
            theta: vec![init; n_states * n_types * n_actions],
        })
    }

    pub fn n_slices(&self) -> usize {
        self.n_states * self.n_types
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn slice_offset(&self, state: usize, ty: usize) -> usize {
        (state * self.n_types + ty) * self.n_actions
    }

    pub fn index(&self, key: TableKey) -> usize {
        self.slice_offset(key.state, key.ty) + key.action
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.theta.len() != self.n_states * self.n_types * self.n_actions {
            return Err(PolicyError::Invalid("table length mismatch".into()));
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite);
        }
        if self.param == Parameterization::Direct {
            for chunk in self.theta.chunks(self.n_actions) {
                let s: f64 = chunk.iter().sum();
                if chunk.iter().any(|p| *p < -1e-12) || (s - 1.0).abs() > 1e-9 {
                    return Err(PolicyError::Invalid("direct slice is not on the simplex".into()));
                }
            }
        }
        Ok(())
    }

    pub fn probs(&self, state: usize, ty: usize) -> Vec<f64> {
        let off = self.slice_offset(state, ty);
        let slice = &self.theta[off..off + self.n_actions];
        match self.param {
            Parameterization::Direct => slice.iter().map(|p| p.max(0.0)).collect(),
            Parameterization::Softmax => softmax(slice),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: usize, ty: usize, rng: &mut R) -> TableKey {
        let p = self.probs(state, ty);
        let total: f64 = p.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut action = p.len() - 1;
        for (a, pa) in p.iter().enumerate() {
            if u < *pa {
                action = a;
                break;
            }
            u -= pa;
        }
        TableKey { state, ty, action }
    }

    /// Non-zero entries of the gradient of `ln pi(a | s, lambda)`.
    pub fn log_prob_grad(&self, key: TableKey) -> Vec<(usize, f64)> {
        let off = self.slice_offset(key.state, key.ty);
        match self.param {
            Parameterization::Direct => {
                let p = self.theta[off + key.action];
                vec![(off + key.action, if p > 0.0 { 1.0 / p } else { 0.0 })]
            }
            Parameterization::Softmax => {
                let p = self.probs(key.state, key.ty);
                (0..self.n_actions).map(|b| (off + b, f64::from(u8::from(b == key.action)) - p[b])).collect()
            }
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One decision and the reward that followed it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub key: TableKey,
    pub reward: f64,
}

/// Sequence of decisions of one agent over one episode.
pub type AgentEpisode = Vec<Step>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    None,
    /// Subtracts, at each time step, the batch mean of the discounted
    /// reward-to-go over all agents and episodes.
    MeanRewardToGo,
    /// Same mean taken separately for each agent slot across episodes.
    AgentMeanRewardToGo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    /// Average of the per-agent estimates.
    pub shared: Vec<f64>,
    pub per_agent: Vec<Vec<f64>>,
    pub batch: usize,
}

/// REINFORCE estimate of each agent's gradient with the return weighted by
/// `zeta^t` from the episode start, averaged over the batch, and their mean.
/// `batch[b][i]` is agent `i`'s trajectory in episode `b`.
pub fn grad_estimate(batch: &[Vec<AgentEpisode>], policy: &TabularPolicy, zeta: f64, baseline: Baseline) -> Result<GradientEstimate, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&zeta) {
        return Err(PolicyError::Invalid(format!("discount {zeta} outside [0, 1]")));
    }
    let n_agents = batch[0].len();
    if n_agents == 0 || batch.iter().any(|e| e.len() != n_agents) {
        return Err(PolicyError::Invalid("every episode must carry the same non-zero number of agents".into()));
    }
    let to_go: Vec<Vec<Vec<f64>>> = batch
        .iter()
        .map(|ep| {
            ep.iter()
                .map(|traj| {
                    let mut g = vec![0.0; traj.len()];
                    let mut acc = 0.0;
                    for t in (0..traj.len()).rev() {
                        acc += zeta.powi(t as i32) * traj[t].reward;
                        g[t] = acc;
                    }
                    g
                })
                .collect()
        })
        .collect();
    let base: Vec<Vec<f64>> = match baseline {
        Baseline::None => vec![Vec::new(); n_agents],
        Baseline::MeanRewardToGo => {
            let horizon = to_go.iter().flatten().map(|g| g.len()).max().unwrap_or(0);
            let mut sum = vec![0.0; horizon];
            let mut cnt = vec![0usize; horizon];
            for g in to_go.iter().flatten() {
                for (t, v) in g.iter().enumerate() {
                    sum[t] += v;
                    cnt[t] += 1;
                }
            }
            vec![sum.iter().zip(&cnt).map(|(s, c)| s / (*c).max(1) as f64).collect(); n_agents]
        }
        Baseline::AgentMeanRewardToGo => (0..n_agents)
            .map(|i| {
                let horizon = to_go.iter().map(|ep| ep[i].len()).max().unwrap_or(0);
                let mut sum = vec![0.0; horizon];
                let mut cnt = vec![0usize; horizon];
                for ep in &to_go {
                    for (t, v) in ep[i].iter().enumerate() {
                        sum[t] += v;
                        cnt[t] += 1;
                    }
                }
                sum.iter().zip(&cnt).map(|(s, c)| s / (*c).max(1) as f64).collect()
            })
            .collect(),
    };
    let mut per_agent = vec![vec![0.0; policy.len()]; n_agents];
    let bf = batch.len() as f64;
    for (b, ep) in batch.iter().enumerate() {
        for (i, traj) in ep.iter().enumerate() {
            for (t, step) in traj.iter().enumerate() {
                let ret = to_go[b][i][t] - base[i].get(t).copied().unwrap_or(0.0);
                if ret == 0.0 {
                    continue;
                }
                for (idx, g) in policy.log_prob_grad(step.key) {
                    per_agent[i][idx] += g * ret / bf;
                }
            }
        }
    }
    let mut shared = vec![0.0; policy.len()];
    for g in &per_agent {
        for (s, v) in shared.iter_mut().zip(g) {
            *s += v;
        }
    }
    for s in shared.iter_mut() {
        *s /= n_agents as f64;
    }
    if shared.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::NonFinite);
    }
    Ok(GradientEstimate {
        shared,
        per_agent,
        batch: batch.len(),
    })
}

/// Clips every reward to `[-r_max, r_max]` and returns how many were clipped.
pub fn clip_rewards(batch: &mut [Vec<AgentEpisode>], r_max: f64) -> usize {
    let mut n = 0;
    for step in batch.iter_mut().flatten().flatten() {
        let c = step.reward.clamp(-r_max, r_max);
        if c != step.reward {
            n += 1;
            step.reward = c;
        }
    }
    n
}

/// Plain gradient ascent on logits or projected ascent on a direct table.
pub fn ascent_step(policy: &mut TabularPolicy, grad: &[f64], alpha: f64) -> Result<(), PolicyError> {
    if grad.len() != policy.len() {
        return Err(PolicyError::Invalid("gradient length mismatch".into()));
    }
    policy.theta = match policy.param {
        Parameterization::Softmax => policy.theta.iter().zip(grad).map(|(t, g)| t + alpha * g).collect(),
        Parameterization::Direct => pga_update(&policy.theta, grad, alpha, policy.n_actions)?,
    };
    policy.validate()
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    // points already on the simplex up to rounding are fixed
    let sum: f64 = v.iter().sum();
    if v.iter().all(|x| *x >= 0.0) && (sum - 1.0).abs() <= 4.0 * v.len() as f64 * f64::EPSILON {
        return v.to_vec();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// Smoothness constant `2 zeta R_max |A| / (1 - zeta)^3` of the value in a
/// direct parameterization.
pub fn pga_smoothness(zeta: f64, r_max: f64, n_actions: usize) -> Result<f64, PolicyError> {
    if !(0.0..1.0).contains(&zeta) {
        return Err(PolicyError::Invalid("discount must lie in [0, 1)".into()));
    }
    Ok(2.0 * zeta * r_max * n_actions as f64 / (1.0 - zeta).powi(3))
}

/// Finite-horizon counterpart `2 R_max |A| T^3`.
pub fn pga_smoothness_finite(horizon: usize, r_max: f64, n_actions: usize) -> f64 {
    2.0 * r_max * n_actions as f64 * (horizon as f64).powi(3)
}

pub fn check_step_size(alpha: f64, beta: f64) -> Result<(), PolicyError> {
    let limit = 2.0 / beta;
    if alpha >= limit {
        Err(PolicyError::StepTooLarge { alpha, limit })
    } else {
        Ok(())
    }
}

/// Projected gradient ascent step applied slice by slice.
pub fn pga_update(theta: &[f64], grad: &[f64], alpha: f64, n_actions: usize) -> Result<Vec<f64>, PolicyError> {
    if theta.len() != grad.len() || n_actions == 0 || theta.len() % n_actions != 0 {
        return Err(PolicyError::Invalid("shape mismatch".into()));
    }
    let mut out = Vec::with_capacity(theta.len());
    for (t, g) in theta.chunks(n_actions).zip(grad.chunks(n_actions)) {
        let y: Vec<f64> = t.iter().zip(g).map(|(a, b)| a + alpha * b).collect();
        out.extend(project_simplex(&y));
    }
    Ok(out)
}

/// Smoothness of the log-barrier objective in a softmax parameterization.
pub fn log_barrier_smoothness(zeta: f64, r_max: f64, nu: f64, n_states: usize, n_types: usize) -> Result<f64, PolicyError> {
    if !(0.0..1.0).contains(&zeta) {
        return Err(PolicyError::Invalid("discount must lie in [0, 1)".into()));
    }
    Ok(8.0 * r_max / (1.0 - zeta).powi(3) + 2.0 * nu * r_max / (n_states * n_types) as f64)
}

/// Gradient of `nu / K * sum ln pi` over all slices and actions, with `K`
/// the table size.
pub fn log_barrier_gradient(policy: &TabularPolicy, nu: f64) -> Vec<f64> {
    let k = policy.len() as f64;
    let na = policy.n_actions as f64;
    let mut g = Vec::with_capacity(policy.len());
    for s in 0..policy.n_states {
        for l in 0..policy.n_types {
            for p in policy.probs(s, l) {
                g.push(nu / k * (1.0 - na * p));
            }
        }
    }
    g
}

/// Multiplicative coordinate noise `g * (1 + phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    None,
    /// Uniform on `[lo, hi]` with `lo = -hi`.
    Bounded {
        lo: f64,
        hi: f64,
    },
    /// Zero-mean Gaussian, handled through its moments and an acceptance gate.
    Gaussian {
        std: f64,
    },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), PolicyError> {
        match *self {
            NoiseModel::None => Ok(()),
            NoiseModel::Bounded { lo, hi } => {
                if lo <= -1.0 || hi < lo || (lo + hi).abs() > 1e-12 {
                    Err(PolicyError::Invalid("bounded noise needs -1 < lo = -hi".into()))
                } else {
                    Ok(())
                }
            }
            NoiseModel::Gaussian { std } if std < 0.0 || !std.is_finite() => Err(PolicyError::Invalid("noise std must be non-negative".into())),
            NoiseModel::Gaussian { .. } => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        match *self {
            NoiseModel::None => vec![0.0; n],
            NoiseModel::Bounded { lo, hi } => (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect(),
            NoiseModel::Gaussian { std } => (0..n).map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect(),
        }
    }

    /// `E[phi^2]`.
    pub fn second_moment(&self) -> f64 {
        match *self {
            NoiseModel::None => 0.0,
            NoiseModel::Bounded { hi, .. } => hi * hi / 3.0,
            NoiseModel::Gaussian { std } => std * std,
        }
    }

    /// Step size guaranteeing a `(1 + phi_min) eta |g|^2` improvement for a
    /// `beta`-smooth objective (bounded noise) or the moment-based step
    /// `2 (1 - eta) / (beta (1 + sigma_2))` otherwise.
    pub fn step_size(&self, beta: f64, eta: f64) -> Result<f64, PolicyError> {
        self.validate()?;
        if !(0.0..1.0).contains(&eta) || beta <= 0.0 {
            return Err(PolicyError::Invalid("need eta in [0, 1) and beta > 0".into()));
        }
        let factor = match *self {
            NoiseModel::None => 1.0,
            NoiseModel::Bounded { hi, .. } => 1.0 + hi,
            NoiseModel::Gaussian { .. } => 1.0 + self.second_moment(),
        };
        Ok(2.0 * (1.0 - eta) / (beta * factor))
    }
}

/// `theta + alpha * g * (1 + phi)` coordinate-wise.
pub fn noisy_ascent(theta: &[f64], grad: &[f64], alpha: f64, phi: &[f64]) -> Vec<f64> {
    theta.iter().zip(grad).zip(phi).map(|((t, g), p)| t + alpha * g * (1.0 + p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub accepted: bool,
    pub theta: Vec<f64>,
    pub gain: f64,
}

/// Noisy step kept only if the surrogate gain reaches `eta_prime * alpha * |g|^2`.
pub fn gated_update<F: FnOnce(&[f64]) -> f64>(theta: &[f64], grad: &[f64], alpha: f64, phi: &[f64], eta_prime: f64, gain: F) -> GateOutcome {
    let candidate = noisy_ascent(theta, grad, alpha, phi);
    let g2: f64 = grad.iter().map(|g| g * g).sum();
    let gain = gain(&candidate);
    if gain >= eta_prime * alpha * g2 {
        GateOutcome {
            accepted: true,
            theta: candidate,
            gain,
        }
    } else {
        GateOutcome {
            accepted: false,
            theta: theta.to_vec(),
            gain,
        }
    }
}

/// Absolute moments `E|phi|^k`, `k = 1..=6`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseMoments {
    pub abs: [f64; 6],
}

impl NoiseMoments {
    /// Moments of the uniform law on `[-a, a]`.
    pub fn uniform(a: f64) -> Self {
        let mut abs = [0.0; 6];
        for (k, m) in abs.iter_mut().enumerate() {
            *m = a.powi(k as i32 + 1) / (k + 2) as f64;
        }
        NoiseMoments { abs }
    }

    fn sigma(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.abs[k - 1]
        }
    }
}

impl Default for NoiseMoments {
    fn default() -> Self {
        NoiseMoments::uniform(0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BerryEsseenInput {
    pub eta: f64,
    pub eta_prime: f64,
    /// Number of gradient coordinates.
    pub k: f64,
    pub moments: NoiseMoments,
    /// `alpha * beta`.
    pub alpha_beta: f64,
    /// `sum |g_k| / (sqrt(K) |g|)`.
    pub dispersion_avg: f64,
    /// `max |g_k| / |g|`.
    pub dispersion_max: f64,
}

impl BerryEsseenInput {
    /// Default configuration with equal gradient coordinates.
    pub fn equal_coordinates(k: f64) -> Self {
        let moments = NoiseMoments::default();
        let eta = 0.25;
        BerryEsseenInput {
            eta,
            eta_prime: 0.5 * eta,
            k,
            moments,
            alpha_beta: 2.0 * (1.0 - eta) / (1.0 + moments.sigma(2)),
            dispersion_avg: 1.0,
            dispersion_max: k.powf(-0.5),
        }
    }
}

/// `(max |g_k| / |g|, sum |g_k| / (sqrt(K) |g|))`.
pub fn dispersion(g: &[f64]) -> Option<(f64, f64)> {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || g.is_empty() {
        return None;
    }
    let max = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let sum: f64 = g.iter().map(|v| v.abs()).sum();
    Some((max / norm, sum / ((g.len() as f64).sqrt() * norm)))
}

/// Lower bound on the probability that a noisy softmax step clears the
/// `eta_prime` improvement gate.
pub fn berry_esseen_bound(inp: &BerryEsseenInput) -> Result<f64, PolicyError> {
    if !(inp.eta_prime < inp.eta) || inp.k < 1.0 || inp.alpha_beta <= 0.0 {
        return Err(PolicyError::Invalid("need eta' < eta, K >= 1 and alpha beta > 0".into()));
    }
    let s = |k| inp.moments.sigma(k);
    let ab = inp.alpha_beta;
    let kappa4 = (1.0 - ab).powi(2) * s(2) + ab * ab / 4.0 * (s(4) - s(2) * s(2));
    if kappa4 <= 0.0 {
        return Err(PolicyError::Invalid("degenerate noise moments".into()));
    }
    let y = ab / 2.0;
    let w = 1.0 - 2.0 * y;
    let c = [
        y.powi(3) * s(2).powi(3),
        3.0 * y * y * w * s(2).powi(2),
        -3.0 * s(2).powi(2) * y.powi(3) + 3.0 * s(2) * y * w * w,
        w.powi(3) - 6.0 * s(2) * y * y * w,
        3.0 * s(2) * y.powi(3) - 3.0 * y * w * w,
        3.0 * y * y * w,
        -y.powi(3),
    ];
    let kappa6: f64 = c.iter().enumerate().map(|(k, ck)| ck.abs() * s(k)).sum();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z = (inp.eta_prime - inp.eta) / kappa4.sqrt() * inp.dispersion_avg * inp.k.sqrt();
    Ok(1.0 - normal.cdf(z) - 0.6 * kappa6 / kappa4.powf(1.5) * inp.dispersion_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitivityReport {
    pub fraction_improving: f64,
    pub mean_improvement: f64,
    pub longest_non_improving_run: usize,
    pub converged: bool,
}

/// Summary of recorded per-iteration improvements.
pub fn transitivity_from_improvements(improvements: &[f64]) -> Result<TransitivityReport, PolicyError> {
    if improvements.len() < 2 {
        return Err(PolicyError::Invalid("need at least two recorded iterations".into()));
    }
    let n = improvements.len() as f64;
    let positive = improvements.iter().filter(|d| **d > 0.0).count();
    let mut run = 0;
    let mut longest = 0;
    for d in improvements {
        if *d > 0.0 {
            run = 0;
        } else {
            run += 1;
            longest = longest.max(run);
        }
    }
    Ok(TransitivityReport {
        fraction_improving: positive as f64 / n,
        mean_improvement: improvements.iter().sum::<f64>() / n,
        longest_non_improving_run: longest,
        converged: improvements.iter().all(|d| *d == 0.0),
    })
}

/// As [`transitivity_from_improvements`] on successive differences of a
/// per-iteration reward history.
pub fn transitivity_from_rewards(rewards: &[f64]) -> Result<TransitivityReport, PolicyError> {
    if rewards.len() < 3 {
        return Err(PolicyError::Invalid("need at least three recorded rewards".into()));
    }
    let d: Vec<f64> = rewards.windows(2).map(|w| w[1] - w[0]).collect();
    transitivity_from_improvements(&d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    #[test]
    fn simplex_examples() {
        assert_eq!(project_simplex(&[1.2, -0.2]), vec![1.0, 0.0]);
        let p = project_simplex(&[0.3, 0.3, 0.4]);
        assert!(p.iter().zip([0.3, 0.3, 0.4]).all(|(a, b)| (a - b).abs() < 1e-12));
        let p = project_simplex(&[0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn smoothness_example() {
        let b = pga_smoothness(0.9, 1.0, 2).unwrap();
        assert!((b - 3600.0).abs() < 1e-6);
        assert!(check_step_size(1.0 / 1800.0, b).is_err());
        assert!(check_step_size(0.999 / 1800.0, b).is_ok());
    }

    #[test]
    fn softmax_grad_sums_to_zero() {
        let mut p = TabularPolicy::uniform(Parameterization::Softmax, 2, 1, 3).unwrap();
        p.theta = vec![0.1, 0.5, -0.3, 0.0, 0.0, 1.0];
        let g = p.log_prob_grad(TableKey { state: 1, ty: 0, action: 2 });
        assert!(g.iter().map(|x| x.1).sum::<f64>().abs() < 1e-12);
        assert_eq!(g[0].0, 3);
    }

    #[test]
    fn shared_gradient_is_agent_mean() {
        let p = TabularPolicy::uniform(Parameterization::Softmax, 1, 1, 2).unwrap();
        let k = |a| TableKey { state: 0, ty: 0, action: a };
        let batch = vec![vec![vec![Step { key: k(0), reward: 1.0 }], vec![Step { key: k(1), reward: 0.5 }]]];
        let est = grad_estimate(&batch, &p, 1.0, Baseline::None).unwrap();
        for j in 0..2 {
            assert_eq!(est.shared[j], (est.per_agent[0][j] + est.per_agent[1][j]) / 2.0);
        }
        assert!((est.per_agent[0][0] - 0.5).abs() < 1e-12);
        assert!(grad_estimate(&[], &p, 1.0, Baseline::None).is_err());
    }

    #[test]
    fn agent_baseline_centers_each_slot() {
        let p = TabularPolicy::uniform(Parameterization::Softmax, 1, 1, 2).unwrap();
        let k = |a| TableKey { state: 0, ty: 0, action: a };
        let ep = |r0: f64, r1: f64| vec![vec![Step { key: k(0), reward: r0 }], vec![Step { key: k(1), reward: r1 }]];
        // slot 1 rewards are a constant offset, so its contribution vanishes
        let batch = vec![ep(1.0, 100.0), ep(3.0, 100.0)];
        let per = grad_estimate(&batch, &p, 1.0, Baseline::AgentMeanRewardToGo).unwrap();
        assert!(per.per_agent[1].iter().all(|g| *g == 0.0));
        let pooled = grad_estimate(&batch, &p, 1.0, Baseline::MeanRewardToGo).unwrap();
        assert!(pooled.per_agent[1].iter().any(|g| *g != 0.0));
        let single = vec![vec![batch[0][0].clone()], vec![batch[1][0].clone()]];
        assert_eq!(
            grad_estimate(&single, &p, 1.0, Baseline::AgentMeanRewardToGo).unwrap(),
            grad_estimate(&single, &p, 1.0, Baseline::MeanRewardToGo).unwrap()
        );
    }

    #[test]
    fn discount_weights_from_start() {
        let p = TabularPolicy::uniform(Parameterization::Softmax, 1, 1, 2).unwrap();
        let k = TableKey { state: 0, ty: 0, action: 0 };
        let traj = vec![Step { key: k, reward: 0.0 }, Step { key: k, reward: 1.0 }];
        let est = grad_estimate(&[vec![traj]], &p, 0.5, Baseline::None).unwrap();
        // both steps carry 0.5 * 1.0 to go, scaled by d ln pi = 0.5
        assert!((est.shared[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn berry_esseen_increases_with_dimension() {
        let a = berry_esseen_bound(&BerryEsseenInput::equal_coordinates(1e4)).unwrap();
        let b = berry_esseen_bound(&BerryEsseenInput::equal_coordinates(1e6)).unwrap();
        assert!(b > a && b > 0.99);
    }

    #[test]
    fn dispersion_extremes() {
        let (e, eh) = dispersion(&[1.0; 4]).unwrap();
        assert!((e - 0.5).abs() < 1e-12 && (eh - 1.0).abs() < 1e-12);
        let (e, eh) = dispersion(&[0.0, 0.0, 0.0, 2.0]).unwrap();
        assert!((e - 1.0).abs() < 1e-12 && (eh - 0.5).abs() < 1e-12);
    }

    #[test]
    fn transitivity_examples() {
        assert_eq!(transitivity_from_rewards(&[1.0, 2.0, 3.0, 4.0]).unwrap().fraction_improving, 1.0);
        assert_eq!(transitivity_from_improvements(&[1.0, -1.0, 1.0, -1.0]).unwrap().fraction_improving, 0.5);
        let c = transitivity_from_improvements(&[0.0; 5]).unwrap();
        assert_eq!(c.fraction_improving, 0.0);
        assert!(c.converged);
        assert!(transitivity_from_improvements(&[1.0]).is_err());
    }

    #[test]
    fn bounded_noise_example_factor() {
        let n = NoiseModel::Bounded { lo: -0.5, hi: 0.5 };
        let a = n.step_size(2.0, 0.5).unwrap();
        assert!((a - 1.0 / 3.0).abs() < 1e-12);
        assert!(NoiseModel::Bounded { lo: -0.2, hi: 0.5 }.validate().is_err());
    }

    #[test]
    fn gate_rejects_small_gain() {
        let out = gated_update(&[0.0, 0.0], &[1.0, 1.0], 0.1, &[0.0, 0.0], 0.5, |_| 0.05);
        assert!(!out.accepted);
        assert_eq!(out.theta, vec![0.0, 0.0]);
        let out = gated_update(&[0.0, 0.0], &[1.0, 1.0], 0.1, &[0.0, 0.0], 0.5, |_| 0.1);
        assert!(out.accepted);
    }

    #[test]
    fn sampling_follows_probabilities() {
        let mut p = TabularPolicy::uniform(Parameterization::Direct, 1, 1, 3).unwrap();
        p.theta = vec![0.2, 0.0, 0.8];
        let mut rng = substream(1, "pol", 0);
        let n = 100_000;
        let c = (0..n).filter(|_| p.sample(0, 0, &mut rng).action == 2).count();
        assert!((c as f64 / n as f64 - 0.8).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn projection_lands_on_simplex(v in proptest::collection::vec(-5.0f64..5.0, 1..8)) {
            let p = project_simplex(&v);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(project_simplex(&p), p);
        }

        #[test]
        fn pga_keeps_slices_on_simplex(g in proptest::collection::vec(-10.0f64..10.0, 6), alpha in 0.0f64..1.0) {
            let theta = vec![0.5, 0.5, 0.0, 1.0, 0.25, 0.75];
            let out = pga_update(&theta, &g, alpha, 2).unwrap();
            for c in out.chunks(2) {
                prop_assert!((c[0] + c[1] - 1.0).abs() < 1e-9 && c[0] >= 0.0 && c[1] >= 0.0);
            }
        }

        #[test]
        fn softmax_probs_positive(logits in proptest::collection::vec(-50.0f64..50.0, 1..6)) {
            let p = softmax(&logits);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
