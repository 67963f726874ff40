use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::CalibrationError;

/// Floor on the calibrator's log standard deviation.
pub const LOG_STD_FLOOR: f64 = -4.0;

/// Per-coordinate interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ParamBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, CalibrationError> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
            return Err(CalibrationError::Config("box bounds must be finite with lo <= hi".into()));
        }
        Ok(ParamBox { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.lo.iter().zip(&self.hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect()
    }

    pub fn width(&self) -> Vec<f64> {
        self.hi.iter().zip(&self.lo).map(|(h, l)| h - l).collect()
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| l + (h - l) * rng.random::<f64>()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CalibratorMode {
    /// Increment mean `W * Lambda + b`.
    Linear,
    /// New profile drawn around `b` regardless of the current one, i.e.
    /// increment mean `b - Lambda`.
    Stateless,
}

/// Linear-Gaussian increment policy with clamped actions and states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorPolicy {
    pub mode: CalibratorMode,
    /// Row-major `d x d`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub log_std: Vec<f64>,
    pub state_box: ParamBox,
    pub action_box: ParamBox,
}

/// Gradient with the same layout as the policy parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl CalibratorGrad {
    fn zeros(d: usize) -> Self {
        CalibratorGrad {
            w: vec![0.0; d * d],
            b: vec![0.0; d],
            log_std: vec![0.0; d],
        }
    }

    fn axpy(&mut self, a: f64, o: &CalibratorGrad) {
        for (x, y) in self
            .w
            .iter_mut()
            .zip(&o.w)
            .chain(self.b.iter_mut().zip(&o.b))
            .chain(self.log_std.iter_mut().zip(&o.log_std))
        {
            *x += a * y;
        }
    }

    pub fn norm(&self) -> f64 {
        self.w.iter().chain(&self.b).chain(&self.log_std).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One calibrator decision: the pre-clamp Gaussian draw and the profile it
/// leads to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorStep {
    pub state: Vec<f64>,
    pub raw_action: Vec<f64>,
    pub next: Vec<f64>,
}

impl CalibratorPolicy {
    /// Zero mean increment with a common initial standard deviation.
    pub fn new(mode: CalibratorMode, state_box: ParamBox, action_box: ParamBox, std: f64) -> Result<Self, CalibrationError> {
        let d = state_box.dim();
        if action_box.dim() != d || d == 0 {
            return Err(CalibrationError::Config("state and action boxes must share a positive dimension".into()));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(CalibrationError::Config(format!("initial std {std} must be positive")));
        }
        let p = CalibratorPolicy {
            mode,
            w: vec![0.0; d * d],
            b: vec![0.0; d],
            log_std: vec![std.ln().max(LOG_STD_FLOOR); d],
            state_box,
            action_box,
        };
        Ok(p)
    }

    /// Stateless policy centered on `center`.
    pub fn stateless(center: &[f64], state_box: ParamBox, action_box: ParamBox, std: f64) -> Result<Self, CalibrationError> {
        let mut p = CalibratorPolicy::new(CalibratorMode::Stateless, state_box, action_box, std)?;
        p.b = center.to_vec();
        Ok(p)
    }

    /// Linear policy whose initial mean increment `center - Lambda` pulls
    /// every profile toward `center`.
    pub fn anchored(center: &[f64], state_box: ParamBox, action_box: ParamBox, std: f64) -> Result<Self, CalibrationError> {
        let mut p = CalibratorPolicy::new(CalibratorMode::Linear, state_box, action_box, std)?;
        if center.len() != p.dim() {
            return Err(CalibrationError::Config("anchor has the wrong dimension".into()));
        }
        let d = p.dim();
        for i in 0..d {
            p.w[i * d + i] = -1.0;
        }
        p.b = center.to_vec();
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn mean(&self, state: &[f64]) -> Vec<f64> {
        let d = self.dim();
        match self.mode {
            CalibratorMode::Linear => (0..d).map(|i| self.b[i] + (0..d).map(|j| self.w[i * d + j] * state[j]).sum::<f64>()).collect(),
            CalibratorMode::Stateless => self.b.iter().zip(state).map(|(b, s)| b - s).collect(),
        }
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    fn check(&self, state: &[f64], action: &[f64]) -> Result<(), CalibrationError> {
        if state.len() != self.dim() || action.len() != self.dim() {
            return Err(CalibrationError::Config("state or action has the wrong dimension".into()));
        }
        if self.log_std.iter().any(|l| !l.is_finite()) {
            return Err(CalibrationError::DegenerateStd);
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(CalibrationError::Config("action outside the Gaussian support".into()));
        }
        Ok(())
    }

    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64, CalibrationError> {
        self.check(state, action)?;
        let mu = self.mean(state);
        Ok(action
            .iter()
            .zip(&mu)
            .zip(&self.log_std)
            .map(|((a, m), l)| -0.5 * ((a - m) / l.exp()).powi(2) - l - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum())
    }

    /// Gradient of `ln pi(action | state)` in the policy parameters.
    pub fn score(&self, state: &[f64], action: &[f64]) -> Result<CalibratorGrad, CalibrationError> {
        self.check(state, action)?;
        let d = self.dim();
        let mu = self.mean(state);
        let mut g = CalibratorGrad::zeros(d);
        for i in 0..d {
            let var = (2.0 * self.log_std[i]).exp();
            let z = (action[i] - mu[i]) / var;
            g.b[i] = z;
            if self.mode == CalibratorMode::Linear {
                for j in 0..d {
                    g.w[i * d + j] = z * state[j];
                }
            }
            g.log_std[i] = (action[i] - mu[i]).powi(2) / var - 1.0;
        }
        Ok(g)
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> CalibratorStep {
        self.step_with_noise(state, &self.draw_noise(rng))
    }

    /// Standard normal draw with one entry per coordinate.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Step whose raw increment is `mean + std * noise`.
    pub fn step_with_noise(&self, state: &[f64], noise: &[f64]) -> CalibratorStep {
        let mu = self.mean(state);
        let raw: Vec<f64> = mu.iter().zip(&self.log_std).zip(noise).map(|((m, l), z)| m + l.exp() * z).collect();
        let delta = self.action_box.clamp(&raw);
        let moved: Vec<f64> = state.iter().zip(&delta).map(|(s, d)| s + d).collect();
        CalibratorStep {
            state: state.to_vec(),
            raw_action: raw,
            next: self.state_box.clamp(&moved),
        }
    }

    /// Gradient ascent step; the log standard deviation is floored.
    pub fn apply(&mut self, grad: &CalibratorGrad, alpha: f64) {
        let d = self.dim();
        if self.mode == CalibratorMode::Linear {
            for (w, g) in self.w.iter_mut().zip(&grad.w) {
                *w += alpha * g;
            }
        }
        for i in 0..d {
            self.b[i] += alpha * grad.b[i];
            self.log_std[i] = (self.log_std[i] + alpha * grad.log_std[i]).max(LOG_STD_FLOOR);
        }
    }
}

/// REINFORCE estimate `(1/B) sum_b score_b * (r_b - baseline)` with an
/// optional batch-mean baseline.
pub fn reinforce_calibrator_grad(policy: &CalibratorPolicy, batch: &[(CalibratorStep, f64)], mean_baseline: bool) -> Result<CalibratorGrad, CalibrationError> {
    if batch.is_empty() {
        return Err(CalibrationError::Config("empty calibrator batch".into()));
    }
    let n = batch.len() as f64;
    let base = if mean_baseline { batch.iter().map(|(_, r)| r).sum::<f64>() / n } else { 0.0 };
    let mut g = CalibratorGrad::zeros(policy.dim());
    for (step, r) in batch {
        g.axpy((r - base) / n, &policy.score(&step.state, &step.raw_action)?);
    }
    Ok(g)
}

/// Constant shared-policy rate and `alpha_cal_n = c / (1 + n)^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoTimescaleSchedule {
    pub shared: f64,
    pub cal: f64,
    pub cal_power: f64,
}

impl Default for TwoTimescaleSchedule {
    fn default() -> Self {
        TwoTimescaleSchedule {
            shared: 0.02,
            cal: 1.0,
            cal_power: 0.7,
        }
    }
}

impl TwoTimescaleSchedule {
    pub fn alpha_shared(&self, _n: usize) -> f64 {
        self.shared
    }

    pub fn alpha_cal(&self, n: usize) -> f64 {
        self.cal / (1.0 + n as f64).powf(self.cal_power)
    }

    /// Rates must be non-negative, the calibrator rate must vanish relative
    /// to the shared one while summing to infinity, and the shared rate must
    /// respect `max_shared` when given.
    pub fn validate(&self, max_shared: Option<f64>) -> Result<(), CalibrationError> {
        if !(self.shared >= 0.0 && self.cal >= 0.0 && self.shared.is_finite() && self.cal.is_finite()) {
            return Err(CalibrationError::Config("learning rates must be finite and non-negative".into()));
        }
        if self.cal > 0.0 && !(self.cal_power > 0.0 && self.cal_power <= 1.0) {
            return Err(CalibrationError::Config(format!(
                "calibrator decay power {} must lie in (0, 1]",
                self.cal_power
            )));
        }
        if let Some(m) = max_shared {
            if self.shared >= m {
                return Err(CalibrationError::Config(format!("shared rate {} not below {m}", self.shared)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn unit(d: usize) -> (ParamBox, ParamBox) {
        (
            ParamBox::new(vec![0.0; d], vec![1.0; d]).unwrap(),
            ParamBox::new(vec![-1.0; d], vec![1.0; d]).unwrap(),
        )
    }

    #[test]
    fn gaussian_mean_gradient_of_linear_reward_is_one() {
        // N(mu, 1) with r = action: d/dmu E[r] = E[(a - mu) a] = 1
        let (s, a) = unit(1);
        let p = CalibratorPolicy::new(CalibratorMode::Linear, s, a, 1.0).unwrap();
        let mut rng = substream(3, "t", 0);
        let batch: Vec<(CalibratorStep, f64)> = (0..100_000)
            .map(|_| {
                let st = p.sample(&[0.5], &mut rng);
                let r = st.raw_action[0];
                (st, r)
            })
            .collect();
        let g = reinforce_calibrator_grad(&p, &batch, false).unwrap();
        assert!((g.b[0] - 1.0).abs() < 0.02, "{}", g.b[0]);
        assert!((g.w[0] - 0.5).abs() < 0.02);
    }

    #[test]
    fn constant_reward_has_zero_mean_gradient() {
        let (s, a) = unit(2);
        let p = CalibratorPolicy::new(CalibratorMode::Linear, s, a, 0.3).unwrap();
        let mut rng = substream(4, "t", 0);
        let batch: Vec<_> = (0..50_000).map(|_| (p.sample(&[0.2, 0.7], &mut rng), 2.0)).collect();
        let g = reinforce_calibrator_grad(&p, &batch, false).unwrap();
        assert!(g.b.iter().all(|v| v.abs() < 0.05), "{:?}", g.b);
        assert_eq!(reinforce_calibrator_grad(&p, &batch, true).unwrap().norm(), 0.0);
    }

    #[test]
    fn score_matches_log_density_differences() {
        let (s, a) = unit(2);
        let mut p = CalibratorPolicy::new(CalibratorMode::Linear, s, a, 0.4).unwrap();
        p.w = vec![0.1, -0.2, 0.3, 0.05];
        p.b = vec![0.02, -0.1];
        let state = [0.3, 0.8];
        let act = [0.2, -0.4];
        let g = p.score(&state, &act).unwrap();
        let h = 1e-6;
        let fd = |f: &dyn Fn(&mut CalibratorPolicy)| {
            let mut q = p.clone();
            f(&mut q);
            (q.log_prob(&state, &act).unwrap() - p.log_prob(&state, &act).unwrap()) / h
        };
        assert!((fd(&|q| q.b[1] += h) - g.b[1]).abs() < 1e-4);
        assert!((fd(&|q| q.w[1] += h) - g.w[1]).abs() < 1e-4);
        assert!((fd(&|q| q.log_std[0] += h) - g.log_std[0]).abs() < 1e-4);
    }

    #[test]
    fn samples_stay_in_boxes() {
        let (s, a) = unit(3);
        let p = CalibratorPolicy::new(CalibratorMode::Linear, s.clone(), a, 5.0).unwrap();
        let mut rng = substream(5, "t", 0);
        let mut state = vec![0.5; 3];
        for _ in 0..200 {
            let st = p.sample(&state, &mut rng);
            assert!(st.next.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.clamp(&st.next), st.next);
            state = st.next;
        }
    }

    #[test]
    fn stateless_mode_centers_the_next_profile() {
        let (s, a) = unit(1);
        let p = CalibratorPolicy::stateless(&[0.6], s, a, 0.01).unwrap();
        let mut rng = substream(6, "t", 0);
        let st = p.sample(&[0.1], &mut rng);
        assert!((st.next[0] - 0.6).abs() < 0.05);
    }

    #[test]
    fn std_floor_and_degenerate_errors() {
        let (s, a) = unit(1);
        let mut p = CalibratorPolicy::new(CalibratorMode::Linear, s, a, 0.1).unwrap();
        p.apply(
            &CalibratorGrad {
                w: vec![0.0],
                b: vec![0.0],
                log_std: vec![-1e6],
            },
            1.0,
        );
        assert_eq!(p.log_std[0], LOG_STD_FLOOR);
        p.log_std[0] = f64::NEG_INFINITY;
        assert!(matches!(p.score(&[0.0], &[0.0]), Err(CalibrationError::DegenerateStd)));
        assert!(p.score(&[0.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn schedule_ratio_decreases() {
        let s = TwoTimescaleSchedule::default();
        s.validate(None).unwrap();
        let ratios: Vec<f64> = (0..100).map(|n| s.alpha_cal(n) / s.alpha_shared(n)).collect();
        assert!(ratios.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_cal(1_000_000) / s.alpha_shared(0) < 1e-4 * ratios[0]);
        assert!(s.validate(Some(0.01)).is_err());
        assert!(TwoTimescaleSchedule { cal_power: 1.5, ..s }.validate(None).is_err());
    }

    proptest::proptest! {
        #[test]
        fn clamp_is_idempotent(x in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let b = ParamBox::new(vec![0.0, -1.0, 0.0, 0.5], vec![1.0, 1.0, 5.0, 2.0]).unwrap();
            let once = b.clamp(&x);
            proptest::prop_assert_eq!(b.clamp(&once), once);
        }
    }
}
