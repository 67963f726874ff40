//! Level volume dynamics and their long-range moments.
//!
//! A level of volume `V` moves to `(1 - d_minus) V + d_plus`, where the signed
//! variation `d` splits into `d_plus = max(d, 0)` (absolute volume added) and
//! `d_minus = max(-d, 0)` (fraction removed, at most one).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EcnError;

/// One step of the volume recursion for a signed variation `delta >= -1`.
pub fn apply_dynamics(volume: f64, delta: f64) -> Result<f64, EcnError> {
    if !(volume.is_finite() && delta.is_finite()) {
        return Err(EcnError::NonFinite);
    }
    if volume < 0.0 {
        return Err(EcnError::NegativeVolume(volume));
    }
    if delta < -1.0 {
        return Err(EcnError::RemovalAboveOne(-delta));
    }
    Ok(apply_split(volume, delta.max(0.0), (-delta).max(0.0)))
}

/// The recursion with the positive and negative parts given separately.
pub fn apply_split(volume: f64, plus: f64, minus: f64) -> f64 {
    (1.0 - minus) * volume + plus
}

/// Moments of the variation of a single level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub mu_plus: f64,
    pub mu_minus: f64,
    pub sigma_plus: f64,
    pub sigma_minus: f64,
    /// Correlation between `d_minus` and `d_plus`.
    pub rho: f64,
}

/// Moments of the variations of `n` levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLevelParams {
    pub mu_plus: Vec<f64>,
    pub mu_minus: Vec<f64>,
    pub sigma_plus: Vec<f64>,
    pub sigma_minus: Vec<f64>,
    /// `rho[i][j]` is the correlation of `d_minus_i` with `d_plus_j`.
    pub rho: Vec<Vec<f64>>,
    pub rho_plus: Vec<Vec<f64>>,
    pub rho_minus: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRangeMoments {
    pub mean: Vec<f64>,
    pub cov_discrete: Vec<Vec<f64>>,
    pub cov_continuous: Vec<Vec<f64>>,
}

impl LevelParams {
    pub fn validate(&self) -> Result<(), EcnError> {
        let vals = [self.mu_plus, self.mu_minus, self.sigma_plus, self.sigma_minus, self.rho];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(EcnError::NonFinite);
        }
        if self.mu_minus <= 0.0 {
            return Err(EcnError::NoMeanReversion);
        }
        if self.mu_minus > 1.0 || self.sigma_plus < 0.0 || self.sigma_minus < 0.0 || self.rho.abs() > 1.0 {
            return Err(EcnError::InvalidParams("level moments out of range".into()));
        }
        Ok(())
    }

    /// Long-range mean `mu_plus / mu_minus`.
    pub fn mean_volume(&self) -> f64 {
        self.mu_plus / self.mu_minus
    }

    /// The constant term of the variance polynomial.
    pub fn sigma_inf_sq(&self) -> f64 {
        let m = self.mean_volume();
        self.sigma_plus.powi(2) + m * self.sigma_minus * (m * self.sigma_minus - 2.0 * self.rho * self.sigma_plus)
    }

    /// Long-range variance of the discrete-time recursion.
    pub fn discrete_variance(&self) -> Result<f64, EcnError> {
        self.validate()?;
        let den = 2.0 * self.mu_minus - self.mu_minus.powi(2) - self.sigma_minus.powi(2);
        if den <= 0.0 {
            return Err(EcnError::Degenerate("non-positive variance denominator".into()));
        }
        Ok(self.sigma_inf_sq() / den)
    }

    /// Long-range variance of the continuous-time limit.
    pub fn continuous_variance(&self) -> Result<f64, EcnError> {
        self.validate()?;
        let den = 2.0 * self.mu_minus - self.sigma_minus.powi(2);
        if den <= 0.0 {
            return Err(EcnError::Degenerate("non-positive variance denominator".into()));
        }
        Ok(self.sigma_inf_sq() / den)
    }

    pub fn as_multi(&self) -> MultiLevelParams {
        MultiLevelParams {
            mu_plus: vec![self.mu_plus],
            mu_minus: vec![self.mu_minus],
            sigma_plus: vec![self.sigma_plus],
            sigma_minus: vec![self.sigma_minus],
            rho: vec![vec![self.rho]],
            rho_plus: vec![vec![1.0]],
            rho_minus: vec![vec![1.0]],
        }
    }
}

impl MultiLevelParams {
    pub fn n_levels(&self) -> usize {
        self.mu_plus.len()
    }

    pub fn validate(&self) -> Result<(), EcnError> {
        let n = self.mu_plus.len();
        let vecs = [&self.mu_minus, &self.sigma_plus, &self.sigma_minus];
        if n == 0 || vecs.iter().any(|v| v.len() != n) {
            return Err(EcnError::InvalidParams("level vectors must share a non-zero length".into()));
        }
        for m in [&self.rho, &self.rho_plus, &self.rho_minus] {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(EcnError::InvalidParams("correlation matrices must be n x n".into()));
            }
            if m.iter().flatten().any(|r| !r.is_finite() || r.abs() > 1.0) {
                return Err(EcnError::InvalidParams("correlations must lie in [-1, 1]".into()));
            }
        }
        for i in 0..n {
            LevelParams {
                mu_plus: self.mu_plus[i],
                mu_minus: self.mu_minus[i],
                sigma_plus: self.sigma_plus[i],
                sigma_minus: self.sigma_minus[i],
                rho: self.rho[i][i],
            }
            .validate()?;
        }
        Ok(())
    }

    /// Block correlation matrix of `[d_minus_1..n, d_plus_1..n]`.
    pub fn joint_correlation(&self) -> DMatrix<f64> {
        let n = self.n_levels();
        DMatrix::from_fn(2 * n, 2 * n, |r, c| match (r < n, c < n) {
            (true, true) => self.rho_minus[r][c],
            (false, false) => self.rho_plus[r - n][c - n],
            (true, false) => self.rho[r][c - n],
            (false, true) => self.rho[c][r - n],
        })
    }
}

/// Long-range mean and covariances of the multi-level volume recursion.
pub fn longrange_moments(p: &MultiLevelParams) -> Result<LongRangeMoments, EcnError> {
    p.validate()?;
    let n = p.n_levels();
    let mean: Vec<f64> = (0..n).map(|i| p.mu_plus[i] / p.mu_minus[i]).collect();
    let (sp, sm, m) = (&p.sigma_plus, &p.sigma_minus, &mean);
    let mut cov_discrete = vec![vec![0.0; n]; n];
    let mut cov_continuous = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let s_inf = p.rho_plus[i][j] * sp[i] * sp[j] + m[i] * m[j] * p.rho_minus[i][j] * sm[i] * sm[j]
                - m[i] * p.rho[i][j] * sp[j] * sm[i]
                - m[j] * p.rho[j][i] * sp[i] * sm[j];
            let corr_minus = p.rho_minus[i][j] * sm[i] * sm[j];
            let den_d = p.mu_minus[i] + p.mu_minus[j] - p.mu_minus[i] * p.mu_minus[j] - corr_minus;
            let den_c = p.mu_minus[i] + p.mu_minus[j] - corr_minus;
            if den_d <= 0.0 || den_c <= 0.0 {
                return Err(EcnError::Degenerate(format!("non-positive covariance denominator at ({i}, {j})")));
            }
            cov_discrete[i][j] = s_inf / den_d;
            cov_continuous[i][j] = s_inf / den_c;
        }
    }
    Ok(LongRangeMoments {
        mean,
        cov_discrete,
        cov_continuous,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    SelfExciting,
    SelfInhibiting,
    Neither,
}

/// Quadratic variance of the one-step increment as a function of the
/// deviation `x = V - mean_volume` from the long-range mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariancePolynomial {
    pub constant: f64,
    pub quadratic: f64,
    pub linear: f64,
    pub mean_volume: f64,
    /// Volumes `(lower, upper)` delimiting the self-inhibiting region; `None`
    /// when the removal variance is zero.
    pub boundaries: Option<(f64, f64)>,
    pub never_self_inhibiting: bool,
}

impl VariancePolynomial {
    pub fn eval(&self, x: f64) -> f64 {
        self.constant + self.quadratic * x * x + self.linear * x
    }

    /// `Q(V - mean) - Q(0)` at volume `v`.
    pub fn impact_at_volume(&self, v: f64) -> f64 {
        let x = v - self.mean_volume;
        self.quadratic * x * x + self.linear * x
    }

    pub fn regime_at(&self, v: f64) -> Regime {
        match self.boundaries {
            None => Regime::Neither,
            Some((lo, hi)) if v < lo || v > hi => Regime::SelfExciting,
            Some((lo, hi)) if v > lo && v < hi => Regime::SelfInhibiting,
            Some(_) => Regime::Neither,
        }
    }
}

pub fn variance_polynomial(p: &LevelParams) -> Result<VariancePolynomial, EcnError> {
    p.validate()?;
    let m = p.mean_volume();
    let (sp, sm, rho) = (p.sigma_plus, p.sigma_minus, p.rho);
    let boundaries = (sm > 0.0).then(|| {
        let other = 2.0 * (sp / sm) * rho - m;
        (m.min(other), m.max(other))
    });
    let lhs = sp * p.mu_minus * rho;
    let rhs = sm * p.mu_plus;
    let scale = lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
    Ok(VariancePolynomial {
        constant: p.sigma_inf_sq(),
        quadratic: sm * sm,
        linear: 2.0 * sm * (m * sm - rho * sp),
        mean_volume: m,
        boundaries,
        never_self_inhibiting: sm > 0.0 && (lhs - rhs).abs() <= 1e-9 * scale,
    })
}

/// Draws `(d_plus, d_minus)` pairs with prescribed means, standard deviations
/// and correlations, built from linear combinations of independent
/// standardized uniforms so that the support stays bounded.
#[derive(Debug, Clone)]
pub struct IncrementSampler {
    n: usize,
    mean: DVector<f64>,
    scale: DVector<f64>,
    factor: DMatrix<f64>,
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

impl IncrementSampler {
    pub fn new(p: &MultiLevelParams) -> Result<Self, EcnError> {
        p.validate()?;
        let n = p.n_levels();
        let corr = p.joint_correlation();
        let factor = corr
            .cholesky()
            .ok_or_else(|| EcnError::InvalidParams("joint correlation is not positive definite".into()))?
            .l();
        let mean = DVector::from_iterator(2 * n, p.mu_minus.iter().chain(p.mu_plus.iter()).copied());
        let scale = DVector::from_iterator(2 * n, p.sigma_minus.iter().chain(p.sigma_plus.iter()).copied());
        for r in 0..2 * n {
            let reach = SQRT3 * scale[r] * factor.row(r).iter().map(|v| v.abs()).sum::<f64>();
            let (lo, hi) = (mean[r] - reach, mean[r] + reach);
            if r < n && (lo < 0.0 || hi > 1.0) {
                return Err(EcnError::InvalidParams(format!("removal support [{lo}, {hi}] leaves [0, 1]")));
            }
            if r >= n && lo < 0.0 {
                return Err(EcnError::InvalidParams(format!("addition support reaches {lo} < 0")));
            }
        }
        Ok(IncrementSampler { n, mean, scale, factor })
    }

    pub fn single(p: &LevelParams) -> Result<Self, EcnError> {
        Self::new(&p.as_multi())
    }

    /// Returns `(plus, minus)` per level.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<(f64, f64)> {
        let u = DVector::from_fn(2 * self.n, |_, _| SQRT3 * (2.0 * rng.random::<f64>() - 1.0));
        let z = &self.factor * u;
        (0..self.n)
            .map(|i| {
                let minus = self.mean[i] + self.scale[i] * z[i];
                let plus = self.mean[self.n + i] + self.scale[self.n + i] * z[self.n + i];
                (plus, minus.clamp(0.0, 1.0))
            })
            .collect()
    }
}
