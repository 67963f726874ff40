//! Gaussian-process surrogate with a Matern-5/2 kernel and UCB suggestions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::calibrator::ParamBox;
use super::CalibrationError;

/// Matern kernel with smoothness 5/2 and unit variance.
pub fn matern52(r: f64, length: f64) -> f64 {
    let s = 5f64.sqrt() * r / length;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpOptions {
    /// Observation noise variance on standardized targets.
    pub noise: f64,
    /// Length scales tried, in box-normalized units.
    pub length_grid: Vec<f64>,
    /// Largest diagonal jitter added before giving up.
    pub max_jitter: f64,
}

impl Default for GpOptions {
    fn default() -> Self {
        let length_grid = (0..16).map(|i| 0.03 * (100f64).powf(i as f64 / 15.0)).collect();
        GpOptions {
            noise: 1e-4,
            length_grid,
            max_jitter: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gp {
    x: Vec<Vec<f64>>,
    bounds: ParamBox,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    pub length: f64,
    pub log_marginal_likelihood: f64,
    pub jitter: f64,
    y_mean: f64,
    y_scale: f64,
}

fn normalize(x: &[f64], b: &ParamBox) -> Vec<f64> {
    x.iter()
        .zip(b.lo.iter().zip(&b.hi))
        .map(|(v, (l, h))| if h > l { (v - l) / (h - l) } else { 0.0 })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn factor(x: &[Vec<f64>], length: f64, noise: f64, max_jitter: f64) -> Result<(Cholesky<f64, Dyn>, f64), CalibrationError> {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| matern52(dist(&x[i], &x[j]), length));
    let mut jitter = 0.0;
    loop {
        let m = &k + DMatrix::identity(n, n) * (noise + jitter);
        if let Some(c) = m.cholesky() {
            return Ok((c, jitter));
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > max_jitter {
            return Err(CalibrationError::IllConditioned);
        }
    }
}

impl Gp {
    /// Fits on `(x, y)`, picking the length scale with the highest log
    /// marginal likelihood on the grid.
    pub fn fit(x: &[Vec<f64>], y: &[f64], bounds: &ParamBox, opts: &GpOptions) -> Result<Self, CalibrationError> {
        if x.is_empty() || x.len() != y.len() || x.iter().any(|p| p.len() != bounds.dim()) {
            return Err(CalibrationError::Config("GP needs matching non-empty inputs".into()));
        }
        if y.iter().any(|v| !v.is_finite()) || opts.length_grid.is_empty() {
            return Err(CalibrationError::Config("GP targets must be finite and the length grid non-empty".into()));
        }
        let n = y.len() as f64;
        let y_mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n).sqrt();
        let y_scale = if sd > 1e-12 { sd } else { 1.0 };
        let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_scale));
        let xn: Vec<Vec<f64>> = x.iter().map(|p| normalize(p, bounds)).collect();
        let mut best: Option<Gp> = None;
        let mut last_err = CalibrationError::IllConditioned;
        for &length in &opts.length_grid {
            let (chol, jitter) = match factor(&xn, length, opts.noise, opts.max_jitter) {
                Ok(f) => f,
                Err(e) => {
                    last_err = e;
                    continue;
                }
            };
            let alpha = chol.solve(&ys);
            let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
            let lml = -0.5 * ys.dot(&alpha) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
            if best.as_ref().is_none_or(|b| lml > b.log_marginal_likelihood) {
                best = Some(Gp {
                    x: xn.clone(),
                    bounds: bounds.clone(),
                    chol,
                    alpha,
                    length,
                    log_marginal_likelihood: lml,
                    jitter,
                    y_mean,
                    y_scale,
                });
            }
        }
        best.ok_or(last_err)
    }

    /// Posterior mean and standard deviation at `p`.
    pub fn predict(&self, p: &[f64]) -> (f64, f64) {
        let q = normalize(p, &self.bounds);
        let k = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| matern52(dist(xi, &q), self.length)));
        let mu = k.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k).unwrap_or_else(|| DVector::zeros(k.len()));
        let var = (1.0 - v.dot(&v)).max(0.0);
        (self.y_mean + self.y_scale * mu, self.y_scale * var.sqrt())
    }
}

/// Index maximizing `mean + kappa * std`.
pub fn ucb_argmax(means: &[f64], stds: &[f64], kappa: f64) -> Option<usize> {
    means
        .iter()
        .zip(stds)
        .map(|(m, s)| m + kappa * s)
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoOptions {
    pub kappa: f64,
    pub candidates: usize,
    pub gp: GpOptions,
}

impl Default for BoOptions {
    fn default() -> Self {
        BoOptions {
            kappa: 0.5,
            candidates: 512,
            gp: GpOptions::default(),
        }
    }
}

/// UCB maximizer over uniform candidates in `bounds` for a GP fitted to
/// `history`.
pub fn bo_suggest<R: Rng + ?Sized>(history: &[(Vec<f64>, f64)], bounds: &ParamBox, opts: &BoOptions, rng: &mut R) -> Result<Vec<f64>, CalibrationError> {
    if history.len() < 2 {
        return Err(CalibrationError::Config("suggestions need at least two evaluations".into()));
    }
    let x: Vec<Vec<f64>> = history.iter().map(|h| h.0.clone()).collect();
    let y: Vec<f64> = history.iter().map(|h| h.1).collect();
    let gp = Gp::fit(&x, &y, bounds, &opts.gp)?;
    let cands: Vec<Vec<f64>> = (0..opts.candidates.max(1)).map(|_| bounds.sample_uniform(rng)).collect();
    let (means, stds): (Vec<f64>, Vec<f64>) = cands.iter().map(|c| gp.predict(c)).unzip();
    let i = ucb_argmax(&means, &stds, opts.kappa).ok_or(CalibrationError::IllConditioned)?;
    Ok(cands[i].clone())
}
