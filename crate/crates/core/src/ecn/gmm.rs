//! Full-covariance Gaussian mixtures fitted by expectation-maximization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::EcnError;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const EIG_FLOOR: f64 = 1e-9;

/// Mixture parameters with covariances stored as variances plus correlation
/// matrices. A zero variance makes that coordinate a point mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub correlations: Vec<Vec<Vec<f64>>>,
}

impl GaussianMixtureParams {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn validate(&self) -> Result<(), EcnError> {
        let k = self.weights.len();
        let d = self.dim();
        if k == 0 || d == 0 {
            return Err(EcnError::InvalidParams("mixture needs at least one component and dimension".into()));
        }
        if self.means.len() != k || self.variances.len() != k || self.correlations.len() != k {
            return Err(EcnError::InvalidParams("component count mismatch".into()));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(EcnError::InvalidParams("weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(EcnError::InvalidParams(format!("weights sum to {total}")));
        }
        for c in 0..k {
            if self.means[c].len() != d || self.variances[c].len() != d {
                return Err(EcnError::InvalidParams("dimension mismatch".into()));
            }
            if self.means[c].iter().any(|v| !v.is_finite()) {
                return Err(EcnError::NonFinite);
            }
            if self.variances[c].iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(EcnError::InvalidParams("variances must be non-negative".into()));
            }
            let r = &self.correlations[c];
            if r.len() != d || r.iter().any(|row| row.len() != d) {
                return Err(EcnError::InvalidParams("correlation shape mismatch".into()));
            }
            for i in 0..d {
                for j in 0..d {
                    if !r[i][j].is_finite() || (r[i][j] - r[j][i]).abs() > 1e-9 {
                        return Err(EcnError::InvalidParams("correlation must be symmetric".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Covariance of component `c` after projecting its correlation matrix
    /// onto the positive semi-definite cone.
    pub fn covariance(&self, c: usize) -> DMatrix<f64> {
        let d = self.dim();
        let r = DMatrix::from_fn(d, d, |i, j| self.correlations[c][i][j]);
        let r = project_psd(&r, EIG_FLOOR);
        let s = DVector::from_iterator(d, self.variances[c].iter().map(|v| v.sqrt()));
        DMatrix::from_fn(d, d, |i, j| r[(i, j)] * s[i] * s[j])
    }

    pub fn from_covariances(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: &[DMatrix<f64>]) -> Self {
        let mut variances = Vec::with_capacity(covs.len());
        let mut correlations = Vec::with_capacity(covs.len());
        for cov in covs {
            let d = cov.nrows();
            let var: Vec<f64> = (0..d).map(|i| cov[(i, i)].max(0.0)).collect();
            let corr = (0..d)
                .map(|i| {
                    (0..d)
                        .map(|j| {
                            if i == j {
                                1.0
                            } else {
                                let s = (var[i] * var[j]).sqrt();
                                if s > 0.0 {
                                    (cov[(i, j)] / s).clamp(-1.0, 1.0)
                                } else {
                                    0.0
                                }
                            }
                        })
                        .collect()
                })
                .collect();
            variances.push(var);
            correlations.push(corr);
        }
        GaussianMixtureParams {
            weights,
            means,
            variances,
            correlations,
        }
    }

    /// Single diagonal component.
    pub fn diagonal(mean: Vec<f64>, variance: Vec<f64>) -> Self {
        let d = mean.len();
        let corr = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        GaussianMixtureParams {
            weights: vec![1.0],
            means: vec![mean],
            variances: vec![variance],
            correlations: vec![corr],
        }
    }
}

/// Symmetric eigen-decomposition with eigenvalues clipped from below.
pub fn project_psd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Mixture ready for sampling and density evaluation.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    params: GaussianMixtureParams,
    cumulative: Vec<f64>,
    factors: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn new(params: GaussianMixtureParams) -> Result<Self, EcnError> {
        params.validate()?;
        let mut factors = Vec::with_capacity(params.n_components());
        for c in 0..params.n_components() {
            let cov = params.covariance(c);
            let l = match cov.clone().cholesky() {
                Some(ch) => ch.l(),
                None => {
                    let eig = cov.symmetric_eigen();
                    let sq = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                    &eig.eigenvectors * DMatrix::from_diagonal(&sq)
                }
            };
            factors.push(l);
        }
        let mut acc = 0.0;
        let cumulative = params
            .weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(GaussianMixture { params, cumulative, factors })
    }

    pub fn params(&self) -> &GaussianMixtureParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let c = self.cumulative.iter().position(|c| u < *c).unwrap_or(self.cumulative.len() - 1);
        let d = self.dim();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &self.factors[c] * z;
        (0..d).map(|i| self.params.means[c][i] + x[i]).collect()
    }

    /// Log density; requires every component covariance to be non-singular.
    pub fn log_density(&self, x: &[f64]) -> Result<f64, EcnError> {
        let comps = ComponentCache::build(&self.params)?;
        Ok(comps.log_density(x))
    }

    /// Mean log density over a data set.
    pub fn mean_log_likelihood(&self, data: &[Vec<f64>]) -> Result<f64, EcnError> {
        if data.is_empty() {
            return Err(EcnError::EmptyData);
        }
        let comps = ComponentCache::build(&self.params)?;
        Ok(data.iter().map(|x| comps.log_density(x)).sum::<f64>() / data.len() as f64)
    }
}

struct ComponentCache {
    log_w: Vec<f64>,
    means: Vec<DVector<f64>>,
    chol: Vec<DMatrix<f64>>,
    log_norm: Vec<f64>,
}

impl ComponentCache {
    fn from_parts(weights: &[f64], means: &[DVector<f64>], covs: &[DMatrix<f64>]) -> Result<Self, EcnError> {
        let d = means[0].len() as f64;
        let mut chol = Vec::new();
        let mut log_norm = Vec::new();
        for cov in covs {
            let l = cov.clone().cholesky().ok_or(EcnError::SingularCovariance)?.l();
            let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            log_norm.push(-0.5 * (d * LN_2PI + log_det));
            chol.push(l);
        }
        Ok(ComponentCache {
            log_w: weights.iter().map(|w| w.ln()).collect(),
            means: means.to_vec(),
            chol,
            log_norm,
        })
    }

    fn build(p: &GaussianMixtureParams) -> Result<Self, EcnError> {
        let means: Vec<DVector<f64>> = p.means.iter().map(|m| DVector::from_vec(m.clone())).collect();
        let covs: Vec<DMatrix<f64>> = (0..p.n_components()).map(|c| p.covariance(c)).collect();
        Self::from_parts(&p.weights, &means, &covs)
    }

    fn component_log(&self, c: usize, x: &DVector<f64>) -> f64 {
        let diff = x - &self.means[c];
        let z = self.chol[c].solve_lower_triangular(&diff).expect("cholesky factor has positive diagonal");
        self.log_w[c] + self.log_norm[c] - 0.5 * z.norm_squared()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let logs: Vec<f64> = (0..self.means.len()).map(|c| self.component_log(c, &xv)).collect();
        log_sum_exp(&logs)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EmInit {
    /// k-means++ seeds followed by hard nearest-seed responsibilities.
    KMeansPlusPlus,
    /// Independent uniform responsibilities, normalized per sample.
    RandomResponsibilities,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Diagonal penalty as a multiple of each feature's variance.
    pub reg: f64,
    pub init: EmInit,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 500,
            tol: 1e-6,
            reg: 1e-6,
            init: EmInit::KMeansPlusPlus,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmFit {
    pub params: GaussianMixtureParams,
    /// Penalized log-likelihood after each E-step. Non-decreasing.
    pub objective: Vec<f64>,
    /// Plain log-likelihood after each E-step.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits a `k`-component mixture. The covariance update is
/// `(S_k + Psi) / N_k` with `Psi = reg * diag(feature variance) * n / k`,
/// the exact maximizer of the likelihood penalized by `-tr(Psi Sigma_k^-1) / 2`,
/// which keeps every iteration monotone in that objective.
pub fn em_fit<R: Rng + ?Sized>(data: &[Vec<f64>], k: usize, opts: &EmOptions, rng: &mut R) -> Result<EmFit, EcnError> {
    let n = data.len();
    if n == 0 {
        return Err(EcnError::EmptyData);
    }
    if k == 0 || k > n {
        return Err(EcnError::InvalidParams(format!("cannot fit {k} components to {n} samples")));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|x| x.len() != d) {
        return Err(EcnError::InvalidParams("samples must share a non-zero dimension".into()));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EcnError::NonFinite);
    }
    let xs: Vec<DVector<f64>> = data.iter().map(|x| DVector::from_column_slice(x)).collect();
    let nf = n as f64;
    let mean = xs.iter().fold(DVector::zeros(d), |a, x| a + x) / nf;
    let feat_var: Vec<f64> = (0..d)
        .map(|j| (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / nf).max(1e-12))
        .collect();
    let psi: Vec<f64> = feat_var.iter().map(|v| opts.reg * v * nf / k as f64).collect();

    let mut resp = initial_responsibilities(&xs, k, opts.init, rng);
    let (mut weights, mut means, mut covs) = m_step(&xs, &resp, &psi);

    let mut objective = Vec::new();
    let mut log_likelihood = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let cache = ComponentCache::from_parts(&weights, &means, &covs)?;
        let mut ll = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let logs: Vec<f64> = (0..k).map(|c| cache.component_log(c, x)).collect();
            let lse = log_sum_exp(&logs);
            ll += lse;
            for c in 0..k {
                resp[i][c] = (logs[c] - lse).exp();
            }
        }
        let penalty: f64 = cache
            .chol
            .iter()
            .map(|l| {
                let inv = cholesky_inverse_diag(l);
                -0.5 * psi.iter().zip(inv.iter()).map(|(p, q)| p * q).sum::<f64>()
            })
            .sum();
        let obj = ll + penalty;
        if !obj.is_finite() {
            return Err(EcnError::NonFinite);
        }
        if let Some(prev) = objective.last().copied() {
            let rel = (obj - prev) / f64::abs(prev).max(1e-300);
            objective.push(obj);
            log_likelihood.push(ll);
            if rel < opts.tol {
                converged = true;
                break;
            }
        } else {
            objective.push(obj);
            log_likelihood.push(ll);
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;
        (weights, means, covs) = m_step(&xs, &resp, &psi);
    }
    let params = GaussianMixtureParams::from_covariances(weights, means.iter().map(|m| m.iter().copied().collect()).collect(), &covs);
    Ok(EmFit {
        params,
        objective,
        log_likelihood,
        iterations,
        converged,
    })
}

fn cholesky_inverse_diag(l: &DMatrix<f64>) -> Vec<f64> {
    let d = l.nrows();
    let linv = l.clone().try_inverse().expect("triangular factor with positive diagonal");
    // diag(L^-T L^-1)_j = sum_i (L^-1)_{ij}^2
    (0..d).map(|j| (0..d).map(|i| linv[(i, j)].powi(2)).sum()).collect()
}

fn initial_responsibilities<R: Rng + ?Sized>(xs: &[DVector<f64>], k: usize, init: EmInit, rng: &mut R) -> Vec<Vec<f64>> {
    let n = xs.len();
    match init {
        EmInit::RandomResponsibilities => (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect(),
        EmInit::KMeansPlusPlus => {
            let mut seeds = vec![rng.random_range(0..n)];
            let mut dist: Vec<f64> = xs.iter().map(|x| (x - &xs[seeds[0]]).norm_squared()).collect();
            while seeds.len() < k {
                let total: f64 = dist.iter().sum();
                let pick = if total > 0.0 {
                    let mut u = rng.random::<f64>() * total;
                    let mut idx = n - 1;
                    for (i, dv) in dist.iter().enumerate() {
                        if u < *dv {
                            idx = i;
                            break;
                        }
                        u -= dv;
                    }
                    idx
                } else {
                    rng.random_range(0..n)
                };
                seeds.push(pick);
                for (i, x) in xs.iter().enumerate() {
                    dist[i] = dist[i].min((x - &xs[pick]).norm_squared());
                }
            }
            xs.iter()
                .map(|x| {
                    let best = (0..k)
                        .min_by(|a, b| {
                            let da = (x - &xs[seeds[*a]]).norm_squared();
                            let db = (x - &xs[seeds[*b]]).norm_squared();
                            da.total_cmp(&db)
                        })
                        .unwrap();
                    (0..k).map(|c| if c == best { 1.0 } else { 0.0 }).collect()
                })
                .collect()
        }
    }
}

type Mixture = (Vec<f64>, Vec<DVector<f64>>, Vec<DMatrix<f64>>);

fn m_step(xs: &[DVector<f64>], resp: &[Vec<f64>], psi: &[f64]) -> Mixture {
    let n = xs.len();
    let k = resp[0].len();
    let d = xs[0].len();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for c in 0..k {
        // Tiny floor keeps an emptied component well defined; the penalty
        // then pins its covariance at Psi / floor.
        let nk = resp.iter().map(|r| r[c]).sum::<f64>().max(1e-10);
        let mu = xs.iter().zip(resp).fold(DVector::zeros(d), |a, (x, r)| a + x * r[c]) / nk;
        let mut s = DMatrix::from_diagonal(&DVector::from_column_slice(psi));
        for (x, r) in xs.iter().zip(resp) {
            let diff = x - &mu;
            s.ger(r[c], &diff, &diff, 1.0);
        }
        weights.push(nk / n as f64);
        means.push(mu);
        covs.push(s / nk);
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    (weights, means, covs)
}
