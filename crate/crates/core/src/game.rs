//! Differentiable games: gradients, Jacobians, and the split of the game
//! Jacobian into diagonal, symmetric and antisymmetric parts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("utility of player {player} is not finite at a stencil point")]
    NonFinite { player: usize },
    #[error("weights undefined: both interaction norms vanish")]
    ZeroDenominator,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("analytic Jacobian not available for this game")]
    NoAnalytic,
}

/// Game where player `i` controls the coordinates `offsets[i]..offsets[i+1]`
/// of one concatenated parameter vector.
pub trait DifferentiableGame: Sync {
    fn dims(&self) -> &[usize];

    fn utility(&self, player: usize, theta: &[f64]) -> f64;

    fn analytic_jacobian(&self, _theta: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    fn n_params(&self) -> usize {
        self.dims().iter().sum()
    }

    /// Player owning each coordinate.
    fn owners(&self) -> Vec<usize> {
        self.dims().iter().enumerate().flat_map(|(i, d)| std::iter::repeat_n(i, *d)).collect()
    }
}

type Utility = dyn Fn(usize, &[f64]) -> f64 + Send + Sync;
type Jacobian = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// Game defined by closures.
pub struct FnGame {
    dims: Vec<usize>,
    utility: Box<Utility>,
    jacobian: Option<Box<Jacobian>>,
}

impl FnGame {
    pub fn new(dims: Vec<usize>, utility: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        FnGame {
            dims,
            utility: Box::new(utility),
            jacobian: None,
        }
    }

    pub fn with_jacobian(mut self, j: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.jacobian = Some(Box::new(j));
        self
    }
}

impl DifferentiableGame for FnGame {
    fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn utility(&self, player: usize, theta: &[f64]) -> f64 {
        (self.utility)(player, theta)
    }

    fn analytic_jacobian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        self.jacobian.as_ref().map(|j| j(theta))
    }
}

/// Relative central-difference step: `h_k = rel * (1 + |theta_k|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdStep {
    pub rel: f64,
}

impl Default for FdStep {
    fn default() -> Self {
        FdStep { rel: 1e-4 }
    }
}

impl FdStep {
    fn at(&self, x: f64) -> f64 {
        self.rel * (1.0 + x.abs())
    }
}

fn eval(game: &dyn DifferentiableGame, player: usize, theta: &[f64]) -> Result<f64, GameError> {
    let v = game.utility(player, theta);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GameError::NonFinite { player })
    }
}

fn check_len(game: &dyn DifferentiableGame, theta: &[f64]) -> Result<(), GameError> {
    if theta.len() != game.n_params() {
        return Err(GameError::Shape(format!("theta has {} entries, game has {}", theta.len(), game.n_params())));
    }
    Ok(())
}

/// Simultaneous gradient: entry `k` is the derivative of its owner's
/// utility along coordinate `k`.
pub fn game_gradient(game: &dyn DifferentiableGame, theta: &[f64], step: FdStep) -> Result<DVector<f64>, GameError> {
    check_len(game, theta)?;
    let owners = game.owners();
    let mut g = DVector::zeros(theta.len());
    let mut x = theta.to_vec();
    for k in 0..theta.len() {
        let h = step.at(theta[k]);
        x[k] = theta[k] + h;
        let up = eval(game, owners[k], &x)?;
        x[k] = theta[k] - h;
        let down = eval(game, owners[k], &x)?;
        x[k] = theta[k];
        g[k] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum JacobianMode {
    FiniteDiff(FdStep),
    Analytic,
}

/// Game Jacobian `J[k][l] = d^2 V_owner(k) / d theta_k d theta_l`.
pub fn game_jacobian(game: &dyn DifferentiableGame, theta: &[f64], mode: JacobianMode) -> Result<DMatrix<f64>, GameError> {
    check_len(game, theta)?;
    let step = match mode {
        JacobianMode::Analytic => return game.analytic_jacobian(theta).ok_or(GameError::NoAnalytic),
        JacobianMode::FiniteDiff(s) => s,
    };
    let n = theta.len();
    let owners = game.owners();
    let mut j = DMatrix::zeros(n, n);
    let mut x = theta.to_vec();
    for k in 0..n {
        let p = owners[k];
        let hk = step.at(theta[k]);
        for l in 0..n {
            if l == k {
                let c = eval(game, p, theta)?;
                x[k] = theta[k] + hk;
                let up = eval(game, p, &x)?;
                x[k] = theta[k] - hk;
                let down = eval(game, p, &x)?;
                x[k] = theta[k];
                j[(k, k)] = (up - 2.0 * c + down) / (hk * hk);
                continue;
            }
            let hl = step.at(theta[l]);
            let mut corner = |sk: f64, sl: f64| -> Result<f64, GameError> {
                x[k] = theta[k] + sk * hk;
                x[l] = theta[l] + sl * hl;
                let v = eval(game, p, &x);
                x[k] = theta[k];
                x[l] = theta[l];
                v
            };
            let v = corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?;
            j[(k, l)] = v / (4.0 * hk * hl);
        }
    }
    Ok(j)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianDecomposition {
    pub j: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

impl JacobianDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.d + &self.s + &self.a
    }
}

pub fn decompose(j: &DMatrix<f64>) -> Result<JacobianDecomposition, GameError> {
    if !j.is_square() {
        return Err(GameError::Shape("Jacobian must be square".into()));
    }
    let d = DMatrix::from_diagonal(&j.diagonal());
    let jt = j.transpose();
    let a = (j - &jt) * 0.5;
    let mut s = (j + &jt) * 0.5;
    s.fill_diagonal(0.0);
    Ok(JacobianDecomposition { j: j.clone(), d, s, a })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HpWeights {
    pub omega_a: f64,
    pub omega_s: f64,
    pub norm_ag: f64,
    pub norm_sg: f64,
}

fn weights_from_norms(norm_ag: f64, norm_sg: f64) -> Result<HpWeights, GameError> {
    let den = norm_ag + norm_sg;
    if !(den > 0.0) {
        return Err(GameError::ZeroDenominator);
    }
    Ok(HpWeights {
        omega_a: norm_ag / den,
        omega_s: norm_sg / den,
        norm_ag,
        norm_sg,
    })
}

/// `omega_A = |A^T G| / (|A^T G| + |S G|)` and `omega_S = 1 - omega_A`.
pub fn hamiltonian_potential_weights(j: &DMatrix<f64>, g: &DVector<f64>) -> Result<HpWeights, GameError> {
    if j.ncols() != g.len() {
        return Err(GameError::Shape("Jacobian and gradient sizes differ".into()));
    }
    let dec = decompose(j)?;
    weights_from_norms((dec.a.transpose() * g).norm(), (&dec.s * g).norm())
}

/// Coordinates of the listed players.
pub fn player_coordinates(dims: &[usize], players: &[usize]) -> Vec<usize> {
    let mut offs = vec![0];
    for d in dims {
        offs.push(offs.last().unwrap() + d);
    }
    let mut out = Vec::new();
    for p in players {
        out.extend(offs[*p]..offs[*p + 1]);
    }
    out
}

/// Restriction of `J` and `G` to a player subset.
pub fn restrict(j: &DMatrix<f64>, g: &DVector<f64>, dims: &[usize], players: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let idx = player_coordinates(dims, players);
    let jr = DMatrix::from_fn(idx.len(), idx.len(), |r, c| j[(idx[r], idx[c])]);
    let gr = DVector::from_fn(idx.len(), |r, _| g[idx[r]]);
    (jr, gr)
}

/// Weights for a player subset from Jacobian-gradient products, without
/// forming the Jacobian: `J G` by differencing `G` along `G`, `J^T G` as the
/// gradient of `|G|^2 / 2`, and the diagonal of `J` coordinate by coordinate.
pub fn weights_matrix_free(game: &dyn DifferentiableGame, theta: &[f64], players: &[usize], step: FdStep) -> Result<HpWeights, GameError> {
    check_len(game, theta)?;
    let idx = player_coordinates(game.dims(), players);
    let owners = game.owners();
    let g = game_gradient(game, theta, step)?;
    let mut v = DVector::zeros(theta.len());
    for k in &idx {
        v[*k] = g[*k];
    }
    let outer = 2e-4;
    let theta_norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
    let vn = v.norm();
    let jg: Vec<f64> = if vn > 0.0 {
        let h = outer * (1.0 + theta_norm) / vn;
        let plus: Vec<f64> = theta.iter().zip(v.iter()).map(|(t, d)| t + h * d).collect();
        let minus: Vec<f64> = theta.iter().zip(v.iter()).map(|(t, d)| t - h * d).collect();
        let gp = game_gradient(game, &plus, step)?;
        let gm = game_gradient(game, &minus, step)?;
        idx.iter().map(|k| (gp[*k] - gm[*k]) / (2.0 * h)).collect()
    } else {
        vec![0.0; idx.len()]
    };
    let half_sq = |x: &[f64]| -> Result<f64, GameError> {
        let gx = game_gradient(game, x, step)?;
        Ok(0.5 * idx.iter().map(|k| gx[*k] * gx[*k]).sum::<f64>())
    };
    let mut x = theta.to_vec();
    let mut jtg = Vec::with_capacity(idx.len());
    let mut diag = Vec::with_capacity(idx.len());
    for k in &idx {
        let h = outer * (1.0 + theta[*k].abs());
        x[*k] = theta[*k] + h;
        let up = half_sq(&x)?;
        let vup = eval(game, owners[*k], &x)?;
        x[*k] = theta[*k] - h;
        let down = half_sq(&x)?;
        let vdown = eval(game, owners[*k], &x)?;
        x[*k] = theta[*k];
        jtg.push((up - down) / (2.0 * h));
        let c = eval(game, owners[*k], theta)?;
        diag.push((vup - 2.0 * c + vdown) / (h * h));
    }
    let gr: Vec<f64> = idx.iter().map(|k| g[*k]).collect();
    let mut ag = 0.0;
    let mut sg = 0.0;
    for r in 0..idx.len() {
        let a = 0.5 * (jtg[r] - jg[r]);
        let s = 0.5 * (jtg[r] + jg[r]) - diag[r] * gr[r];
        ag += a * a;
        sg += s * s;
    }
    weights_from_norms(ag.sqrt(), sg.sqrt())
}

/// Score and log-probability Hessian of a softmax policy at action `a`.
pub fn softmax_score(logits: &[f64], a: usize) -> (DVector<f64>, DMatrix<f64>) {
    let p = crate::policy::softmax(logits);
    let n = p.len();
    let score = DVector::from_fn(n, |i, _| f64::from(u8::from(i == a)) - p[i]);
    let hess = DMatrix::from_fn(n, n, |i, j| p[i] * p[j] - if i == j { p[i] } else { 0.0 });
    (score, hess)
}

/// Per-step quantities of one player in one sampled episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerTrace {
    pub scores: Vec<DVector<f64>>,
    pub hessians: Vec<DMatrix<f64>>,
    pub rewards: Vec<f64>,
}

/// Score-function estimate of the game Jacobian from sampled episodes.
/// Block `(i, j)` averages `sum_t zeta^t R^i_t S_i(t) S_j(t)^T`, with
/// `S_i(t)` the cumulated score of player `i` up to `t`; diagonal blocks add
/// the cumulated log-probability Hessian.
pub fn rl_jacobian(episodes: &[Vec<PlayerTrace>], dims: &[usize], zeta: f64) -> Result<DMatrix<f64>, GameError> {
    if episodes.is_empty() {
        return Err(GameError::Shape("no episodes".into()));
    }
    let n: usize = dims.iter().sum();
    let start = |i: usize| dims[..i].iter().sum::<usize>();
    let mut j = DMatrix::zeros(n, n);
    for ep in episodes {
        if ep.len() != dims.len() {
            return Err(GameError::Shape("episode player count mismatch".into()));
        }
        let horizon = ep[0].rewards.len();
        let mut cum: Vec<DVector<f64>> = dims.iter().map(|d| DVector::zeros(*d)).collect();
        let mut cum_h: Vec<DMatrix<f64>> = dims.iter().map(|d| DMatrix::zeros(*d, *d)).collect();
        for t in 0..horizon {
            for (i, tr) in ep.iter().enumerate() {
                if tr.scores[t].len() != dims[i] {
                    return Err(GameError::Shape("score dimension mismatch".into()));
                }
                cum[i] += &tr.scores[t];
                cum_h[i] += &tr.hessians[t];
            }
            let disc = zeta.powi(t as i32);
            for (i, tr) in ep.iter().enumerate() {
                let r = disc * tr.rewards[t];
                if r == 0.0 {
                    continue;
                }
                for (jj, sj) in cum.iter().enumerate() {
                    let mut block = &cum[i] * sj.transpose();
                    if i == jj {
                        block += &cum_h[i];
                    }
                    let mut view = j.view_mut((start(i), start(jj)), (dims[i], dims[jj]));
                    view += block * r;
                }
            }
        }
    }
    Ok(j / episodes.len() as f64)
}

/// One row of the weight trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTraceRow {
    pub iteration: usize,
    pub pair: String,
    pub omega_a: f64,
    pub omega_s: f64,
}

pub fn weight_trace_csv(rows: &[WeightTraceRow]) -> String {
    let mut out = String::from("iteration,pair,omega_a,omega_s\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.16e},{:.16e}\n", r.iteration, r.pair, r.omega_a, r.omega_s));
    }
    out
}

/// Built-in two-player scalar games with analytic Jacobians:
/// `zerosum-bilinear`, `identical-interest` and `mixed`.
pub fn named_game(name: &str) -> Option<FnGame> {
    let g = match name {
        "zerosum-bilinear" => FnGame::new(vec![1, 1], |p, t| if p == 0 { t[0] * t[1] } else { -t[0] * t[1] })
            .with_jacobian(|_| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])),
        "identical-interest" => {
            let u = |t: &[f64]| -(t[0] - 1.0).powi(2) - (t[1] + 0.5).powi(2) + 0.5 * t[0] * t[1];
            FnGame::new(vec![1, 1], move |_, t| u(t)).with_jacobian(|_| DMatrix::from_row_slice(2, 2, &[-2.0, 0.5, 0.5, -2.0]))
        }
        "mixed" => FnGame::new(vec![1, 1], |p, t| {
            if p == 0 {
                2.0 * t[0] * t[1] - t[0] * t[0]
            } else {
                -t[0] * t[1] - t[1] * t[1]
            }
        })
        .with_jacobian(|_| DMatrix::from_row_slice(2, 2, &[-2.0, 2.0, -1.0, -2.0])),
        _ => return None,
    };
    Some(g)
}

pub const NAMED_GAMES: [&str; 3] = ["zerosum-bilinear", "identical-interest", "mixed"];

/// Runs simultaneous gradient ascent from `theta0` and records the weights
/// of the full game (`pair = "all"`) and of every player pair at each
/// iterate. Iterates where a weight is undefined are skipped.
pub fn weight_trace(game: &dyn DifferentiableGame, theta0: &[f64], iterations: usize, step: f64, mode: JacobianMode) -> Result<Vec<WeightTraceRow>, GameError> {
    check_len(game, theta0)?;
    let dims = game.dims().to_vec();
    let mut theta = theta0.to_vec();
    let mut rows = Vec::new();
    for it in 0..iterations {
        let g = game_gradient(game, &theta, FdStep::default())?;
        let j = game_jacobian(game, &theta, mode)?;
        let mut push = |pair: String, w: Result<HpWeights, GameError>| -> Result<(), GameError> {
            match w {
                Ok(w) => rows.push(WeightTraceRow {
                    iteration: it,
                    pair,
                    omega_a: w.omega_a,
                    omega_s: w.omega_s,
                }),
                Err(GameError::ZeroDenominator) => {}
                Err(e) => return Err(e),
            }
            Ok(())
        };
        push("all".into(), hamiltonian_potential_weights(&j, &g))?;
        if dims.len() > 2 {
            for a in 0..dims.len() {
                for b in a + 1..dims.len() {
                    let (jr, gr) = restrict(&j, &g, &dims, &[a, b]);
                    push(format!("{a}-{b}"), hamiltonian_potential_weights(&jr, &gr))?;
                }
            }
        }
        for (t, gk) in theta.iter_mut().zip(g.iter()) {
            *t += step * gk;
        }
    }
    Ok(rows)
}
