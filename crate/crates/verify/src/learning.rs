use dealersim::agents::{expected_abs_inventory_pnl, PnlLedger};
use dealersim::policy::{
    berry_esseen_bound, check_step_size, grad_estimate, noisy_ascent, pga_update, project_simplex, softmax, AgentEpisode, Baseline, BerryEsseenInput,
    NoiseModel, Parameterization, Step, TabularPolicy,
};
use dealersim::rng::{substream, SimRng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Outcome, VerifyOptions};

pub fn brownian_penalty(opts: &VerifyOptions) -> Outcome {
    let seed = opts.seed;
    let expected = "MC mean over 1e6 steps = sqrt(2/pi) sigma |q|";
    let (sigma, q) = (2e-4, 7);
    let mut rng = substream(seed, "verify-brownian", 0);
    let mut ledger = PnlLedger {
        inventory: q,
        ..Default::default()
    };
    let mut mid = 1.0;
    let n = 1_000_000;
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let next = mid + sigma * z;
        ledger.update(&[], mid, next);
        mid = next;
    }
    let mc = ledger.abs_inventory_pnl / n as f64;
    let want = expected_abs_inventory_pnl(sigma, q);
    let rel = (mc - want).abs() / want;
    Outcome::new(format!("{mc:.6e} vs {want:.6e} (rel err {rel:.4})"), expected, rel <= 0.01)
}

/// Two agents of types 0 and 1 on independent two-state chains; each
/// agent's reward also pays when both pick the same action.
struct SmallGame {
    /// Probability of moving to state 1 given `(state, action)`.
    next: [[f64; 2]; 2],
    reward: [[[f64; 2]; 2]; 2],
    coordination: f64,
    horizon: usize,
}

impl SmallGame {
    fn reward(&self, ty: usize, s: usize, a: usize, other: usize) -> f64 {
        self.reward[ty][s][a] + if a == other { self.coordination } else { 0.0 }
    }

    /// Exact expected return of agent `i` when agent `j` plays `tables[j]`.
    fn value(&self, i: usize, tables: [&TabularPolicy; 2]) -> f64 {
        let mut v = [[0.0; 2]; 2];
        for _ in 0..self.horizon {
            let mut nv = [[0.0; 2]; 2];
            for s0 in 0..2 {
                for s1 in 0..2 {
                    let s = [s0, s1];
                    let p = [tables[0].probs(s0, 0), tables[1].probs(s1, 1)];
                    let mut acc = 0.0;
                    for a0 in 0..2 {
                        for a1 in 0..2 {
                            let a = [a0, a1];
                            let w = p[0][a0] * p[1][a1];
                            let mut cont = 0.0;
                            for n0 in 0..2 {
                                for n1 in 0..2 {
                                    let t0 = if n0 == 1 { self.next[s0][a0] } else { 1.0 - self.next[s0][a0] };
                                    let t1 = if n1 == 1 { self.next[s1][a1] } else { 1.0 - self.next[s1][a1] };
                                    cont += t0 * t1 * v[n0][n1];
                                }
                            }
                            acc += w * (self.reward(i, s[i], a[i], a[1 - i]) + cont);
                        }
                    }
                    nv[s0][s1] = acc;
                }
            }
            v = nv;
        }
        v[0][0]
    }

    fn episode(&self, policy: &TabularPolicy, rng: &mut SimRng) -> Vec<AgentEpisode> {
        let mut s = [0usize; 2];
        let mut out = vec![Vec::with_capacity(self.horizon), Vec::with_capacity(self.horizon)];
        for _ in 0..self.horizon {
            let keys = [policy.sample(s[0], 0, rng), policy.sample(s[1], 1, rng)];
            for i in 0..2 {
                let r = self.reward(i, s[i], keys[i].action, keys[1 - i].action);
                out[i].push(Step { key: keys[i], reward: r });
            }
            for i in 0..2 {
                s[i] = usize::from(rng.random::<f64>() < self.next[s[i]][keys[i].action]);
            }
        }
        out
    }
}

pub fn shared_gradient(opts: &VerifyOptions) -> Outcome {
    let seed = opts.seed;
    let expected = "estimator mean = finite differences at B = 1e5; shared = agent mean on every batch";
    let game = SmallGame {
        next: [[0.2, 0.8], [0.6, 0.1]],
        reward: [[[1.0, -0.5], [-1.0, 2.0]], [[-0.8, 1.2], [1.5, 0.0]]],
        coordination: 0.7,
        horizon: 3,
    };
    let mut policy = match TabularPolicy::uniform(Parameterization::Softmax, 2, 2, 2) {
        Ok(p) => p,
        Err(e) => return Outcome::error(expected, e),
    };
    let mut rng = substream(seed, "verify-gradient", 0);
    for t in policy.theta.iter_mut() {
        *t = rng.random_range(-1.0..1.0);
    }
    // d/d theta_1 of V(theta_1, theta_2) at theta_1 = theta_2, averaged over agents
    let h = 1e-5;
    let fd: Vec<f64> = (0..policy.len())
        .map(|k| {
            let (mut up, mut down) = (policy.clone(), policy.clone());
            up.theta[k] += h;
            down.theta[k] -= h;
            let g0 = (game.value(0, [&up, &policy]) - game.value(0, [&down, &policy])) / (2.0 * h);
            let g1 = (game.value(1, [&policy, &up]) - game.value(1, [&policy, &down])) / (2.0 * h);
            0.5 * (g0 + g1)
        })
        .collect();
    let batch: Vec<Vec<AgentEpisode>> = (0..100_000).map(|_| game.episode(&policy, &mut rng)).collect();
    let est = match grad_estimate(&batch, &policy, 1.0, Baseline::AgentMeanRewardToGo) {
        Ok(e) => e,
        Err(e) => return Outcome::error(expected, e),
    };
    let diff: f64 = est.shared.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = diff / norm;
    let mut identity = mean_identity(&est.shared, &est.per_agent);
    for size in [1, 7, 64, 1000] {
        for off in [0, 5000] {
            match grad_estimate(&batch[off..off + size], &policy, 1.0, Baseline::AgentMeanRewardToGo) {
                Ok(e) => identity &= mean_identity(&e.shared, &e.per_agent),
                Err(e) => return Outcome::error(expected, e),
            }
        }
    }
    Outcome::new(
        format!("rel err {rel:.4} (|grad| = {norm:.4}); identity exact: {identity}"),
        expected,
        rel <= 0.05 && identity,
    )
}

fn mean_identity(shared: &[f64], per_agent: &[Vec<f64>]) -> bool {
    (0..shared.len()).all(|j| {
        let mut s = 0.0;
        for g in per_agent {
            s += g[j];
        }
        shared[j] == s / per_agent.len() as f64
    })
}

/// Euclidean projection onto the 2-simplex by exhaustive search on the grid
/// of spacing `1 / n`.
fn grid_projection(v: &[f64; 3], n: usize) -> [f64; 3] {
    let mut best = (f64::INFINITY, [0.0; 3]);
    let step = 1.0 / n as f64;
    for i in 0..=n {
        for j in 0..=n - i {
            let p = [i as f64 * step, j as f64 * step, (n - i - j) as f64 * step];
            let d = (p[0] - v[0]).powi(2) + (p[1] - v[1]).powi(2) + (p[2] - v[2]).powi(2);
            if d < best.0 {
                best = (d, p);
            }
        }
    }
    best.1
}

pub fn simplex_projection(opts: &VerifyOptions) -> Outcome {
    let seed = opts.seed;
    let expected = "projection = grid oracle on 100 inputs; idempotent";
    let mut rng = substream(seed, "verify-simplex", 0);
    let mut worst: f64 = 0.0;
    let mut idempotent = true;
    for _ in 0..100 {
        let v = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let p = project_simplex(&v);
        let g = grid_projection(&v, 1000);
        worst = worst.max(p.iter().zip(g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        idempotent &= project_simplex(&p) == p;
    }
    for _ in 0..1000 {
        let d = rng.random_range(1..9);
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p = project_simplex(&v);
        idempotent &= project_simplex(&p) == p;
    }
    Outcome::new(
        format!("max L-inf gap {worst:.2e}; idempotent: {idempotent}"),
        expected,
        worst <= 2e-3 && idempotent,
    )
}

/// `V(x, y) = -x'Hx/2 + x'Cy + b'x`: smooth in `x` with constant `beta`,
/// the largest eigenvalue of `H`.
struct QuadraticGame {
    h: DMatrix<f64>,
    c: DMatrix<f64>,
    b: DVector<f64>,
    beta: f64,
}

impl QuadraticGame {
    fn random(d: usize, rng: &mut SimRng) -> Self {
        let q = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
        let eig = DVector::from_fn(d, |_, _| rng.random_range(0.2..2.0));
        let h = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        let h = (&h + h.transpose()) * 0.5;
        let beta = h.clone().symmetric_eigen().eigenvalues.max();
        let c = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        QuadraticGame { h, c, b, beta }
    }

    fn value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        -0.5 * x.dot(&(&self.h * x)) + x.dot(&(&self.c * y)) + self.b.dot(x)
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.h * x) + &self.c * x + &self.b
    }
}

const PHI_MIN: f64 = -0.5;

pub fn improvement_guarantees(opts: &VerifyOptions) -> Outcome {
    let seed = opts.seed;
    let expected = "improvement bound on every one of 1e4 PGA and 1e4 noisy steps";
    let mut rng = substream(seed, "verify-improvement", 0);
    let (slices, actions) = (4, 3);
    let d = slices * actions;
    let (mut pga_ok, mut noisy_ok, mut total) = (0, 0, 0);
    let eta = 0.5;
    let noise = NoiseModel::Bounded { lo: PHI_MIN, hi: -PHI_MIN };
    for _ in 0..100 {
        let game = QuadraticGame::random(d, &mut rng);
        let alpha = 0.9 * 2.0 / game.beta;
        if let Err(e) = check_step_size(alpha, game.beta) {
            return Outcome::error(expected, e);
        }
        let mut x = DVector::from_vec((0..slices).flat_map(|_| softmax(&[rng.random(), rng.random(), rng.random()])).collect());
        let noisy_alpha = match noise.step_size(game.beta, eta) {
            Ok(a) => a,
            Err(e) => return Outcome::error(expected, e),
        };
        let mut z = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        for _ in 0..100 {
            total += 1;
            // projected ascent on the surrogate with the opponent frozen at x
            let g = game.grad(&x);
            let next = match pga_update(x.as_slice(), g.as_slice(), alpha, actions) {
                Ok(n) => DVector::from_vec(n),
                Err(e) => return Outcome::error(expected, e),
            };
            let gain = game.value(&next, &x) - game.value(&x, &x);
            let bound = (1.0 / alpha - game.beta / 2.0) * (&next - &x).norm_squared();
            if gain >= bound - 1e-12 * (1.0 + gain.abs()) {
                pga_ok += 1;
            }
            x = next;

            let g = game.grad(&z);
            let phi = noise.sample(d, &mut rng);
            let y = DVector::from_vec(noisy_ascent(z.as_slice(), g.as_slice(), noisy_alpha, &phi));
            let gain = game.value(&y, &z) - game.value(&z, &z);
            let bound = noisy_alpha * (1.0 + PHI_MIN) * eta * g.norm_squared();
            if gain >= bound - 1e-12 * (1.0 + gain.abs()) {
                noisy_ok += 1;
            }
            // the simultaneous dynamics need not converge; restart far away
            z = if y.norm() > 1e3 {
                DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))
            } else {
                y
            };
        }
    }
    let pass = pga_ok == total && noisy_ok == total;
    Outcome::new(format!("PGA {pga_ok}/{total}, noisy {noisy_ok}/{total}"), expected, pass)
}

pub fn berry_esseen(_opts: &VerifyOptions) -> Outcome {
    let expected = "increasing in K, p(1e6) > 0.99";
    let ks: Vec<f64> = (0..=50).map(|i| 10f64.powf(1.0 + 5.0 * i as f64 / 50.0)).collect();
    let mut vals = Vec::with_capacity(ks.len());
    for k in &ks {
        match berry_esseen_bound(&BerryEsseenInput::equal_coordinates(*k)) {
            Ok(v) => vals.push(v),
            Err(e) => return Outcome::error(expected, e),
        }
    }
    let increasing = vals.windows(2).all(|w| w[1] > w[0]);
    let last = *vals.last().unwrap_or(&f64::NAN);
    Outcome::new(
        format!("p(1e6) = {last:.5}; increasing over 51 K values: {increasing}"),
        expected,
        increasing && last > 0.99,
    )
}
