use dealersim::game::{decompose, game_gradient, game_jacobian, hamiltonian_potential_weights, FdStep, FnGame, JacobianMode};
use dealersim::rng::substream;
use nalgebra::DMatrix;
use rand::Rng;

use crate::{Outcome, VerifyOptions};

/// Two players with two coordinates each; player 1 gains `x'My`, player 2
/// loses it.
fn zero_sum(m: DMatrix<f64>) -> FnGame {
    let mj = m.clone();
    FnGame::new(vec![2, 2], move |p, t| {
        let v = t[0] * (m[(0, 0)] * t[2] + m[(0, 1)] * t[3]) + t[1] * (m[(1, 0)] * t[2] + m[(1, 1)] * t[3]);
        if p == 0 {
            v
        } else {
            -v
        }
    })
    .with_jacobian(move |_| {
        let mut j = DMatrix::zeros(4, 4);
        j.view_mut((0, 2), (2, 2)).copy_from(&mj);
        j.view_mut((2, 0), (2, 2)).copy_from(&(-mj.transpose()));
        j
    })
}

/// Every player maximizes the same quadratic `t'Qt / 2 + c't`.
fn identical_interest(q: DMatrix<f64>, c: Vec<f64>) -> FnGame {
    let qj = q.clone();
    FnGame::new(vec![2, 2], move |_, t| {
        let mut v = 0.0;
        for i in 0..4 {
            v += c[i] * t[i];
            for j in 0..4 {
                v += 0.5 * q[(i, j)] * t[i] * t[j];
            }
        }
        v
    })
    .with_jacobian(move |_| qj.clone())
}

/// Quartic utilities, so central differences carry an `h^2` error term.
fn quartic() -> FnGame {
    FnGame::new(vec![1, 2], |p, t| match p {
        0 => t[0].powi(4) * t[1] + t[0] * t[0] * t[2] * t[2] - t[0] * t[1],
        _ => t[1].powi(3) * t[0] + t[1] * t[2].powi(3) + t[0].powi(2) * t[2] * t[2],
    })
    .with_jacobian(|t| {
        let (a, b, c) = (t[0], t[1], t[2]);
        DMatrix::from_row_slice(
            3,
            3,
            &[
                12.0 * a * a * b + 2.0 * c * c,
                4.0 * a.powi(3) - 1.0,
                4.0 * a * c,
                3.0 * b * b,
                6.0 * b * a,
                3.0 * c * c,
                4.0 * a * c,
                3.0 * c * c,
                6.0 * b * c + 2.0 * a * a,
            ],
        )
    })
}

pub fn decomposition(opts: &VerifyOptions) -> Outcome {
    let seed = opts.seed;
    let expected = "omega_A = 1 (zero-sum), 0 (identical interest); J = D+S+A; FD error O(h^2)";
    let mut rng = substream(seed, "verify-decomposition", 0);
    let mut zs_ok = true;
    let mut ii_ok = true;
    let mut recon: f64 = 0.0;
    for _ in 0..20 {
        let theta: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-2.0..2.0));
        let q = &a + a.transpose();
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (game, want, ok) in [(zero_sum(m), 1.0, &mut zs_ok), (identical_interest(q, c), 0.0, &mut ii_ok)] {
            let w = game_gradient(&game, &theta, FdStep::default())
                .and_then(|g| Ok((game_jacobian(&game, &theta, JacobianMode::Analytic)?, g)))
                .and_then(|(j, g)| hamiltonian_potential_weights(&j, &g));
            *ok &= matches!(w, Ok(w) if w.omega_a == want);
        }
        let j = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-10.0..10.0));
        match decompose(&j) {
            Ok(d) => recon = recon.max((d.reconstruct() - &j).abs().max() / j.abs().max()),
            Err(e) => return Outcome::error(expected, e),
        }
    }
    let theta = [0.7, -0.4, 0.9];
    let game = quartic();
    let ja = match game_jacobian(&game, &theta, JacobianMode::Analytic) {
        Ok(j) => j,
        Err(e) => return Outcome::error(expected, e),
    };
    let mut errs = Vec::new();
    for rel in [2e-2, 1e-2, 5e-3] {
        match game_jacobian(&game, &theta, JacobianMode::FiniteDiff(FdStep { rel })) {
            Ok(j) => errs.push((j - &ja).abs().max()),
            Err(e) => return Outcome::error(expected, e),
        }
    }
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let second_order = ratios.iter().all(|r| (3.5..4.5).contains(r));
    let recon_ok = recon <= 4.0 * f64::EPSILON;
    Outcome::new(
        format!(
            "zero-sum {zs_ok}, identical {ii_ok}, reconstruction rel err {recon:.1e}, FD ratios {:.2}/{:.2}",
            ratios[0], ratios[1]
        ),
        expected,
        zs_ok && ii_ok && recon_ok && second_order,
    )
}
