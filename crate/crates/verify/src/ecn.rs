use std::time::Instant;

use dealersim::ecn::{
    apply_orders, apply_split, build_orders, em_fit, initial_book, target_volumes, variance_polynomial, BookShape, EmInit, EmOptions, GaussianMixture,
    GaussianMixtureParams, IncrementSampler, LevelParams, OrderSizeDist, SnapshotVariation,
};
use dealersim::lob::{AgentId, PriceGrid, Side};
use dealersim::rng::{substream, SimRng};
use nalgebra::DMatrix;
use rand::Rng;

use crate::{Outcome, VerifyOptions};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Parameters whose bounded-uniform increments stay inside the valid support.
fn random_level(rng: &mut SimRng) -> LevelParams {
    let mu_minus = rng.random_range(0.2..0.8);
    let sigma_minus = rng.random_range(0.3..0.9) * f64::min(mu_minus, 1.0 - mu_minus) / SQRT3;
    let rho: f64 = rng.random_range(-0.8..0.8);
    let mu_plus = rng.random_range(0.5..5.0);
    let sigma_plus = rng.random_range(0.2..0.9) * mu_plus / (SQRT3 * (rho.abs() + (1.0 - rho * rho).sqrt()));
    LevelParams {
        mu_plus,
        mu_minus,
        sigma_plus,
        sigma_minus,
        rho,
    }
}

/// Mean and standard error from non-overlapping batch means.
fn batch_mean_se(x: &[f64], batches: usize) -> (f64, f64) {
    let len = x.len() / batches;
    let means: Vec<f64> = x.chunks(len).take(batches).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (m, (var / batches as f64).sqrt())
}

pub fn stationary_moments(opts: &VerifyOptions) -> Outcome {
    let seed = opts.seed;
    let expected = "MC mean and variance match the stationary formulas on 5 sets";
    let start = Instant::now();
    let mut rng = substream(seed, "verify-moments", 0);
    let mut worst: f64 = 0.0;
    let sets: Vec<LevelParams> = match &opts.level_params {
        Some(v) => v.clone(),
        None => (0..5).map(|_| random_level(&mut rng)).collect(),
    };
    for (set, p) in sets.iter().enumerate() {
        let sampler = match IncrementSampler::single(p) {
            Ok(s) => s,
            Err(e) => return Outcome::error(expected, e),
        };
        let (mean, var) = match p.discrete_variance() {
            Ok(v) => (p.mean_volume(), v),
            Err(e) => return Outcome::error(expected, e),
        };
        let mut path_rng = substream(seed, "verify-moments-path", set as u64);
        let mut v = mean;
        let mut xs = Vec::with_capacity(100_000);
        for t in 0..101_000 {
            let (plus, minus) = sampler.sample(&mut path_rng)[0];
            v = apply_split(v, plus, minus);
            if t >= 1000 {
                xs.push(v);
            }
        }
        let (m, se_m) = batch_mean_se(&xs, 100);
        let sq: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
        let (s2, se_s2) = batch_mean_se(&sq, 100);
        worst = worst.max(((m - mean) / se_m).abs()).max(((s2 - var) / se_s2).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(format!("max |z| = {worst:.2}, {secs:.1} s"), expected, worst <= 3.0 && secs < 30.0)
}

pub fn multiplicative_limit(opts: &VerifyOptions) -> Outcome {
    let seed = opts.seed;
    let expected = "slope = sigma-^2";
    let p = LevelParams {
        mu_plus: 2.0,
        mu_minus: 0.5,
        sigma_plus: 0.0,
        sigma_minus: 0.15,
        rho: 0.0,
    };
    let sampler = match IncrementSampler::single(&p) {
        Ok(s) => s,
        Err(e) => return Outcome::error(expected, e),
    };
    let mut rng = substream(seed, "verify-multiplicative", 0);
    let draws = 5000;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for k in 1..=40 {
        let v = k as f64;
        let inc: Vec<f64> = (0..draws)
            .map(|_| {
                let (plus, minus) = sampler.sample(&mut rng)[0];
                apply_split(v, plus, minus) - v
            })
            .collect();
        let m = inc.iter().sum::<f64>() / draws as f64;
        xs.push(v * v);
        ys.push(inc.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws - 1) as f64);
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let want = p.sigma_minus * p.sigma_minus;
    let rel = (slope - want).abs() / want;
    Outcome::new(format!("slope {slope:.5} vs {want:.5} (rel err {rel:.4})"), expected, rel <= 0.05)
}

/// Sign changes of `f` on a uniform grid, refined by bisection.
fn sign_changes(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let pos = |x: f64| f(x) >= 0.0;
    let mut roots = Vec::new();
    let h = (hi - lo) / n as f64;
    for i in 0..n {
        let (mut a, mut b) = (lo + i as f64 * h, lo + (i + 1) as f64 * h);
        if pos(a) == pos(b) {
            continue;
        }
        let sa = pos(a);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if pos(m) == sa {
                a = m;
            } else {
                b = m;
            }
        }
        roots.push(0.5 * (a + b));
    }
    roots
}

pub fn regime_boundaries(opts: &VerifyOptions) -> Outcome {
    let seed = opts.seed;
    let expected = "boundaries at the sign changes on 20 cases; boolean agrees on 20 cases";
    let mut rng = substream(seed, "verify-regimes", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = LevelParams {
            mu_plus: rng.random_range(0.5..5.0),
            mu_minus: rng.random_range(0.1..0.9),
            sigma_plus: rng.random_range(0.0..1.0),
            sigma_minus: rng.random_range(0.01..0.3),
            rho: rng.random_range(-1.0..1.0),
        };
        let q = match variance_polynomial(&p) {
            Ok(q) => q,
            Err(e) => return Outcome::error(expected, e),
        };
        let Some((lo, hi)) = q.boundaries else {
            return Outcome::new("missing boundaries".into(), expected, false);
        };
        let reach = (hi - lo) + q.mean_volume.abs() + 1.0;
        let roots = sign_changes(|v| q.impact_at_volume(v), lo - reach, hi + reach, 10_007);
        if roots.len() != 2 {
            return Outcome::new(format!("{} sign changes for {p:?}", roots.len()), expected, false);
        }
        worst = worst.max((roots[0] - lo).abs()).max((roots[1] - hi).abs());
    }
    let mut agree = 0;
    for case in 0..20 {
        let (sp, sm, mm) = (rng.random_range(0.05..1.0), rng.random_range(0.01..0.3), rng.random_range(0.1..0.9));
        let rho: f64 = rng.random_range(0.05..1.0);
        let mp = if case % 2 == 0 { sp * mm * rho / sm } else { rng.random_range(0.5..5.0) };
        let p = LevelParams {
            mu_plus: mp,
            mu_minus: mm,
            sigma_plus: sp,
            sigma_minus: sm,
            rho,
        };
        let Ok(q) = variance_polynomial(&p) else { continue };
        // never self-inhibiting iff the impact never dips below zero
        let vertex = q.mean_volume - q.linear / (2.0 * q.quadratic);
        let floor = q.impact_at_volume(vertex);
        let oracle = floor >= -1e-12 * (q.quadratic * q.mean_volume * q.mean_volume + 1.0);
        let condition = (sp * mm * rho - sm * mp).abs() <= 1e-9 * (sp * mm * rho).abs().max((sm * mp).abs());
        if q.never_self_inhibiting == oracle && oracle == condition {
            agree += 1;
        }
    }
    Outcome::new(
        format!("max boundary error {worst:.2e}, boolean agrees {agree}/20"),
        expected,
        worst <= 1e-9 && agree == 20,
    )
}

pub fn meta_order_round_trip(opts: &VerifyOptions) -> Outcome {
    let seed = opts.seed;
    let expected = "1000/1000 round trips reproduce the targets";
    let start = Instant::now();
    let grid = match PriceGrid::new(1.0, 1.02, 0.00005) {
        Ok(g) => g,
        Err(e) => return Outcome::error(expected, e),
    };
    let shape = BookShape { m: 5, depth: 10, alpha: 0.5 };
    let raw0 = [3.0, 3.2, 3.1, 2.9, 2.5, 3.0, 3.3, 3.0, 2.8, 2.6, 1.0];
    let ecn = AgentId(0);
    let mut book = match initial_book(grid, 1.01, &raw0, &shape, ecn) {
        Ok(b) => b,
        Err(e) => return Outcome::error(expected, e),
    };
    let mut rng = substream(seed, "verify-meta", 0);
    let dist = OrderSizeDist::default();
    let mut exact = 0;
    for _ in 0..1000 {
        let mut raw: Vec<f64> = (0..10).map(|_| rng.random_range(-1.5..6.0)).collect();
        raw.push(rng.random_range(0.0..4.0));
        raw.push(rng.random_range(-3.0..3.0));
        let mut step = || -> Result<bool, String> {
            let v = SnapshotVariation::from_raw(&raw, 5).map_err(|e| e.to_string())?;
            let (bid, ask) = (book.best_tick(Side::Bid).ok_or("empty bid")?, book.best_tick(Side::Ask).ok_or("empty ask")?);
            let (ta, tb) = target_volumes(&book, &v, &shape, (bid + ask) as i64).map_err(|e| e.to_string())?;
            let da: Vec<i64> = ta.iter().zip(book.volumes(Side::Ask)).map(|(t, c)| *t as i64 - *c as i64).collect();
            let db: Vec<i64> = tb.iter().zip(book.volumes(Side::Bid)).map(|(t, c)| *t as i64 - *c as i64).collect();
            let orders = build_orders(&book, &da, &db, &dist, &mut rng).map_err(|e| e.to_string())?;
            apply_orders(&mut book, &orders, ecn).map_err(|e| e.to_string())?;
            book.check_invariants()?;
            Ok(book.volumes(Side::Ask) == &ta[..] && book.volumes(Side::Bid) == &tb[..])
        };
        match step() {
            Ok(true) => exact += 1,
            Ok(false) => {}
            Err(e) => return Outcome::error(expected, e),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(format!("{exact}/1000 bit-exact, {secs:.2} s"), expected, exact == 1000 && secs < 5.0)
}

fn random_correlated_cov(rng: &mut SimRng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.4..0.4));
    let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(d, |_, _| rng.random_range(0.3..1.5)));
    &a * a.transpose() + diag
}

fn monotone(objective: &[f64]) -> bool {
    objective.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0))
}

pub fn em(opts: &VerifyOptions) -> Outcome {
    let seed = opts.seed;
    let expected = "monotone objective on every fit; 2-component 12-dim mixture recovered";
    let mut rng = substream(seed, "verify-em", 0);
    let d = 12;
    let means = vec![
        (0..d).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>(),
        (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
    ];
    let covs = [random_correlated_cov(&mut rng, d), random_correlated_cov(&mut rng, d)];
    let truth = GaussianMixtureParams::from_covariances(vec![0.35, 0.65], means, &covs);
    let mix = match GaussianMixture::new(truth.clone()) {
        Ok(m) => m,
        Err(e) => return Outcome::error(expected, e),
    };
    let data: Vec<Vec<f64>> = (0..20_000).map(|_| mix.sample(&mut rng)).collect();
    let mut all_monotone = true;
    let mut fits = 0;
    let mut recovery = f64::INFINITY;
    for (k, init) in [
        (2, EmInit::KMeansPlusPlus),
        (2, EmInit::RandomResponsibilities),
        (3, EmInit::KMeansPlusPlus),
        (1, EmInit::KMeansPlusPlus),
    ] {
        let mut fit_rng = substream(seed, "verify-em-fit", fits);
        let fit = match em_fit(&data, k, &EmOptions { init, ..EmOptions::default() }, &mut fit_rng) {
            Ok(f) => f,
            Err(e) => return Outcome::error(expected, e),
        };
        fits += 1;
        all_monotone &= monotone(&fit.objective);
        if k == 2 && init == EmInit::KMeansPlusPlus {
            recovery = recovery_error(&truth, &fit.params);
        }
    }
    Outcome::new(
        format!("{fits} fits monotone: {all_monotone}; max relative error {recovery:.4}"),
        expected,
        all_monotone && recovery <= 0.05,
    )
    .with_note("monotonicity is checked on the penalized objective that EM maximizes")
}

/// Largest error over weights, means and variances, relative to
/// `max(|truth|, 1)`, under the better label permutation.
fn recovery_error(truth: &GaussianMixtureParams, fit: &GaussianMixtureParams) -> f64 {
    let err = |perm: [usize; 2]| {
        let mut worst: f64 = 0.0;
        for (t, f) in perm.iter().enumerate() {
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
            worst = worst.max(rel(fit.weights[*f], truth.weights[t]));
            for j in 0..truth.means[t].len() {
                worst = worst.max(rel(fit.means[*f][j], truth.means[t][j]));
                worst = worst.max(rel(fit.variances[*f][j], truth.variances[t][j]));
            }
        }
        worst
    };
    err([0, 1]).min(err([1, 0]))
}
