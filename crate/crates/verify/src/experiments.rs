use dealersim::calibration::market::MarketComparison;
use dealersim::calibration::{calsheq, mean_abs_increment, tail_reward, CalibratorMode, CalibratorPolicy, CalsheqOptions, ParamBox, ToyBandit};
use dealersim::sim::experiments::{skew_experiment, spectrum_experiment, SkewExperiment, SpectrumExperiment};

use crate::{Outcome, VerifyOptions};

pub fn spectrum(_opts: &VerifyOptions) -> Outcome {
    let expected = "q_a = 0.25, q_b = 0.75, PnL(omega=1) > PnL(omega=0)";
    let start = std::time::Instant::now();
    let pts = match spectrum_experiment(&SpectrumExperiment::default()) {
        Ok((p, _)) => p,
        Err(e) => return Outcome::error(expected, e),
    };
    let secs = start.elapsed().as_secs_f64();
    let (flow, pnl) = (&pts[0], &pts[1]);
    let pass = (flow.sell_fraction - 0.25).abs() <= 0.05 && (flow.buy_fraction - 0.75).abs() <= 0.05 && pnl.pnl > flow.pnl && secs < 600.0;
    Outcome::new(
        format!(
            "q_a {:.3}, q_b {:.3}, PnL {:.3e} vs {:.3e}",
            flow.sell_fraction, flow.buy_fraction, pnl.pnl, flow.pnl
        ),
        expected,
        pass,
    )
}

pub fn skew(opts: &VerifyOptions) -> Outcome {
    let seed = opts.seed;
    let expected = "intensity(1.0) < intensity(0.25) < 0";
    let e = SkewExperiment::default();
    let mut agree = 0;
    let mut pairs = Vec::new();
    for s in seed..seed + 10 {
        let run = |c| skew_experiment(&e, c, s).map(|o| o.intensity);
        match (run(1.0), run(0.25)) {
            (Ok(Some(hi)), Ok(Some(lo))) => {
                if hi < lo && lo < 0.0 {
                    agree += 1;
                }
                pairs.push(format!("{hi:.3}/{lo:.3}"));
            }
            (Ok(_), Ok(_)) => pairs.push("undefined".into()),
            (Err(err), _) | (_, Err(err)) => return Outcome::error(expected, err),
        }
    }
    Outcome::new(format!("{agree}/10 agree"), expected, agree >= 8).with_note(format!("intensity at 1.0/0.25: {}", pairs.join(" ")))
}

pub fn calibration(opts: &VerifyOptions) -> Outcome {
    let seed = opts.seed;
    let expected = "toy r and market r reached; CALSHEQ |dL| < BO |dL|";
    let mut toy_min = f64::INFINITY;
    for mode in [CalibratorMode::Linear, CalibratorMode::Stateless] {
        let bounds = ToyBandit::bounds();
        let actions = match ParamBox::new(vec![-1.0], vec![1.0]) {
            Ok(a) => a,
            Err(e) => return Outcome::error(expected, e),
        };
        let policy = match mode {
            CalibratorMode::Linear => CalibratorPolicy::anchored(&[0.2], bounds, actions, 0.1),
            CalibratorMode::Stateless => CalibratorPolicy::stateless(&[0.2], bounds, actions, 0.1),
        };
        let mut policy = match policy {
            Ok(p) => p,
            Err(e) => return Outcome::error(expected, e),
        };
        let opts = CalsheqOptions {
            iterations: 500,
            seed,
            ..CalsheqOptions::default()
        };
        match calsheq(&mut ToyBandit::default(), &mut policy, &[0.2], &opts, |_| {}) {
            Ok(trace) => toy_min = toy_min.min(tail_reward(&trace, 10)),
            Err(e) => return Outcome::error(expected, e),
        }
    }
    let mut cmp = MarketComparison::default();
    cmp.spec.seed = seed;
    let out = match cmp.run() {
        Ok(o) => o,
        Err(e) => return Outcome::error(expected, e),
    };
    let bounds = cmp.spec.state_box();
    let market = tail_reward(&out.calsheq, 10);
    let (smooth_cal, smooth_bo) = (mean_abs_increment(&out.calsheq, &bounds), mean_abs_increment(&out.bo, &bounds));
    let pass = toy_min >= 0.95 && market >= 0.85 && smooth_cal < smooth_bo;
    Outcome::new(
        format!("toy r {toy_min:.4}; market r {market:.4}; |dL| CALSHEQ {smooth_cal:.5} vs BO {smooth_bo:.5}"),
        expected,
        pass,
    )
    .with_note("rewards are the mean over the last 10 iterations")
}
