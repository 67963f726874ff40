use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dealersim::calibration::{mean_abs_increment, tail_reward, write_trace, CalibrationEnv, MarketCalibrationEnv};
use dealersim::ecn::{fit_ecn_model, ingest_l2, read_l2_csv, EcnFitOptions};
use dealersim::game::{named_game, weight_trace, weight_trace_csv, NAMED_GAMES};
use dealersim::rng::substream;
use dealersim::sim::policy::CHECKPOINT_VERSION;
use dealersim::sim::train::{train, LtSide, TrainLogRow};
use dealersim::sim::{behavior_metrics, run_batch, TabularLp};
use dealersim_verify::{run_criteria, CriterionReport};
use serde::Serialize;

use crate::config::{read_file, read_json, RunConfig};
use crate::CliError;

pub struct Ctx {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| CliError::Io { path: p.clone(), source: e })?;
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

pub struct FitEcnArgs {
    pub input: PathBuf,
    pub m: usize,
    pub k: usize,
    pub init_k: Option<usize>,
    pub dt: f64,
    pub tick: f64,
    pub lot: f64,
}

#[derive(Serialize)]
struct FitSummary {
    input: PathBuf,
    m: usize,
    initial_components: usize,
    variation_components: usize,
    initial_dim: usize,
    variation_dim: usize,
    initial_samples: usize,
    variation_samples: usize,
    decay_rate: f64,
    report: Option<dealersim::ecn::data::FitReport>,
}

pub fn fit_ecn(ctx: &Ctx, a: &FitEcnArgs) -> Result<(), CliError> {
    if a.m == 0 || a.k == 0 {
        return Err(CliError::Config("m and k must be at least 1".into()));
    }
    let text = read_file(&a.input)?;
    let data_err = |e: dealersim::ecn::EcnError| CliError::Config(format!("{}: {e}", a.input.display()));
    let rows = read_l2_csv(text.as_bytes(), a.m).map_err(data_err)?;
    let data = ingest_l2(&rows, a.m, a.dt, a.tick, a.lot).map_err(data_err)?;
    let opts = EcnFitOptions {
        init_components: a.init_k.unwrap_or(a.k),
        variation_components: a.k,
        ..Default::default()
    };
    let mut rng = substream(ctx.config.seed, "fit-ecn", 0);
    let model = fit_ecn_model(&data, &opts, &mut rng).map_err(data_err)?;
    let summary = FitSummary {
        input: a.input.clone(),
        m: a.m,
        initial_components: opts.init_components,
        variation_components: opts.variation_components,
        initial_dim: model.initial.means[0].len(),
        variation_dim: model.variation.means[0].len(),
        initial_samples: data.initial.len(),
        variation_samples: data.variations.len(),
        decay_rate: model.shape.alpha,
        report: model.report.clone(),
    };
    ctx.write_json("ecn_model.json", &model)?;
    ctx.write_json("fit_report.json", &summary)?;
    println!(
        "fitted {}-dim variation mixture with {} components from {} snapshots",
        summary.variation_dim,
        a.k,
        rows.len()
    );
    Ok(())
}

fn load_policy(path: &Path) -> Result<TabularLp, CliError> {
    let p: TabularLp = read_json(path)?;
    if p.version != CHECKPOINT_VERSION {
        return Err(CliError::Config(format!(
            "{}: policy version {} (expected {CHECKPOINT_VERSION})",
            path.display(),
            p.version
        )));
    }
    Ok(p)
}

#[derive(Serialize)]
struct SimulateMetrics {
    seed: u64,
    episodes: usize,
    connectivity: f64,
    first_lp: dealersim::sim::BehaviorMetrics,
    mean_lp_return: Vec<f64>,
    mean_lt_return: Vec<f64>,
    clamped_actions: usize,
    skipped_trades: usize,
    failed_hedges: usize,
    trajectory_hashes: Vec<String>,
}

pub fn simulate(ctx: &Ctx, episodes: Option<usize>, policy: Option<PathBuf>) -> Result<(), CliError> {
    let c = &ctx.config;
    let e = &c.scenario.experiment;
    let mut config = e.episode_config(c.scenario.connectivity, c.seed);
    config.ecn = c.ecn()?;
    let lp = match policy.or_else(|| c.simulate.policy.clone()) {
        Some(p) => load_policy(&p)?,
        None => e.lp_table()?,
    };
    let n = episodes.unwrap_or(c.simulate.episodes);
    let trajs = run_batch(&config, &lp, &e.frozen_lts(), 0, n)?;
    for (ep, t) in trajs.iter().enumerate() {
        t.check_invariants().map_err(|b| CliError::Invariant {
            module: "episode_sim",
            id: b.id,
            detail: format!("episode {ep}: {}", b.detail),
        })?;
    }
    let path = ctx.path("trajectories.csv");
    let file = fs::File::create(&path).map_err(|err| CliError::Io {
        path: path.clone(),
        source: err,
    })?;
    let mut w = BufWriter::new(file);
    for (ep, t) in trajs.iter().enumerate() {
        let csv = t.to_csv(ep);
        let body = if ep == 0 { &csv[..] } else { csv.split_once('\n').map_or("", |(_, b)| b) };
        w.write_all(body.as_bytes()).map_err(|err| CliError::Io {
            path: path.clone(),
            source: err,
        })?;
    }
    w.flush().map_err(|err| CliError::Io {
        path: path.clone(),
        source: err,
    })?;
    let mean = |f: &dyn Fn(&dealersim::sim::Trajectory) -> Vec<f64>| -> Vec<f64> {
        let rows: Vec<Vec<f64>> = trajs.iter().map(f).collect();
        let k = rows.first().map_or(0, Vec::len);
        (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
    };
    let metrics = SimulateMetrics {
        seed: c.seed,
        episodes: n,
        connectivity: c.scenario.connectivity,
        first_lp: behavior_metrics(&trajs, 0),
        mean_lp_return: mean(&|t| (0..t.lp.len()).map(|i| t.lp_return(i)).collect()),
        mean_lt_return: mean(&|t| (0..t.lt.len()).map(|k| t.lt_return(k)).collect()),
        clamped_actions: trajs.iter().map(|t| t.clamped_actions).sum(),
        skipped_trades: trajs.iter().map(|t| t.skipped_trades).sum(),
        failed_hedges: trajs.iter().map(|t| t.failed_hedges).sum(),
        trajectory_hashes: trajs.iter().map(|t| t.hash()).collect(),
    };
    ctx.write_json("metrics.json", &metrics)?;
    println!("simulated {n} episodes; invariants hold");
    Ok(())
}

pub fn train_cmd(ctx: &Ctx, episodes: Option<usize>) -> Result<(), CliError> {
    let c = &ctx.config;
    let e = &c.scenario.experiment;
    let mut config = e.episode_config(c.scenario.connectivity, c.seed);
    config.ecn = c.ecn()?;
    let mut opts = e.train_options();
    if opts.batch == 0 {
        return Err(CliError::Config("scenario.experiment.batch must be positive".into()));
    }
    if let Some(n) = episodes {
        opts.iterations = n.div_ceil(opts.batch);
    }
    let mut lp = e.lp_table()?;
    let lt = e.frozen_lts();
    let path = ctx.path("train_trace.csv");
    let file = fs::File::create(&path).map_err(|err| CliError::Io {
        path: path.clone(),
        source: err,
    })?;
    let mut w = BufWriter::new(file);
    let mut io_err = None;
    writeln!(w, "{}", TrainLogRow::csv_header(config.profile.lp.len(), config.profile.lt.len())).map_err(|err| CliError::Io {
        path: path.clone(),
        source: err,
    })?;
    let log = train(&config, &mut lp, LtSide::Frozen(&lt), &opts, |row| {
        if io_err.is_none() {
            io_err = writeln!(w, "{}", row.csv_row()).err();
        }
    })?;
    if let Some(err) = io_err {
        return Err(CliError::Io { path, source: err });
    }
    w.flush().map_err(|err| CliError::Io {
        path: path.clone(),
        source: err,
    })?;
    ctx.write_json("policy.json", &lp)?;
    let last = log.last().map_or(0.0, |r| r.lp_return_by_supertype[0]);
    println!("trained {} iterations x {} episodes; final LP return {last:.6}", opts.iterations, opts.batch);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Calsheq,
    Bo,
}

#[derive(Serialize)]
struct CalibrationSummary {
    method: &'static str,
    iterations: usize,
    tail_reward: f64,
    mean_abs_increment: f64,
    final_lambda: Vec<f64>,
}

pub fn calibrate(ctx: &Ctx, method: Method, targets: Option<PathBuf>) -> Result<(), CliError> {
    let mut cmp = ctx.config.calibration()?;
    if let Some(p) = targets {
        cmp.spec.targets = read_json(&p)?;
    }
    cmp.spec.validate()?;
    let env = MarketCalibrationEnv::new(cmp.spec.clone())?;
    let (dim, names) = (env.dim(), env.target_names());
    let (name, trace) = match method {
        Method::Calsheq => {
            let (trace, policy) = cmp.run_calsheq(|_| {})?;
            ctx.write_json("calibrator.json", &policy)?;
            ("calsheq", trace)
        }
        Method::Bo => {
            let (trace, history) = cmp.run_bo(|_| {})?;
            ctx.write_json("bo_history.json", &history)?;
            ("bo", trace)
        }
    };
    let mut buf = Vec::new();
    write_trace(&mut buf, dim, &names, &trace).expect("in-memory write");
    ctx.write(&format!("{name}_trace.csv"), &buf)?;
    let summary = CalibrationSummary {
        method: name,
        iterations: trace.len(),
        tail_reward: tail_reward(&trace, 10),
        mean_abs_increment: mean_abs_increment(&trace, &cmp.spec.state_box()),
        final_lambda: trace.last().map(|r| r.lambda_mean.clone()).unwrap_or_default(),
    };
    ctx.write_json(&format!("{name}_summary.json"), &summary)?;
    println!(
        "{name}: {} iterations, reward over the last 10 = {:.4}",
        summary.iterations, summary.tail_reward
    );
    Ok(())
}

pub fn decompose(ctx: &Ctx, game: &str) -> Result<(), CliError> {
    let g = named_game(game).ok_or_else(|| CliError::Config(format!("unknown game {game:?}; expected one of {}", NAMED_GAMES.join(", "))))?;
    let d = &ctx.config.decompose;
    let rows = weight_trace(&g, &d.theta0, d.iterations, d.step, d.jacobian).map_err(|e| CliError::Config(format!("decompose: {e}")))?;
    ctx.write("weight_trace.csv", weight_trace_csv(&rows).as_bytes())?;
    if let Some(r) = rows.iter().find(|r| r.pair == "all") {
        println!("{game}: omega_A = {}, omega_S = {} at iteration {}", r.omega_a, r.omega_s, r.iteration);
    }
    Ok(())
}

pub fn verify(ctx: &Ctx, only: Option<Vec<u32>>) -> Result<(), CliError> {
    let mut opts = ctx.config.verify.clone();
    opts.seed = ctx.config.seed;
    if only.is_some() {
        opts.only = only;
    }
    if let Some(ids) = &opts.only {
        if let Some(bad) = ids.iter().find(|id| dealersim_verify::criterion_name(**id).is_none()) {
            return Err(CliError::Config(format!("unknown criterion {bad}")));
        }
    }
    let reports: Vec<CriterionReport> = run_criteria(&opts, |r| println!("{}", r.line()));
    ctx.write_json("verify_report.json", &reports)?;
    let failed: Vec<u32> = reports.iter().filter(|r| !r.pass).map(|r| r.id).collect();
    println!("{}/{} criteria passed", reports.len() - failed.len(), reports.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CriteriaFailed(failed))
    }
}
