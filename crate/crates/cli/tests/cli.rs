use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dealersim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dealersim"))
        .args(args)
        .env_remove("DEALERSIM_SEED")
        .env_remove("DEALERSIM_CONFIG")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn out_dir(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn train_is_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (out_dir(dir.path(), "a"), out_dir(dir.path(), "b"));
    for out in [&a, &b] {
        let o = dealersim(&["train", "--episodes", "2000", "--seed", "7", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let ta = fs::read(Path::new(&a).join("train_trace.csv")).unwrap();
    let tb = fs::read(Path::new(&b).join("train_trace.csv")).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(String::from_utf8(ta).unwrap().lines().count(), 1 + 125);
    assert_eq!(
        fs::read(Path::new(&a).join("policy.json")).unwrap(),
        fs::read(Path::new(&b).join("policy.json")).unwrap()
    );
}

#[test]
fn zero_sum_game_is_purely_hamiltonian() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(dir.path(), "d");
    let o = dealersim(&["decompose", "--game", "zerosum-bilinear", "--seed", "0", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(Path::new(&out).join("weight_trace.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    assert_eq!(cols[1], "all");
    assert_eq!(cols[2].parse::<f64>().unwrap(), 1.0);
    assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn unknown_game_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dealersim(&["decompose", "--game", "chess", "--seed", "0", "--out", &out_dir(dir.path(), "d")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_files_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(dir.path(), "o");
    let o = dealersim(&["fit-ecn", "--input", "/nonexistent/l2.csv", "--seed", "1", "--out", &out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/l2.csv"));
    let o = dealersim(&["--config", "/nonexistent/run.json", "simulate", "--out", &out]);
    assert_eq!(code(&o), 2);
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"seed": 1, "ecn_model": "missing_model.json"}"#).unwrap();
    let o = dealersim(&["--config", cfg.to_str().unwrap(), "simulate", "--out", &out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing_model.json"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(dir.path(), "o");
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"seed": 1, "scenario": {"horizn": 10}}"#).unwrap();
    let o = dealersim(&["--config", cfg.to_str().unwrap(), "simulate", "--out", &out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("horizn"));
    let o = dealersim(&["simulate", "--out", &out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("seed"));
    let o = dealersim(&["simulate", "--seed", "x", "--out", &out]);
    assert_eq!(code(&o), 2);
}

#[test]
fn env_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(dir.path(), "o");
    let o = Command::new(env!("CARGO_BIN_EXE_dealersim"))
        .args(["simulate", "--episodes", "2"])
        .env("DEALERSIM_SEED", "11")
        .env("DEALERSIM_OUT", &out)
        .env("DEALERSIM_WORKERS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics: Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seed"], 11);
}

#[test]
fn simulate_writes_trajectories_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(dir.path(), "s");
    let o = dealersim(&["simulate", "--episodes", "3", "--seed", "5", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(Path::new(&out).join("trajectories.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("episode,")).count(), 1);
    let episodes: std::collections::BTreeSet<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(episodes.into_iter().collect::<Vec<_>>(), ["0", "1", "2"]);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["trajectory_hashes"].as_array().unwrap().len(), 3);
}

#[test]
fn trained_policy_feeds_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(dir.path(), "t");
    let o = dealersim(&["train", "--episodes", "32", "--seed", "2", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let policy = Path::new(&out).join("policy.json");
    let o = dealersim(&[
        "simulate",
        "--episodes",
        "2",
        "--seed",
        "2",
        "--policy",
        policy.to_str().unwrap(),
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn verify_writes_a_machine_readable_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(dir.path(), "v");
    let o = dealersim(&["verify", "--only", "7,14", "--seed", "0", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("verify_report.json")).unwrap()).unwrap();
    let rows = report.as_array().unwrap();
    assert_eq!(rows.iter().map(|r| r["id"].as_u64().unwrap()).collect::<Vec<_>>(), [7, 14]);
    for r in rows {
        for key in ["measured", "expected", "tolerance", "pass", "runtime_s"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
        assert_eq!(r["pass"], true);
    }
}

#[test]
fn verify_reports_zero_mean_reversion_as_an_error_entry() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(dir.path(), "v");
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"seed": 0, "verify": {"level_params": [{"mu_plus": 5.0, "mu_minus": 0.0, "sigma_plus": 1.0, "sigma_minus": 0.1, "rho": 0.0}]}}"#,
    )
    .unwrap();
    let o = dealersim(&["--config", cfg.to_str().unwrap(), "verify", "--only", "1", "--out", &out]);
    assert_eq!(code(&o), 1);
    let report: Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("verify_report.json")).unwrap()).unwrap();
    assert_eq!(report[0]["pass"], false);
    assert_eq!(report[0]["measured"], "error");
    assert!(report[0]["note"].as_str().unwrap().contains("mean removal rate"));
}

fn l2_csv(m: usize, rows: usize) -> String {
    let tick = 1e-5;
    let mut s = String::from("time");
    for side in ["ask_px", "ask_sz", "bid_px", "bid_sz"] {
        for i in 1..=m {
            s.push_str(&format!(",{side}_{i}"));
        }
    }
    s.push('\n');
    let mut state: u64 = 12345;
    let mut next = move |n: u64| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) % n
    };
    let mut mid: i64 = 100_000;
    let mut ask: Vec<i64> = (0..m as i64).map(|i| 10 + 3 * i).collect();
    let mut bid: Vec<i64> = (0..m as i64).map(|i| 12 + 2 * i).collect();
    for t in 0..rows {
        mid += next(3) as i64 - 1;
        let spread = 1 + next(2) as i64;
        for v in ask.iter_mut().chain(bid.iter_mut()) {
            *v = (*v + next(7) as i64 - 3).max(1);
        }
        s.push_str(&t.to_string());
        for i in 0..m as i64 {
            s.push_str(&format!(",{:.5}", (mid + spread + i) as f64 * tick));
        }
        for v in &ask {
            s.push_str(&format!(",{v}"));
        }
        for i in 0..m as i64 {
            s.push_str(&format!(",{:.5}", (mid - i) as f64 * tick));
        }
        for v in &bid {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

#[test]
fn fit_ecn_produces_twelve_dim_variation_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("l2.csv");
    fs::write(&input, l2_csv(5, 400)).unwrap();
    for k in ["5", "1"] {
        let out = out_dir(dir.path(), &format!("fit{k}"));
        let o = dealersim(&[
            "fit-ecn",
            "--input",
            input.to_str().unwrap(),
            "--m",
            "5",
            "--k",
            k,
            "--seed",
            "3",
            "--out",
            &out,
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let report: Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("fit_report.json")).unwrap()).unwrap();
        assert_eq!(report["variation_dim"], 12);
        assert_eq!(report["variation_components"], k.parse::<u64>().unwrap());
        let model: Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("ecn_model.json")).unwrap()).unwrap();
        assert_eq!(model["variation"]["weights"].as_array().unwrap().len(), k.parse::<usize>().unwrap());
        let cfg = dir.path().join(format!("run{k}.json"));
        fs::write(&cfg, format!(r#"{{"seed": 1, "ecn_model": {:?}}}"#, Path::new(&out).join("ecn_model.json"))).unwrap();
        let o = dealersim(&["--config", cfg.to_str().unwrap(), "simulate", "--episodes", "1", "--out", &out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
}

#[test]
fn fit_ecn_rejects_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("l2.csv");
    fs::write(&input, "time,ask_px_1,ask_sz_1,bid_px_1,bid_sz_1\n0,1.1,5,1.2,5\n").unwrap();
    let o = dealersim(&[
        "fit-ecn",
        "--input",
        input.to_str().unwrap(),
        "--m",
        "1",
        "--k",
        "1",
        "--seed",
        "3",
        "--out",
        &out_dir(dir.path(), "f"),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("row 2"), "{}", stderr(&o));
}

#[test]
fn calibration_methods_write_paired_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(dir.path(), "c");
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"seed": 4, "calibration": {"iterations": 12, "batch": 8, "bo_period": 6}}"#).unwrap();
    for method in ["calsheq", "bo"] {
        let o = dealersim(&["--config", cfg.to_str().unwrap(), "calibrate", "--method", method, "--out", &out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = fs::read_to_string(Path::new(&out).join("calsheq_trace.csv")).unwrap();
    let b = fs::read_to_string(Path::new(&out).join("bo_trace.csv")).unwrap();
    assert_eq!(a.lines().next(), b.lines().next());
    assert_eq!(a.lines().count(), 13);
    assert_eq!(b.lines().count(), 13);
}
