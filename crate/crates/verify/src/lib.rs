//! Acceptance checks. Each criterion runs a measurement against an
//! independent oracle and reports the measured value next to its threshold.

mod ecn;
mod experiments;
mod games;
mod learning;

use std::time::Instant;

use dealersim::ecn::LevelParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub id: u32,
    pub name: String,
    pub measured: String,
    pub expected: String,
    pub tolerance: String,
    pub pass: bool,
    pub runtime_s: f64,
    pub note: String,
}

impl CriterionReport {
    /// One line: `[PASS] 07 simplex projection: measured ... (expected ...)`.
    pub fn line(&self) -> String {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        let mut s = format!(
            "[{tag}] {:02} {}: {} (expected {}, tolerance {}) [{:.1}s]",
            self.id, self.name, self.measured, self.expected, self.tolerance, self.runtime_s
        );
        if !self.note.is_empty() {
            s.push_str(" -- ");
            s.push_str(&self.note);
        }
        s
    }
}

/// Outcome of one check before timing is attached.
pub(crate) struct Outcome {
    pub measured: String,
    pub expected: String,
    pub pass: bool,
    pub note: String,
}

impl Outcome {
    pub(crate) fn new(measured: String, expected: impl Into<String>, pass: bool) -> Self {
        Outcome {
            measured,
            expected: expected.into(),
            pass,
            note: String::new(),
        }
    }

    pub(crate) fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    pub(crate) fn error(expected: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Outcome {
            measured: "error".into(),
            expected: expected.into(),
            pass: false,
            note: err.to_string(),
        }
    }
}

type Check = fn(&VerifyOptions) -> Outcome;

const CRITERIA: [(u32, &str, &str, Check); 14] = [
    (1, "volume dynamics stationary moments", "3 standard errors; < 30 s", ecn::stationary_moments),
    (2, "multiplicative volatility limit", "5% relative", ecn::multiplicative_limit),
    (3, "regime boundaries", "1e-9 absolute", ecn::regime_boundaries),
    (4, "meta-order round trip", "bit-exact; < 5 s", ecn::meta_order_round_trip),
    (5, "brownian inventory penalty", "1% relative", learning::brownian_penalty),
    (6, "shared gradient estimator", "5% relative; identity bit-exact", learning::shared_gradient),
    (7, "simplex projection", "2e-3 L-inf; idempotence bit-exact", learning::simplex_projection),
    (8, "improvement guarantees", "100% of steps", learning::improvement_guarantees),
    (
        9,
        "game decomposition",
        "omega exact; reconstruction 4 ulp; FD ratio in [3.5, 4.5]",
        games::decomposition,
    ),
    (10, "LT behavioral spectrum", "0.05 absolute; < 600 s", experiments::spectrum),
    (11, "skew emergence", ">= 8/10 seeds", experiments::skew),
    (12, "calibration", "toy r >= 0.95 in 500 iterations; market r >= 0.85", experiments::calibration),
    (13, "EM fitting", "5% relative; monotone to 1e-9", ecn::em),
    (14, "Berry-Esseen bound", "strict increase; > 0.99", learning::berry_esseen),
];

pub fn criterion_ids() -> Vec<u32> {
    CRITERIA.iter().map(|c| c.0).collect()
}

pub fn criterion_name(id: u32) -> Option<&'static str> {
    CRITERIA.iter().find(|c| c.0 == id).map(|c| c.1)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    /// Criteria to run; all when `None`.
    pub only: Option<Vec<u32>>,
    pub seed: u64,
    /// Level parameter sets for the stationary-moment check; random when `None`.
    pub level_params: Option<Vec<LevelParams>>,
}

/// Runs the selected criteria in id order, calling `on_report` after each.
pub fn run_criteria(opts: &VerifyOptions, mut on_report: impl FnMut(&CriterionReport)) -> Vec<CriterionReport> {
    let mut out = Vec::new();
    for (id, name, tolerance, check) in CRITERIA {
        if opts.only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let o = check(opts);
        let r = CriterionReport {
            id,
            name: name.to_string(),
            measured: o.measured,
            expected: o.expected,
            tolerance: tolerance.to_string(),
            pass: o.pass,
            runtime_s: start.elapsed().as_secs_f64(),
            note: o.note,
        };
        on_report(&r);
        out.push(r);
    }
    out
}

/// Runs a single criterion.
pub fn run_criterion(id: u32, seed: u64) -> Option<CriterionReport> {
    criterion_name(id)?;
    run_criteria(
        &VerifyOptions {
            only: Some(vec![id]),
            seed,
            ..Default::default()
        },
        |_| {},
    )
    .pop()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_sequential() {
        assert_eq!(criterion_ids(), (1..=14).collect::<Vec<_>>());
        assert_eq!(criterion_name(7), Some("simplex projection"));
        assert!(run_criterion(99, 0).is_none());
    }

    #[test]
    fn report_line_format() {
        let r = CriterionReport {
            id: 3,
            name: "x".into(),
            measured: "1".into(),
            expected: "2".into(),
            tolerance: "1%".into(),
            pass: false,
            runtime_s: 0.5,
            note: String::new(),
        };
        assert_eq!(r.line(), "[FAIL] 03 x: 1 (expected 2, tolerance 1%) [0.5s]");
    }
}
