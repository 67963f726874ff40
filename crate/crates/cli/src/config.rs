use std::fs;
use std::path::{Path, PathBuf};

use dealersim::calibration::market::MarketComparison;
use dealersim::calibration::CalibrationTargets;
use dealersim::ecn::EcnModel;
use dealersim::game::{FdStep, JacobianMode};
use dealersim::sim::experiments::SkewExperiment;
use dealersim_verify::VerifyOptions;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Fitted ECN model document; the synthetic 3-level model when absent.
    #[serde(default)]
    pub ecn_model: Option<PathBuf>,
    #[serde(default)]
    pub scenario: Scenario,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub calibration: MarketComparison,
    /// Calibration targets document, replacing `calibration.spec.targets`.
    #[serde(default)]
    pub targets: Option<PathBuf>,
    #[serde(default)]
    pub decompose: DecomposeSection,
    #[serde(default)]
    pub verify: VerifyOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Probability that the first LP is linked to each flow LT.
    pub connectivity: f64,
    pub experiment: SkewExperiment,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            connectivity: 1.0,
            experiment: SkewExperiment::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub episodes: usize,
    /// Trained LP policy document; the uniform table when absent.
    pub policy: Option<PathBuf>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection { episodes: 8, policy: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeSection {
    pub iterations: usize,
    pub step: f64,
    pub theta0: Vec<f64>,
    pub jacobian: JacobianMode,
}

impl Default for DecomposeSection {
    fn default() -> Self {
        DecomposeSection {
            iterations: 50,
            step: 0.05,
            theta0: vec![0.5, -0.5],
            jacobian: JacobianMode::FiniteDiff(FdStep::default()),
        }
    }
}

impl RunConfig {
    /// Reads the config file if given, applies the seed override and
    /// resolves referenced paths against the config's directory.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = read_file(p)?;
                serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let Value::Object(map) = &mut doc else {
            return Err(CliError::Config("config must be a JSON object".into()));
        };
        if let Some(s) = seed {
            map.insert("seed".into(), Value::from(s));
        }
        let mut config: RunConfig = serde_json::from_value(doc).map_err(|e| {
            let what = path.map_or_else(|| "command line".to_string(), |p| p.display().to_string());
            let hint = if e.to_string().contains("`seed`") {
                " (set it with --seed or in the config)"
            } else {
                ""
            };
            CliError::Config(format!("{what}: {e}{hint}"))
        })?;
        let base = path.and_then(Path::parent).unwrap_or(Path::new(""));
        for p in [&mut config.ecn_model, &mut config.simulate.policy, &mut config.targets].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.is_file() {
                return Err(CliError::MissingFile(p.clone()));
            }
        }
        Ok(config)
    }

    pub fn ecn(&self) -> Result<EcnModel, CliError> {
        let Some(p) = &self.ecn_model else { return Ok(EcnModel::synthetic(3)) };
        let model: EcnModel = read_json(p)?;
        model.validate().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        Ok(model)
    }

    pub fn calibration(&self) -> Result<MarketComparison, CliError> {
        let mut c = self.calibration.clone();
        c.spec.seed = self.seed;
        if let Some(p) = &self.targets {
            c.spec.targets = read_json::<CalibrationTargets>(p)?;
        }
        Ok(c)
    }
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    if !path.is_file() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = read_file(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.json");
        fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::load(None, None).unwrap_err();
        assert!(matches!(err, CliError::Config(ref m) if m.contains("seed")), "{err}");
        assert_eq!(RunConfig::load(None, Some(3)).unwrap().seed, 3);
    }

    #[test]
    fn flag_overrides_file_seed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_config(dir.path(), r#"{"seed": 1, "scenario": {"connectivity": 0.5}}"#);
        let c = RunConfig::load(Some(&p), Some(9)).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.scenario.connectivity, 0.5);
        assert_eq!(c.scenario.experiment, SkewExperiment::default());
    }

    #[test]
    fn unknown_fields_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_config(dir.path(), r#"{"seed": 1, "scenario": {"conectivity": 0.5}}"#);
        assert!(matches!(RunConfig::load(Some(&p), None), Err(CliError::Config(_))));
        let p = write_config(dir.path(), r#"{"seed": 1, "extra": true}"#);
        assert!(matches!(RunConfig::load(Some(&p), None), Err(CliError::Config(_))));
    }

    #[test]
    fn referenced_files_must_exist() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_config(dir.path(), r#"{"seed": 1, "ecn_model": "nope.json"}"#);
        assert!(matches!(RunConfig::load(Some(&p), None), Err(CliError::MissingFile(f)) if f == dir.path().join("nope.json")));
        assert!(matches!(
            RunConfig::load(Some(&dir.path().join("absent.json")), None),
            Err(CliError::MissingFile(_))
        ));
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::load(None, Some(5)).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
