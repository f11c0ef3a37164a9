//! Experiment configuration: strict JSON documents tagged by `kind`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sgdlab::analysis::{Drift, RsProcessSpec, Thm51Params, DEFAULT_WINDOW};
use sgdlab::objectives::{FiniteSumLs, KlPrimeExample, Objective, Quadratic, SinSq};
use sgdlab::optimize::{default_theta0, RecordStride, SaCatalog, SaNoise};
use sgdlab::oracles::OracleSpec;
use sgdlab::rng::mix_seed;
use sgdlab::schedules::{PowerLawSchedule, Sequence};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ObjectiveSpec {
    Quadratic { matrix: Vec<Vec<f64>> },
    QuadraticDiagonal { spectrum: Vec<f64> },
    SinSq { dim: usize },
    KlPrime { dim: usize },
    FiniteSumLs { samples: usize, dim: usize, data_seed: u64 },
}

impl ObjectiveSpec {
    pub fn build(&self) -> Result<Box<dyn Objective>, CliError> {
        Ok(match self {
            ObjectiveSpec::Quadratic { matrix } => Box::new(Quadratic::new(matrix.clone())?),
            ObjectiveSpec::QuadraticDiagonal { spectrum } => Box::new(Quadratic::diagonal(spectrum)?),
            ObjectiveSpec::SinSq { dim } => Box::new(SinSq::new(*dim)?),
            ObjectiveSpec::KlPrime { dim } => Box::new(KlPrimeExample::new(*dim)?),
            ObjectiveSpec::FiniteSumLs {
                samples,
                dim,
                data_seed,
            } => Box::new(FiniteSumLs::new(*samples, *dim, *data_seed)?),
        })
    }
}

/// Either an explicit list or `count` streams derived from `base`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    List(Vec<u64>),
    Range { base: u64, count: u64 },
}

/// A seed label as written to outputs and the 64-bit generator seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    pub label: u64,
    pub rng_seed: u64,
}

impl SeedSpec {
    /// Listed seeds are used as labels and mixed with index 0; a range
    /// labels streams `0..count` and mixes each index with `base`.
    pub fn streams(&self) -> Vec<SeedStream> {
        match self {
            SeedSpec::List(v) => v
                .iter()
                .map(|&s| SeedStream {
                    label: s,
                    rng_seed: mix_seed(s, 0),
                })
                .collect(),
            SeedSpec::Range { base, count } => (0..*count)
                .map(|i| SeedStream {
                    label: i,
                    rng_seed: mix_seed(*base, i),
                })
                .collect(),
        }
    }

    pub fn with_count(&self, count: u64) -> SeedSpec {
        let base = match self {
            SeedSpec::Range { base, .. } => *base,
            SeedSpec::List(_) => 0,
        };
        SeedSpec::Range { base, count }
    }
}

/// Rate-verdict parameters. `nu` defaults to the rate predicted from the
/// step-size exponent and the oracle's declared envelopes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictConfig {
    #[serde(default)]
    pub nu: Option<f64>,
    #[serde(default = "default_slack")]
    pub slack: f64,
    pub threshold: f64,
    #[serde(default = "default_window")]
    pub window: f64,
    #[serde(default = "default_min_seeds")]
    pub min_seeds: usize,
}

fn default_slack() -> f64 {
    0.15
}

fn default_window() -> f64 {
    DEFAULT_WINDOW
}

fn default_min_seeds() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub objective: ObjectiveSpec,
    pub oracle: OracleSpec,
    pub alpha: PowerLawSchedule,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    pub horizon: u64,
    #[serde(default)]
    pub stride: RecordStride,
    pub seeds: SeedSpec,
    pub verdict: VerdictConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaProblemSpec {
    pub catalog: SaCatalog,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaConfig {
    pub problem: SaProblemSpec,
    #[serde(default)]
    pub noise: SaNoise,
    pub alpha: PowerLawSchedule,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    pub horizon: u64,
    #[serde(default)]
    pub stride: RecordStride,
    pub seeds: SeedSpec,
    pub verdict: VerdictConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsConfig {
    pub process: RsProcessSpec,
    pub horizon: u64,
    #[serde(default)]
    pub stride: RecordStride,
    pub seeds: SeedSpec,
    #[serde(default)]
    pub thm51: Thm51Params,
    /// When set, also check `t^lambda z_t -> 0`.
    #[serde(default)]
    pub lambda: Option<f64>,
}

impl PartialEq for RsConfig {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_value(self).ok() == serde_json::to_value(other).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleConfig {
    pub alpha: PowerLawSchedule,
    pub beta: Sequence,
    #[serde(default)]
    pub theta0: f64,
    pub horizon: u64,
    #[serde(default)]
    pub stride: RecordStride,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub objective: ObjectiveSpec,
    pub oracle: OracleSpec,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    #[serde(default = "default_steps")]
    pub steps: Vec<u64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub seeds: SeedSpec,
    /// Standard errors of slack allowed in envelope checks.
    #[serde(default = "default_z")]
    pub z: f64,
}

fn default_steps() -> Vec<u64> {
    vec![0]
}

fn default_samples() -> usize {
    10_000
}

fn default_z() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    Sgd(SgdConfig),
    Sa(SaConfig),
    RsProcess(RsConfig),
    Counterexample(CounterexampleConfig),
    OracleDiagnostics(DiagnosticsConfig),
}

/// Top-level document: the experiment plus run-environment keys (`out`,
/// `jobs`) that do not affect results and are excluded from the hash.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub out: Option<String>,
    pub jobs: Option<usize>,
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Sgd(_) => "sgd",
            Experiment::Sa(_) => "sa",
            Experiment::RsProcess(_) => "rs-process",
            Experiment::Counterexample(_) => "counterexample",
            Experiment::OracleDiagnostics(_) => "oracle-diagnostics",
        }
    }

    pub fn seeds_mut(&mut self) -> Option<&mut SeedSpec> {
        match self {
            Experiment::Sgd(c) => Some(&mut c.seeds),
            Experiment::Sa(c) => Some(&mut c.seeds),
            Experiment::RsProcess(c) => Some(&mut c.seeds),
            Experiment::OracleDiagnostics(c) => Some(&mut c.seeds),
            Experiment::Counterexample(_) => None,
        }
    }

    /// sha256 of the canonical JSON form (object keys sorted).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical(&value).as_bytes()))
    }
}

fn canonical(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", Value::String((*k).clone()), canonical(&map[*k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let cfg_err = |e: serde_json::Error| CliError::Config(e.to_string());
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(cfg_err)?;
    let map = value
        .as_object_mut()
        .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
    let out = match map.remove("out") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s),
        Some(other) => return Err(CliError::Config(format!("`out` must be a string, got {other}"))),
    };
    let jobs = match map.remove("jobs") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Config(format!("`jobs` must be a positive integer, got {v}")))?
                as usize,
        ),
    };
    let experiment = serde_json::from_value(value).map_err(cfg_err)?;
    Ok(ExperimentConfig { experiment, out, jobs })
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn theta0_or_default(theta0: &Option<Vec<f64>>, dim: usize) -> Vec<f64> {
    theta0.clone().unwrap_or_else(|| default_theta0(dim))
}

impl RsConfig {
    pub fn drift_name(&self) -> &'static str {
        match self.process.drift {
            Drift::Identity => "identity",
            Drift::Saturating => "saturating",
            Drift::Custom(_) => "custom",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SGD: &str = r#"{
        "kind": "sgd",
        "objective": {"kind": "sin_sq", "dim": 4},
        "oracle": {"kind": "exact_noisy", "noise": {"scale": 1.0, "exponent": 0.0, "offset": 1, "role": "std_dev_bound"}},
        "alpha": {"scale": 0.5, "exponent": 0.9, "offset": 2, "role": "step_size"},
        "horizon": 1000,
        "seeds": {"base": 1, "count": 10},
        "verdict": {"threshold": 0.01}
    }"#;

    #[test]
    fn parses_sgd_config_with_defaults() {
        let cfg = parse_config(SGD).unwrap();
        let Experiment::Sgd(sgd) = &cfg.experiment else {
            panic!("wrong kind")
        };
        assert_eq!(sgd.verdict.slack, 0.15);
        assert_eq!(sgd.stride, RecordStride::Geometric(1.05));
        assert_eq!(sgd.seeds.streams().len(), 10);
        assert_eq!(cfg.out, None);
    }

    #[test]
    fn unknown_keys_are_named() {
        let bad = SGD.replace("\"horizon\"", "\"horizn\"");
        let err = parse_config(&bad).unwrap_err().to_string();
        assert!(err.contains("horizn"), "{err}");
        let bad = SGD.replace("\"dim\": 4", "\"dim\": 4, \"extra\": 1");
        assert!(parse_config(&bad).unwrap_err().to_string().contains("extra"));
    }

    #[test]
    fn hash_ignores_out_and_jobs_and_key_order() {
        let a = parse_config(SGD).unwrap();
        let mut b = a.clone();
        b.out = Some("elsewhere".into());
        b.jobs = Some(8);
        assert_eq!(a.experiment.hash(), b.experiment.hash());
        let reordered = SGD.replace(
            "\"horizon\": 1000,\n        \"seeds\": {\"base\": 1, \"count\": 10},",
            "\"seeds\": {\"count\": 10, \"base\": 1},\n        \"horizon\": 1000,",
        );
        assert_ne!(reordered, SGD);
        assert_eq!(parse_config(&reordered).unwrap().experiment.hash(), a.experiment.hash());
        let mut c = a.clone();
        if let Experiment::Sgd(s) = &mut c.experiment {
            s.horizon = 1001;
        }
        assert_ne!(c.experiment.hash(), a.experiment.hash());
    }

    #[test]
    fn seed_streams() {
        let list = SeedSpec::List(vec![7, 9]);
        let s = list.streams();
        assert_eq!(s[0].label, 7);
        assert_eq!(s[0].rng_seed, mix_seed(7, 0));
        let range = SeedSpec::Range { base: 3, count: 2 };
        assert_eq!(range.streams()[1].rng_seed, mix_seed(3, 1));
        assert_eq!(list.with_count(4), SeedSpec::Range { base: 0, count: 4 });
    }
}
