//! The four CLI verbs, independent of argument parsing.

use std::path::{Path, PathBuf};

use sgdlab::analysis::Outcome;

use crate::config::{load_config, DiagnosticsConfig, Experiment, ExperimentConfig};
use crate::experiment::{execute, ExecOptions};
use crate::output::Artifacts;
use crate::sweep::{parse_values, run_sweep, Axis, Param};
use crate::CliError;

/// Command-line flags shared by every verb.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seeds: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub no_plot: bool,
}

/// What a verb produced: the outcome, where it wrote, and a printable
/// summary.
#[derive(Clone, Debug)]
pub struct Report {
    pub outcome: Outcome,
    pub out_dir: PathBuf,
    pub summary: Vec<String>,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        self.outcome.exit_code()
    }
}

struct Prepared {
    experiment: Experiment,
    out_dir: PathBuf,
    opts: ExecOptions,
}

fn prepare(cfg: ExperimentConfig, ov: &Overrides) -> Result<Prepared, CliError> {
    let mut experiment = cfg.experiment;
    if let Some(n) = ov.seeds {
        if n == 0 {
            return Err(CliError::Usage("--seeds must be positive".into()));
        }
        let kind = experiment.kind();
        let seeds = experiment
            .seeds_mut()
            .ok_or_else(|| CliError::Usage(format!("--seeds does not apply to a {kind} experiment")))?;
        *seeds = seeds.with_count(n);
    }
    if ov.jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be positive".into()));
    }
    let out_dir = ov
        .out
        .clone()
        .or_else(|| cfg.out.map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Prepared {
        experiment,
        out_dir,
        opts: ExecOptions {
            jobs: ov.jobs.or(cfg.jobs),
            plot: !ov.no_plot,
            run_despite_gate: false,
        },
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn finish(outcome: Outcome, out_dir: PathBuf, art: &Artifacts, mut summary: Vec<String>) -> Result<Report, CliError> {
    art.write_all(&out_dir)?;
    summary.push(format!("artifacts: {}", out_dir.display()));
    summary.push(format!("outcome: {outcome} (exit {})", outcome.exit_code()));
    Ok(Report {
        outcome,
        out_dir,
        summary,
    })
}

fn execute_prepared(p: Prepared) -> Result<Report, CliError> {
    let res = execute(&p.experiment, p.opts)?;
    let mut summary = vec![
        format!("experiment: {}", p.experiment.kind()),
        format!("config hash: {}", p.experiment.hash()),
    ];
    if res.predicted_nu.is_some() || res.median_lambda.is_some() {
        summary.push(format!(
            "predicted rate: {}  median fitted rate: {}  (gradient: {})",
            fmt_opt(res.predicted_nu),
            fmt_opt(res.median_lambda),
            fmt_opt(res.median_lambda_grad)
        ));
    }
    summary.extend(res.reasons.iter().map(|r| format!("  - {r}")));
    finish(res.outcome, p.out_dir, &res.artifacts, summary)
}

pub fn run(config: &Path, ov: &Overrides) -> Result<Report, CliError> {
    execute_prepared(prepare(load_config(config)?, ov)?)
}

/// `params[i]` is swept over `values[i]`.
pub fn sweep(config: &Path, params: &[String], values: &[String], ov: &Overrides) -> Result<Report, CliError> {
    if params.len() != values.len() {
        return Err(CliError::Usage(format!(
            "{} --param given but {} --values",
            params.len(),
            values.len()
        )));
    }
    let axes = params
        .iter()
        .zip(values)
        .map(|(p, v)| {
            Ok(Axis {
                param: Param::parse(p)?,
                values: parse_values(v)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let p = prepare(load_config(config)?, ov)?;
    let res = run_sweep(&p.experiment, &axes, p.opts)?;
    let mut summary = vec![format!("sweep over {} grid points", res.points.len())];
    for (i, (vals, r)) in res.points.iter().enumerate() {
        let assigns: Vec<String> = axes
            .iter()
            .zip(vals)
            .map(|(a, v)| format!("{}={v}", a.param.name()))
            .collect();
        summary.push(format!(
            "  point {i:03} [{}]: predicted {} fitted {} -> {}",
            assigns.join(", "),
            fmt_opt(r.predicted_nu),
            fmt_opt(r.median_lambda),
            r.outcome
        ));
    }
    finish(res.outcome, p.out_dir, &res.artifacts, summary)
}

/// Accepts an oracle-diagnostics config, or an SGD config whose objective
/// and oracle are checked at the initial point at t = 0 and t = T.
pub fn verify_oracles(config: &Path, ov: &Overrides) -> Result<Report, CliError> {
    let mut cfg = load_config(config)?;
    cfg.experiment = match cfg.experiment {
        e @ Experiment::OracleDiagnostics(_) => e,
        Experiment::Sgd(c) => Experiment::OracleDiagnostics(DiagnosticsConfig {
            objective: c.objective,
            oracle: c.oracle,
            theta: c.theta0,
            steps: vec![0, c.horizon],
            samples: 10_000,
            seeds: c.seeds,
            z: 4.0,
        }),
        other => {
            return Err(CliError::Usage(format!(
                "verify-oracles needs an oracle-diagnostics or sgd config, got {}",
                other.kind()
            )))
        }
    };
    execute_prepared(prepare(cfg, ov)?)
}

pub fn rs(config: &Path, ov: &Overrides) -> Result<Report, CliError> {
    let cfg = load_config(config)?;
    if !matches!(cfg.experiment, Experiment::RsProcess(_)) {
        return Err(CliError::Usage(format!(
            "rs needs an rs-process config, got {}",
            cfg.experiment.kind()
        )));
    }
    execute_prepared(prepare(cfg, ov)?)
}
