//! Executes one configured experiment into an artifact bundle.

use rayon::prelude::*;
use serde_json::json;

use sgdlab::analysis::{
    convergence_verdict, median, simulate_rs_process, thm51_gate, verify_thm51, verify_thm52, ConvergenceParams,
    Outcome, RsPath, Verdict,
};
use sgdlab::optimize::{
    run_divergence_counterexample, run_sa, run_sgd, Column, SaProblem, SaRun, SgdRun, Trajectory,
};
use sgdlab::oracles::{estimate_bias_variance, exact_bias, OracleSpec};
use sgdlab::norm;
use sgdlab::rng::{mix_seed, SimRng};
use sgdlab::schedules::{check_sgd_conditions, predict_rate, ConditionReport, PowerLawSchedule, Role, Sequence};

use crate::config::{
    theta0_or_default, CounterexampleConfig, DiagnosticsConfig, Experiment, RsConfig, SaConfig, SeedStream,
    SgdConfig, VerdictConfig,
};
use crate::output::Artifacts;
use crate::plot::{chart, reference_line, Scale, Series, PALETTE};
use crate::CliError;

#[derive(Clone, Copy, Debug)]
pub struct ExecOptions {
    pub jobs: Option<usize>,
    pub plot: bool,
    /// Simulate even when the analytic gate fails (the outcome stays
    /// hypotheses-not-met). Used by sweeps so every grid point has a rate.
    pub run_despite_gate: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            jobs: None,
            plot: true,
            run_despite_gate: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub outcome: Outcome,
    pub reasons: Vec<String>,
    pub predicted_nu: Option<f64>,
    pub median_lambda: Option<f64>,
    pub median_lambda_grad: Option<f64>,
    pub artifacts: Artifacts,
}

pub fn execute(exp: &Experiment, opts: ExecOptions) -> Result<ExperimentResult, CliError> {
    let hash = exp.hash();
    match exp {
        Experiment::Sgd(c) => sgd(c, &hash, opts),
        Experiment::Sa(c) => sa(c, &hash, opts),
        Experiment::RsProcess(c) => rs(c, &hash, opts),
        Experiment::Counterexample(c) => counterexample(c, &hash, opts),
        Experiment::OracleDiagnostics(c) => diagnostics(c, &hash, opts),
    }
}

/// Maps `f` over `items` on a pool of `jobs` workers, preserving order.
pub fn par_map<T, R, F>(jobs: Option<usize>, items: &[T], f: F) -> Result<Vec<R>, CliError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

fn gate_json(report: &ConditionReport) -> serde_json::Value {
    report
        .conditions
        .iter()
        .map(|c| json!({"name": c.name, "holds": c.holds, "criterion": c.criterion}))
        .collect()
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

/// Gate plus predicted rate shared by the SGD and SA runners.
struct Gate {
    report: ConditionReport,
    nu: Option<f64>,
    reasons: Vec<String>,
}

fn gate(
    alpha: &PowerLawSchedule,
    bias: Option<&PowerLawSchedule>,
    std: Option<&PowerLawSchedule>,
    verdict: &VerdictConfig,
) -> Result<Gate, CliError> {
    let report = check_sgd_conditions(alpha, bias, std)?;
    let mut reasons: Vec<String> = report
        .failed()
        .map(|c| format!("{} fails: {}", c.name, c.criterion))
        .collect();
    let gamma = bias.map_or(1.0, |b| b.exponent());
    let delta = std.map_or(0.0, |m| (-m.exponent()).max(0.0));
    let nu = match verdict.nu {
        Some(nu) => Some(nu),
        None => match predict_rate(1.0 - alpha.exponent(), delta, gamma) {
            Ok(nu) => Some(nu),
            Err(e) => {
                reasons.push(format!("no rate guarantee: {e}"));
                None
            }
        },
    };
    Ok(Gate { report, nu, reasons })
}

fn seeds_json(streams: &[SeedStream], trajs: &[Trajectory]) -> serde_json::Value {
    streams
        .iter()
        .zip(trajs)
        .map(|(s, t)| {
            json!({
                "seed": s.label,
                "rng_seed": s.rng_seed,
                "diverged": t.diverged(),
                "diverged_at": t.diverged_at,
                "final_step": t.last().map(|r| r.t),
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn trajectory_bundle(
    kind: &str,
    hash: &str,
    gate: Gate,
    streams: &[SeedStream],
    trajs: Option<Vec<Trajectory>>,
    value: Column,
    grad: Option<Column>,
    verdict_cfg: &VerdictConfig,
    opts: ExecOptions,
) -> Result<ExperimentResult, CliError> {
    let gate_ok = gate.reasons.is_empty();
    let mut art = Artifacts::default();
    let mut reasons = gate.reasons.clone();
    let mut verdict = Verdict::hypotheses_not_met(gate.reasons.clone());
    if let Some(trajs) = &trajs {
        for (s, t) in streams.iter().zip(trajs) {
            art.add(format!("trajectories/seed_{}.csv", s.label), t.to_csv());
        }
        let params = ConvergenceParams {
            nu: gate.nu.unwrap_or(f64::NAN),
            slack: verdict_cfg.slack,
            threshold: verdict_cfg.threshold,
            window: verdict_cfg.window,
            min_seeds: verdict_cfg.min_seeds,
        };
        let runs: Vec<(u64, &Trajectory)> = streams.iter().map(|s| s.label).zip(trajs).collect();
        let mut v = convergence_verdict(&runs, value, grad, &params)?;
        if gate_ok {
            reasons = v.reasons.clone();
        } else {
            v.outcome = Outcome::HypothesesNotMet;
            v.reasons = gate.reasons.clone();
        }
        verdict = v;
        if opts.plot {
            art.add("plot.svg", trajectory_plot(kind, trajs, value, grad, gate.nu, verdict_cfg.window));
        }
    }
    art.add("verdict.csv", verdict.to_csv());
    let meta = json!({
        "kind": kind,
        "config_hash": hash,
        "outcome": verdict.outcome.to_string(),
        "exit_code": verdict.outcome.exit_code(),
        "gate": gate_json(&gate.report),
        "predicted_nu": gate.nu,
        "slack": verdict_cfg.slack,
        "threshold": verdict_cfg.threshold,
        "median_lambda_hat": verdict.median_lambda,
        "median_lambda_hat_grad": verdict.median_lambda_grad,
        "reasons": reasons,
        "seeds": trajs.as_ref().map(|t| seeds_json(streams, t)),
        "tool": concat!("sgdlab ", env!("CARGO_PKG_VERSION")),
    });
    art.add("metadata.json", pretty(&meta));
    Ok(ExperimentResult {
        outcome: verdict.outcome,
        reasons,
        predicted_nu: gate.nu,
        median_lambda: verdict.median_lambda,
        median_lambda_grad: verdict.median_lambda_grad,
        artifacts: art,
    })
}

fn column_name(c: Column) -> &'static str {
    match c {
        Column::J => "J",
        Column::GradSq => "|grad J|^2",
        Column::Rho => "rho",
        Column::RhoSq => "|theta|^2",
        Column::V => "V",
    }
}

fn trajectory_plot(
    kind: &str,
    trajs: &[Trajectory],
    value: Column,
    grad: Option<Column>,
    nu: Option<f64>,
    window: f64,
) -> String {
    let mut series = Vec::new();
    for t in trajs.iter() {
        series.push(Series::line(column_name(value), PALETTE[0], t.series(value)));
        if let Some(g) = grad {
            series.push(Series::line(column_name(g), PALETTE[1], t.series(g)));
        }
    }
    if let (Some(nu), Some(first)) = (nu, trajs.iter().find(|t| !t.diverged())) {
        let s = first.series(value);
        if let Some(&(t_hi, _)) = s.last() {
            let t_lo = t_hi.powf(1.0 - window).max(1.0);
            let finals: Vec<f64> = s.iter().filter(|p| p.0 >= t_lo).map(|p| p.1).take(5).collect();
            if let Some(y0) = median(&finals).filter(|y| *y > 0.0) {
                series.push(
                    Series::line(format!("slope -{nu:.3}"), PALETTE[3], reference_line(nu, t_lo, y0, t_hi)).dashed(),
                );
            }
        }
    }
    chart(&format!("{kind}: decay vs t"), "t", "value", Scale::Log, Scale::Log, &series)
}

fn sgd(c: &SgdConfig, hash: &str, opts: ExecOptions) -> Result<ExperimentResult, CliError> {
    let obj = c.objective.build()?;
    let d = obj.dim();
    c.oracle.validate(d)?;
    let env = c.oracle.declared_envelope()?;
    let gate = gate(&c.alpha, env.bias.as_ref(), env.std_dev.as_ref(), &c.verdict)?;
    let streams = c.seeds.streams();
    let theta0 = theta0_or_default(&c.theta0, d);
    let trajs = if gate.reasons.is_empty() || opts.run_despite_gate {
        let base = SgdRun {
            objective: obj.as_ref(),
            oracle: &c.oracle,
            alpha: c.alpha,
            theta0,
            horizon: c.horizon,
            stride: c.stride,
            seed: 0,
        };
        base.validate()?;
        let runs = par_map(opts.jobs, &streams, |s| {
            let mut run = base.clone();
            run.seed = s.rng_seed;
            run_sgd(&run)
        })?;
        Some(runs.into_iter().collect::<Result<Vec<_>, _>>()?)
    } else {
        None
    };
    trajectory_bundle(
        "sgd",
        hash,
        gate,
        &streams,
        trajs,
        Column::J,
        Some(Column::GradSq),
        &c.verdict,
        opts,
    )
}

fn sa(c: &SaConfig, hash: &str, opts: ExecOptions) -> Result<ExperimentResult, CliError> {
    let problem = SaProblem::catalog(c.problem.catalog, c.problem.dim)?;
    c.noise.validate(problem.dim)?;
    let gate = gate(&c.alpha, c.noise.bias.as_ref(), c.noise.std.as_ref(), &c.verdict)?;
    let streams = c.seeds.streams();
    let theta0 = theta0_or_default(&c.theta0, problem.dim);
    let trajs = if gate.reasons.is_empty() || opts.run_despite_gate {
        let runs = par_map(opts.jobs, &streams, |s| {
            run_sa(&SaRun {
                problem: &problem,
                noise: c.noise.clone(),
                alpha: c.alpha,
                theta0: theta0.clone(),
                horizon: c.horizon,
                stride: c.stride,
                seed: s.rng_seed,
            })
        })?;
        Some(runs.into_iter().collect::<Result<Vec<_>, _>>()?)
    } else {
        None
    };
    trajectory_bundle("sa", hash, gate, &streams, trajs, Column::RhoSq, None, &c.verdict, opts)
}

fn path_csv(p: &RsPath) -> String {
    let mut s = String::from("t,z\n");
    for (t, z) in &p.rows {
        s.push_str(&format!("{t},{z:e}\n"));
    }
    s
}

fn rs(c: &RsConfig, hash: &str, opts: ExecOptions) -> Result<ExperimentResult, CliError> {
    c.process.validate()?;
    let streams = c.seeds.streams();
    let paths = par_map(opts.jobs, &streams, |s| {
        simulate_rs_process(&c.process, c.horizon, s.rng_seed, c.stride).map(|mut p| {
            p.seed = s.label;
            p
        })
    })?
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let v51 = verify_thm51(&paths, &c.process, &c.thm51);
    let v52 = match c.lambda {
        Some(l) => Some(verify_thm52(&paths, &c.process, l)?),
        None => None,
    };
    let outcome = match (v51.outcome, v52.as_ref().map(|v| v.outcome)) {
        (Outcome::HypothesesNotMet, _) => Outcome::HypothesesNotMet,
        (Outcome::Fail, _) | (_, Some(Outcome::Fail)) => Outcome::Fail,
        (_, Some(Outcome::HypothesesNotMet)) => Outcome::HypothesesNotMet,
        _ => Outcome::Pass,
    };
    let mut reasons = v51.reasons.clone();
    if let Some(v) = &v52 {
        reasons.extend(v.reasons.iter().cloned());
    }
    let mut art = Artifacts::default();
    for p in &paths {
        art.add(format!("paths/seed_{}.csv", p.seed), path_csv(p));
    }
    art.add("verdict.csv", v51.to_csv());
    if let Some(v) = &v52 {
        art.add("verdict_rate.csv", v.to_csv());
    }
    if opts.plot {
        let mut series: Vec<Series> = paths
            .iter()
            .map(|p| Series::line("z_t", PALETTE[0], p.rows.clone()))
            .collect();
        if let (Some(l), Some(p)) = (c.lambda, paths.first()) {
            let t_hi = c.horizon as f64;
            if let Some(&(t0, y0)) = p.rows.iter().find(|r| r.0 >= 10.0 && r.1 > 0.0) {
                series.push(Series::line(format!("slope -{l}"), PALETTE[3], reference_line(l, t0, y0, t_hi)).dashed());
            }
        }
        art.add("plot.svg", chart("rs-process: z_t", "t", "z", Scale::Log, Scale::Log, &series));
    }
    let meta = json!({
        "kind": "rs-process",
        "config_hash": hash,
        "outcome": outcome.to_string(),
        "exit_code": outcome.exit_code(),
        "drift": c.drift_name(),
        "convergence": {
            "outcome": v51.outcome.to_string(),
            "sum_alpha_infinite": !c.process.alpha.asymptotic().is_summable(),
            "fraction_below": v51.fraction_below,
            "max_final": v51.max_final,
            "liminf_diagnostic": paths.iter().map(|p| p.tail_min).fold(f64::INFINITY, f64::min),
        },
        "rate": v52.as_ref().map(|v| json!({
            "lambda": c.lambda,
            "outcome": v.outcome.to_string(),
            "median_lambda_hat": v.median_lambda,
            "min_lambda_hat": v.min_lambda,
        })),
        "reasons": reasons,
        "seeds": streams.iter().map(|s| json!({"seed": s.label, "rng_seed": s.rng_seed})).collect::<Vec<_>>(),
        "tool": concat!("sgdlab ", env!("CARGO_PKG_VERSION")),
    });
    art.add("metadata.json", pretty(&meta));
    Ok(ExperimentResult {
        outcome,
        reasons,
        predicted_nu: c.lambda,
        median_lambda: v52.as_ref().and_then(|v| v.median_lambda),
        median_lambda_grad: None,
        artifacts: art,
    })
}

fn counterexample(c: &CounterexampleConfig, hash: &str, opts: ExecOptions) -> Result<ExperimentResult, CliError> {
    let trace = run_divergence_counterexample(&c.alpha, &c.beta, c.theta0, c.horizon, c.stride)?;
    let holds = trace.lower_bound_holds();
    // Viewed as a supermartingale recursion: f = alpha, g = alpha * beta, h = 0.
    let f = Sequence::power_law(c.alpha.with_role(Role::Drift));
    let g = Sequence::Product {
        factors: vec![f.clone(), c.beta.clone()],
    };
    let gate_reasons = thm51_gate(&f, &g).err().unwrap_or_default();
    let outcome = if holds { Outcome::Pass } else { Outcome::Fail };
    let mut reasons = Vec::new();
    if !holds {
        reasons.push("theta_t fell below sum alpha_k beta_k".to_string());
    }
    let mut art = Artifacts::default();
    art.add("counterexample.csv", trace.to_csv());
    if opts.plot {
        let th: Vec<(f64, f64)> = trace.rows.iter().map(|r| (r.t as f64, r.theta)).collect();
        let lb: Vec<(f64, f64)> = trace.rows.iter().map(|r| (r.t as f64, r.lower_bound)).collect();
        let series = [
            Series::line("theta_t", PALETTE[0], th),
            Series::line("sum alpha beta", PALETTE[1], lb).dashed(),
        ];
        art.add(
            "plot.svg",
            chart("divergence counterexample", "t", "theta", Scale::Log, Scale::Log, &series),
        );
    }
    let meta = json!({
        "kind": "counterexample",
        "config_hash": hash,
        "outcome": outcome.to_string(),
        "exit_code": outcome.exit_code(),
        "lower_bound_holds": holds,
        "final_theta": trace.final_theta,
        "final_lower_bound": trace.final_lower_bound,
        "saturated_at": trace.saturated_at,
        "supermartingale_gate": gate_reasons,
        "reasons": reasons,
        "tool": concat!("sgdlab ", env!("CARGO_PKG_VERSION")),
    });
    art.add("metadata.json", pretty(&meta));
    Ok(ExperimentResult {
        outcome,
        reasons,
        predicted_nu: None,
        median_lambda: None,
        median_lambda_grad: None,
        artifacts: art,
    })
}

struct DiagRow {
    seed: u64,
    t: u64,
    bias_norm: f64,
    exact_bias_norm: Option<f64>,
    bias_stderr: f64,
    bias_bound: Option<f64>,
    variance: f64,
    variance_stderr: f64,
    variance_bound: Option<f64>,
    evals: usize,
    failure: Option<String>,
}

fn diagnostics(c: &DiagnosticsConfig, hash: &str, opts: ExecOptions) -> Result<ExperimentResult, CliError> {
    let obj = c.objective.build()?;
    let d = obj.dim();
    c.oracle.validate(d)?;
    let theta = theta0_or_default(&c.theta, d);
    if theta.len() != d {
        return Err(CliError::Config(format!("theta has length {}, expected {d}", theta.len())));
    }
    let streams = c.seeds.streams();
    let cells: Vec<(SeedStream, usize, u64)> = streams
        .iter()
        .flat_map(|s| c.steps.iter().enumerate().map(move |(i, &t)| (*s, i, t)))
        .collect();
    let rows = par_map(opts.jobs, &cells, |&(s, i, t)| -> Result<DiagRow, CliError> {
        let mut rng = SimRng::new(mix_seed(s.rng_seed, i as u64));
        let est = estimate_bias_variance(&c.oracle, obj.as_ref(), &theta, t, c.samples, &mut rng)?;
        let mut failure = None;
        let exact = match exact_bias(&c.oracle, obj.as_ref(), &theta, t) {
            Ok(x) => Some(x),
            Err(sgdlab::Error::Usage(_)) => None,
            Err(e) => return Err(e.into()),
        };
        if let Some(x) = &exact {
            let gap = x
                .iter()
                .zip(&est.bias)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if gap > c.z * est.bias_stderr_norm + 1e-12 * (1.0 + norm(x)) {
                failure = Some(format!("estimated bias differs from exact bias by {gap:e}"));
            }
        }
        let g_norm = est.gradient_norm;
        let (bias_bound, variance_bound) = match &c.oracle {
            OracleSpec::ExactNoisy { bias, noise, .. } => {
                let mu = bias.map_or(0.0, |b| b.eval(t));
                let m = noise.map_or(0.0, |m| m.eval(t));
                if failure.is_none() && !est.variance_within(m, c.z) {
                    failure = Some(format!("variance {:e} above envelope", est.variance));
                }
                (Some(mu * (1.0 + g_norm)), Some(m * m * (1.0 + est.objective)))
            }
            OracleSpec::CoordinateOffPolicy { .. } => {
                // |x| <= d |phi_t - u|_1 |grad J|
                let probs = c.oracle.sampling_distribution(d, t).expect("coordinate oracle");
                let l1: f64 = probs.iter().map(|p| (p - 1.0 / d as f64).abs()).sum();
                let bound = d as f64 * l1 * g_norm;
                if failure.is_none() && exact.as_ref().is_some_and(|x| norm(x) > bound * (1.0 + 1e-12) + 1e-15) {
                    failure = Some("exact bias exceeds d |phi_t - u|_1 |grad J|".to_string());
                }
                (Some(bound), None)
            }
            OracleSpec::CoordinateUniform { .. } | OracleSpec::BlockCoordinate { .. } | OracleSpec::Minibatch { .. } => {
                (Some(0.0), None)
            }
            OracleSpec::KieferWolfowitz { .. } | OracleSpec::Spsa { .. } => (None, None),
        };
        Ok(DiagRow {
            seed: s.label,
            t,
            bias_norm: est.bias_norm,
            exact_bias_norm: exact.as_ref().map(|x| norm(x)),
            bias_stderr: est.bias_stderr_norm,
            bias_bound,
            variance: est.variance,
            variance_stderr: est.variance_stderr,
            variance_bound,
            evals: est.evals_per_draw,
            failure,
        })
    })?
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
    let mut csv = String::from(
        "seed,t,bias_norm,bias_stderr,exact_bias_norm,bias_bound,variance,variance_stderr,variance_bound,evals,flag\n",
    );
    let mut reasons = Vec::new();
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:e},{:e},{},{},{:e},{:e},{},{},{}\n",
            r.seed,
            r.t,
            r.bias_norm,
            r.bias_stderr,
            opt(r.exact_bias_norm),
            opt(r.bias_bound),
            r.variance,
            r.variance_stderr,
            opt(r.variance_bound),
            r.evals,
            if r.failure.is_some() { "fail" } else { "ok" }
        ));
        if let Some(f) = &r.failure {
            reasons.push(format!("seed {} t {}: {f}", r.seed, r.t));
        }
    }
    let outcome = if reasons.is_empty() { Outcome::Pass } else { Outcome::Fail };
    let mut art = Artifacts::default();
    art.add("diagnostics.csv", csv);
    let env = c.oracle.declared_envelope()?;
    let meta = json!({
        "kind": "oracle-diagnostics",
        "config_hash": hash,
        "oracle": c.oracle.kind_name(),
        "cost": c.oracle.cost(d),
        "declared_gamma": env.gamma(),
        "declared_delta": env.delta(),
        "outcome": outcome.to_string(),
        "exit_code": outcome.exit_code(),
        "reasons": reasons,
        "tool": concat!("sgdlab ", env!("CARGO_PKG_VERSION")),
    });
    art.add("metadata.json", pretty(&meta));
    Ok(ExperimentResult {
        outcome,
        reasons,
        predicted_nu: None,
        median_lambda: None,
        median_lambda_grad: None,
        artifacts: art,
    })
}
