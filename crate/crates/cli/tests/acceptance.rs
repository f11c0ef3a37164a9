//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs at full scale (T = 10^6 where required), so it takes a minute or
//! two. Criteria listed in `KNOWN_UNATTAINABLE` are reported as FAIL but do
//! not fail the process; any other failure does.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use sgdlab::analysis::{simulate_rs_process, thm52_gate, verify_thm51, verify_thm52, Outcome};
use sgdlab::objectives::{
    check_gradient, check_pl, check_smoothness_bound, sample_box, FiniteSumLs, KlPrimeExample, Objective,
    Quadratic, SinSq,
};
use sgdlab::optimize::{run_divergence_counterexample, RecordStride};
use sgdlab::oracles::{estimate_bias_variance, exact_bias, NoiseModel, OracleSpec};
use sgdlab::rng::SimRng;
use sgdlab::schedules::{PowerLawSchedule, Role, Sequence};
use sgdlab_cli::config::{load_config, Experiment};
use sgdlab_cli::experiment::{execute, ExecOptions, ExperimentResult};
use sgdlab_cli::sweep::{run_sweep, Axis, Param};

/// Criteria that cannot be met as stated; the analysis is recorded with the
/// project's decision notes.
const KNOWN_UNATTAINABLE: &[(&str, &str)] = &[
    (
        "2",
        "central-difference SPSA bias is O(c^2), so the noise term dominates and smaller s wins the sweep",
    ),
    ("7", "sum_{k<1e5} 1/((k+1) ln(k+2)) is about 4.29, short of 5"),
];

struct Report {
    id: &'static str,
    title: &'static str,
    pass: bool,
    details: Vec<String>,
    seconds: f64,
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn experiment(name: &str) -> Experiment {
    load_config(&configs().join(name)).expect("shipped config loads").experiment
}

fn quiet() -> ExecOptions {
    ExecOptions {
        jobs: None,
        plot: false,
        run_despite_gate: false,
    }
}

/// Per-seed `final_J` column of a verdict table.
fn finals(verdict_csv: &str) -> Vec<f64> {
    verdict_csv
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("median") && !l.starts_with("min"))
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect()
}

fn result_finals(r: &ExperimentResult) -> Vec<f64> {
    finals(std::str::from_utf8(r.artifacts.get("verdict.csv").unwrap()).unwrap())
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.extension().is_some_and(|x| x == "csv") {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn fmt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn cli_run(config: &Path, out: &Path, jobs: usize) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_sgdlab"))
        .args(["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(["--jobs", &jobs.to_string()])
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap_or(-1)
}

fn criterion_1_and_9(scratch: &Path) -> (Report, Report) {
    let cfg = configs().join("sgd_unbiased.json");
    let start = Instant::now();
    let code = cli_run(&cfg, &scratch.join("c1a"), 1);
    let secs = start.elapsed().as_secs_f64();
    let verdict = fs::read_to_string(scratch.join("c1a/verdict.csv")).unwrap_or_default();
    let median_row: Vec<f64> = verdict
        .lines()
        .find(|l| l.starts_with("median,"))
        .map(|l| l.split(',').skip(1).take(3).map(|x| x.parse().unwrap()).collect())
        .unwrap_or_default();
    let fs_ = finals(&verdict);
    let max_final = fs_.iter().copied().fold(0.0, f64::max);
    let pass1 = code == 0
        && median_row.len() == 3
        && median_row[0] >= 0.65
        && median_row[1] >= 0.65
        && fs_.len() == 10
        && max_final < 1e-2
        && secs < 60.0;
    let r1 = Report {
        id: "1",
        title: "unbiased bounded-variance SGD rate on SinSq",
        pass: pass1,
        details: vec![
            format!("exit code {code}"),
            format!(
                "median lambda_hat J = {}, grad = {} (need >= 0.65)",
                fmt(median_row.first().copied()),
                fmt(median_row.get(1).copied())
            ),
            format!("max final J = {max_final:e} over {} seeds (need < 1e-2)", fs_.len()),
            format!("runtime {secs:.1} s (target < 60 s)"),
        ],
        seconds: secs,
    };

    let start = Instant::now();
    let code_b = cli_run(&cfg, &scratch.join("c1b"), 1);
    let code_c = cli_run(&cfg, &scratch.join("c1c"), 8);
    let a = snapshot(&scratch.join("c1a"));
    let b = snapshot(&scratch.join("c1b"));
    let c = snapshot(&scratch.join("c1c"));
    let traj_count = a.keys().filter(|k| k.starts_with("trajectories/")).count();
    let pass9 = code_b == 0 && code_c == 0 && traj_count == 10 && a.contains_key("verdict.csv") && a == b && a == c;
    let r9 = Report {
        id: "9",
        title: "determinism of reruns and of parallel execution",
        pass: pass9,
        details: vec![
            format!("{} CSV files compared ({traj_count} trajectories + verdict)", a.len()),
            format!("rerun identical: {}", a == b),
            format!("--jobs 8 identical to serial: {}", a == c),
        ],
        seconds: start.elapsed().as_secs_f64(),
    };
    (r1, r9)
}

fn criterion_2_and_3() -> (Report, Report) {
    let start = Instant::now();
    let k1 = execute(&experiment("spsa_k1.json"), quiet()).expect("k=1 run");
    let k1_finals = result_finals(&k1);
    let k1_max = k1_finals.iter().copied().fold(0.0, f64::max);
    let k1_median = k1.median_lambda.unwrap_or(f64::NAN);
    let main_ok = k1_median >= 0.12 && k1_finals.len() == 10 && k1_max < 0.1;

    let grid = [0.2, 0.317, 0.45];
    let sweep = run_sweep(
        &experiment("spsa_k1.json"),
        &[Axis {
            param: Param::IncrementExponent,
            values: grid.to_vec(),
        }],
        quiet(),
    )
    .expect("sweep runs");
    let lambdas: Vec<f64> = sweep
        .points
        .iter()
        .map(|(_, r)| r.median_lambda.unwrap_or(f64::NEG_INFINITY))
        .collect();
    let argmax = (0..grid.len())
        .max_by(|&i, &j| lambdas[i].total_cmp(&lambdas[j]))
        .unwrap();
    let sweep_ok = argmax == 1;
    let r2 = Report {
        id: "2",
        title: "two-evaluation SPSA rate and increment-exponent sweep",
        pass: main_ok && sweep_ok,
        details: vec![
            format!(
                "s = 0.95/3: predicted nu = {}, median lambda_hat = {k1_median:.4} (need >= 0.12): {}",
                fmt(k1.predicted_nu),
                if k1_median >= 0.12 { "ok" } else { "FAIL" }
            ),
            format!(
                "max final J = {k1_max:e} (need < 1e-1): {}",
                if k1_max < 0.1 { "ok" } else { "FAIL" }
            ),
            format!(
                "sweep s = {grid:?}: median lambda_hat = [{}]; maximal at s = {} (need 0.317): {}",
                lambdas.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>().join(", "),
                grid[argmax],
                if sweep_ok { "ok" } else { "FAIL" }
            ),
        ],
        seconds: start.elapsed().as_secs_f64(),
    };

    let start = Instant::now();
    let k2 = execute(&experiment("spsa_k2.json"), quiet()).expect("k=2 run");
    let k2_median = k2.median_lambda.unwrap_or(f64::NAN);
    let r3 = Report {
        id: "3",
        title: "three-evaluation SPSA beats two-evaluation SPSA",
        pass: k2_median > k1_median,
        details: vec![
            format!(
                "k = 2, s = 0.95/4: predicted nu = {}, median lambda_hat = {k2_median:.4}",
                fmt(k2.predicted_nu)
            ),
            format!("k = 1 median lambda_hat = {k1_median:.4}; need k = 2 strictly greater"),
        ],
        seconds: start.elapsed().as_secs_f64(),
    };
    (r2, r3)
}

fn constant_increment(c: f64) -> PowerLawSchedule {
    PowerLawSchedule::constant(c, Role::Increment).unwrap()
}

fn log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn criterion_4() -> Report {
    let start = Instant::now();
    let mut details = Vec::new();

    // (a) off-policy coordinate bias on random instances
    let mut rng = SimRng::new(0x0ff_9011c);
    let mut max_err: f64 = 0.0;
    let mut envelope_violations = 0;
    let mut mc_disagreements = 0;
    for inst in 0..100 {
        let d = 2 + rng.below(7);
        let obj: Box<dyn Objective> = if inst % 2 == 0 {
            let spectrum: Vec<f64> = (0..d).map(|_| 0.5 + 4.5 * rng.uniform()).collect();
            Box::new(Quadratic::diagonal(&spectrum).unwrap())
        } else {
            Box::new(SinSq::new(d).unwrap())
        };
        let raw: Vec<f64> = (0..d).map(|_| 0.05 + rng.uniform()).collect();
        let total: f64 = raw.iter().sum();
        let phi0: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let decay_exp = 0.2 + 1.3 * rng.uniform();
        let t = rng.below(1000) as u64;
        let theta: Vec<f64> = (0..d).map(|_| 4.0 * rng.uniform() - 2.0).collect();
        let oracle = OracleSpec::CoordinateOffPolicy {
            initial: phi0.clone(),
            decay: Some(PowerLawSchedule::new(1.0, decay_exp, 1, Role::Drift).unwrap()),
            noise: NoiseModel::none(),
        };
        let x = exact_bias(&oracle, obj.as_ref(), &theta, t).unwrap();
        let g = obj.gradient_vec(&theta);
        let u = 1.0 / d as f64;
        let w = (t as f64 + 1.0).powf(-decay_exp);
        let phi_t: Vec<f64> = phi0.iter().map(|p| u + (p - u) * w).collect();
        for i in 0..d {
            let expected = d as f64 * (phi_t[i] - u) * g[i];
            max_err = max_err.max((x[i] - expected).abs());
        }
        let l1: f64 = phi_t.iter().map(|p| (p - u).abs()).sum();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm(&x) > d as f64 * l1 * norm(&g) * (1.0 + 1e-12) {
            envelope_violations += 1;
        }
        if inst < 20 {
            let est = estimate_bias_variance(&oracle, obj.as_ref(), &theta, t, 4000, &mut rng).unwrap();
            let gap: f64 = x.iter().zip(&est.bias).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if gap > 4.0 * est.bias_stderr_norm {
                mc_disagreements += 1;
            }
        }
    }
    let a_ok = max_err <= 1e-12 && envelope_violations == 0 && mc_disagreements == 0;
    details.push(format!(
        "(a) off-policy: max |x - d (phi_t - u) o grad J| = {max_err:e} (need <= 1e-12), \
         envelope violations {envelope_violations}/100, Monte-Carlo disagreements {mc_disagreements}/20"
    ));

    // (b) SPSA variance scaling with c, measured at the minimizer of SinSq
    let obj = SinSq::new(4).unwrap();
    let cs = [0.1, 0.05, 0.025];
    let mut vars = Vec::new();
    for &c in &cs {
        let oracle = OracleSpec::Spsa {
            order: 1,
            increment: Some(constant_increment(c)),
            noise: NoiseModel::gaussian(0.1),
        };
        let est = estimate_bias_variance(&oracle, &obj, &[0.0; 4], 0, 20_000, &mut SimRng::new(77)).unwrap();
        vars.push(est.variance);
    }
    let slope = log_slope(&cs, &vars);
    let b_ok = (-2.3..=-1.7).contains(&slope);
    details.push(format!(
        "(b) SPSA variance at c = {cs:?}: [{}], log-log slope {slope:.3} (need in [-2.3, -1.7])",
        vars.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ")
    ));

    // (c) noise-free SPSA bias against kappa c^k, kappa fitted at the largest c
    let theta = [1.3; 4];
    let cs = [0.2, 0.1, 0.05];
    let mut c_ok = true;
    for k in [1u32, 2] {
        let biases: Vec<f64> = cs
            .iter()
            .map(|&c| {
                let oracle = OracleSpec::Spsa {
                    order: k,
                    increment: Some(constant_increment(c)),
                    noise: NoiseModel::none(),
                };
                let x = exact_bias(&oracle, &obj, &theta, 0).unwrap();
                x.iter().map(|a| a * a).sum::<f64>().sqrt()
            })
            .collect();
        // Least single kappa bounding every point; the decay order keeps it
        // from hiding growth as c shrinks.
        let kappa = cs
            .iter()
            .zip(&biases)
            .map(|(c, b)| b / c.powi(k as i32))
            .fold(0.0, f64::max);
        let order = log_slope(&cs, &biases);
        let ok = kappa.is_finite() && order >= k as f64 - 0.1;
        c_ok &= ok;
        details.push(format!(
            "(c) k = {k}: |bias| at c = {cs:?}: [{}], kappa = {kappa:.4}, decay order {order:.3} (need >= {:.1})",
            biases.iter().map(|b| format!("{b:.3e}")).collect::<Vec<_>>().join(", "),
            k as f64 - 0.1
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    details.push(format!("runtime {secs:.1} s (target < 30 s)"));
    Report {
        id: "4",
        title: "oracle bias and variance envelopes",
        pass: a_ok && b_ok && c_ok && secs < 30.0,
        details,
        seconds: secs,
    }
}

fn criterion_5() -> Report {
    let start = Instant::now();
    let catalog: Vec<Box<dyn Objective>> = vec![
        Box::new(Quadratic::new(vec![vec![2.0, 0.5, 0.0], vec![0.5, 1.0, 0.2], vec![0.0, 0.2, 0.5]]).unwrap()),
        Box::new(Quadratic::diagonal(&[1.0, 0.5]).unwrap()),
        Box::new(SinSq::new(4).unwrap()),
        Box::new(KlPrimeExample::new(1).unwrap()),
        Box::new(KlPrimeExample::new(3).unwrap()),
        Box::new(FiniteSumLs::new(50, 3, 17).unwrap()),
    ];
    let mut pass = true;
    let mut details = Vec::new();
    let mut rng = SimRng::new(5);
    for obj in &catalog {
        let pts = sample_box(obj.dim(), 10_000, 3.0, &mut rng);
        let smooth = check_smoothness_bound(obj.as_ref(), &pts);
        let pl = match obj.pl_constant() {
            Some(_) => {
                let r = check_pl(obj.as_ref(), &pts).unwrap();
                pass &= r.passed();
                format!("{} violations", r.violations)
            }
            None => "not claimed".to_string(),
        };
        let grad_err = check_gradient(obj.as_ref(), &pts);
        pass &= smooth.passed() && grad_err <= 1e-5;
        details.push(format!(
            "{} (d = {}): smoothness {} violations / {}; PL {pl}; gradient vs finite differences {grad_err:.2e}",
            obj.name(),
            obj.dim(),
            smooth.violations,
            smooth.checked
        ));
    }
    Report {
        id: "5",
        title: "smoothness and PL inequalities on the objective catalog",
        pass,
        details,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn criterion_6() -> Report {
    let start = Instant::now();
    let Experiment::RsProcess(cfg) = experiment("rs_process.json") else {
        panic!("rs_process.json is not an rs-process config")
    };
    let streams = cfg.seeds.streams();
    let paths: Vec<_> = streams
        .iter()
        .map(|s| simulate_rs_process(&cfg.process, cfg.horizon, s.rng_seed, cfg.stride).unwrap())
        .collect();
    let v51 = verify_thm51(&paths, &cfg.process, &cfg.thm51);
    let gate = thm52_gate(&cfg.process, 0.5);
    let v52 = verify_thm52(&paths, &cfg.process, 0.5).unwrap();
    let bounded = paths.iter().all(|p| p.max_z.is_finite() && p.max_z < 1e6);
    let max_osc = paths.iter().map(|p| p.tail_oscillation()).fold(0.0, f64::max);
    let max_final = paths.iter().map(|p| p.z_final).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = paths.len() == 100
        && bounded
        && max_osc < 1e-3
        && max_final < 1e-3
        && v51.outcome == Outcome::Pass
        && gate.is_ok()
        && v52.outcome == Outcome::Pass
        && secs < 20.0;
    Report {
        id: "6",
        title: "almost-supermartingale convergence and rate",
        pass,
        details: vec![
            format!(
                "{} paths, all bounded: {bounded} (max z = {:.3e})",
                paths.len(),
                paths.iter().map(|p| p.max_z).fold(0.0, f64::max)
            ),
            format!("max tail oscillation {max_osc:.3e}, max final z {max_final:.3e} (need < 1e-3)"),
            format!("convergence verdict: {}", v51.outcome),
            format!(
                "lambda = 0.5 gate: {}; rate verdict: {} (median lambda_hat {}, min {})",
                if gate.is_ok() { "passed" } else { "failed" },
                v52.outcome,
                fmt(v52.median_lambda),
                fmt(v52.min_lambda)
            ),
            format!("runtime {secs:.1} s (target < 20 s)"),
        ],
        seconds: secs,
    }
}

fn criterion_7() -> Report {
    let start = Instant::now();
    let alpha = PowerLawSchedule::new(1.0, 1.0, 1, Role::StepSize).unwrap();
    let beta = Sequence::inverse_log(1.0, 2).unwrap();
    let trace = run_divergence_counterexample(&alpha, &beta, 0.0, 100_000, RecordStride::Every(1)).unwrap();
    let holds = trace.lower_bound_holds();
    let above = trace.final_theta >= trace.final_lower_bound;
    let big = trace.final_lower_bound > 5.0;
    Report {
        id: "7",
        title: "divergence counterexample",
        pass: holds && above && big,
        details: vec![
            format!("lower bound holds at all {} recorded steps: {holds}", trace.rows.len()),
            format!(
                "theta_T = {:.6e} >= sum alpha_k beta_k = {:.6}: {above}",
                trace.final_theta, trace.final_lower_bound
            ),
            format!("sum alpha_k beta_k > 5: {big}"),
        ],
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn criterion_8() -> Report {
    let start = Instant::now();
    let plain = execute(&experiment("sa_linear.json"), quiet()).expect("sa run");
    let biased = execute(&experiment("sa_linear_biased.json"), quiet()).expect("biased sa run");
    let lp = plain.median_lambda.unwrap_or(f64::NAN);
    let lb = biased.median_lambda.unwrap_or(f64::NAN);
    let pass = lp >= 0.65 && lb >= 0.65 && plain.outcome == Outcome::Pass && biased.outcome == Outcome::Pass;
    Report {
        id: "8",
        title: "stochastic approximation rate on the linear problem",
        pass,
        details: vec![
            format!("unbiased: median lambda_hat on |theta|^2 = {lp:.4} (need >= 0.65), verdict {}", plain.outcome),
            format!("bias (t+2)^-1: median lambda_hat = {lb:.4} (need >= 0.65), verdict {}", biased.outcome),
        ],
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn main() {
    // Plain `cargo test` passes filter arguments; ignore them and `--list`.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let scratch = tempfile::tempdir().expect("scratch dir");
    let (r1, r9) = criterion_1_and_9(scratch.path());
    let (r2, r3) = criterion_2_and_3();
    let mut reports = vec![r1, r2, r3, criterion_4(), criterion_5(), criterion_6(), criterion_7(), criterion_8(), r9];
    reports.sort_by_key(|r| r.id.parse::<u32>().unwrap());

    let mut unexpected = 0;
    println!();
    for r in &reports {
        let known = KNOWN_UNATTAINABLE.iter().find(|(id, _)| *id == r.id);
        println!(
            "criterion {}: {} - {} ({:.1} s){}",
            r.id,
            if r.pass { "PASS" } else { "FAIL" },
            r.title,
            r.seconds,
            match (r.pass, known) {
                (false, Some(_)) => " [known unattainable]",
                _ => "",
            }
        );
        for d in &r.details {
            println!("    {d}");
        }
        if let (false, Some((_, why))) = (r.pass, known) {
            println!("    note: {why}");
        }
        if !r.pass && known.is_none() {
            unexpected += 1;
        }
    }
    let passed = reports.iter().filter(|r| r.pass).count();
    println!("\nacceptance: {passed}/{} criteria pass, {unexpected} unexpected failures", reports.len());
    if unexpected > 0 {
        std::process::exit(1);
    }
}
