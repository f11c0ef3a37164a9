//! Rate fitting, multi-seed verdicts and the Robbins-Siegmund process
//! simulator.
//!
//! `fit_rate` turns a recorded series into an empirical decay exponent by
//! least squares on log-log coordinates over the tail of the run, after
//! replacing each support point by the lower median of its neighborhood.
//! Verdicts aggregate per-seed fits and final values; the `verify_*`
//! functions gate on the analytic hypotheses first and report
//! [`Outcome::HypothesesNotMet`] instead of a conclusion when they fail.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::objectives::ClassBFunction;
use crate::optimize::{Column, RecordStride, Trajectory};
use crate::rng::SimRng;
use crate::schedules::{Asymptotic, PowerLawSchedule, Role, Sequence};
use crate::{Error, Result};

pub const MIN_SERIES_POINTS: usize = 100;
pub const SUPPORT_POINTS: usize = 40;
pub const MIN_SUPPORT_POINTS: usize = 20;
/// Relative half-width of the neighborhood around each support point.
pub const NEIGHBORHOOD: f64 = 0.1;
pub const DEFAULT_WINDOW: f64 = 0.5;
const LOG_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub t_lo: f64,
    pub t_hi: f64,
    pub lambda_hat: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub support_points: usize,
    pub smoothing: String,
}

/// Empirical decay exponent of `z` over the window `[T^(1-w), T]`.
pub fn fit_rate(series: &[(f64, f64)], window: f64) -> Result<RateFit> {
    if !(window > 0.0 && window <= 1.0) {
        return Err(Error::Usage(format!("window fraction must lie in (0, 1], got {window}")));
    }
    let pts: Vec<(f64, f64)> = series.iter().copied().filter(|p| p.0 >= 1.0).collect();
    if pts.len() < MIN_SERIES_POINTS {
        return Err(Error::Usage(format!(
            "rate fit needs at least {MIN_SERIES_POINTS} recorded points with t >= 1, got {}",
            pts.len()
        )));
    }
    if pts.windows(2).any(|w| w[1].0 <= w[0].0) || pts.iter().any(|p| p.1.is_nan() || p.1 < 0.0) {
        return Err(Error::Usage("series must have increasing t and nonnegative values".into()));
    }
    let t_hi = pts[pts.len() - 1].0;
    let t_lo = t_hi.powf(1.0 - window);
    let first = pts.partition_point(|p| p.0 < t_lo);
    let tail = &pts[first..];

    let mut chosen = BTreeSet::new();
    let ratio = t_hi / t_lo;
    for k in 0..SUPPORT_POINTS {
        let s = t_lo * ratio.powf(k as f64 / (SUPPORT_POINTS - 1) as f64);
        let lo = tail.partition_point(|p| p.0 < s / (1.0 + NEIGHBORHOOD));
        let hi = tail.partition_point(|p| p.0 <= s * (1.0 + NEIGHBORHOOD));
        if lo == hi {
            continue;
        }
        let mut idx: Vec<usize> = (lo..hi).collect();
        idx.sort_by(|&a, &b| tail[a].1.total_cmp(&tail[b].1).then(a.cmp(&b)));
        chosen.insert(idx[(idx.len() - 1) / 2]);
    }
    if chosen.len() < MIN_SUPPORT_POINTS {
        return Err(Error::Usage(format!(
            "only {} distinct support points in window [{t_lo:.3e}, {t_hi:.3e}]; need {MIN_SUPPORT_POINTS}",
            chosen.len()
        )));
    }
    let xy: Vec<(f64, f64)> = chosen
        .iter()
        .map(|&i| (tail[i].0.ln(), tail[i].1.max(LOG_FLOOR).ln()))
        .collect();
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = xy.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = xy.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    if !slope.is_finite() {
        return Err(Error::Usage("rate fit produced a non-finite slope".into()));
    }
    Ok(RateFit {
        t_lo,
        t_hi,
        lambda_hat: -slope,
        intercept,
        r_squared,
        support_points: chosen.len(),
        smoothing: format!(
            "lower median over +/-{:.0}% neighborhoods of {SUPPORT_POINTS} log-spaced points",
            NEIGHBORHOOD * 100.0
        ),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Pass,
    Fail,
    HypothesesNotMet,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Pass => 0,
            Outcome::Fail => 2,
            Outcome::HypothesesNotMet => 3,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Pass => "pass",
            Outcome::Fail => "fail",
            Outcome::HypothesesNotMet => "hypotheses-not-met",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub lambda_hat: Option<f64>,
    pub lambda_hat_grad: Option<f64>,
    pub final_value: f64,
    pub diverged: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub outcome: Outcome,
    pub reasons: Vec<String>,
    pub seeds: Vec<SeedSummary>,
    pub threshold: f64,
    pub median_final: Option<f64>,
    pub max_final: Option<f64>,
    pub fraction_below: f64,
    pub median_lambda: Option<f64>,
    pub median_lambda_grad: Option<f64>,
    pub min_lambda: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

pub const VERDICT_HEADER: &str = "seed,lambda_hat_J,lambda_hat_grad,final_J,flag";

impl Verdict {
    fn assemble(outcome: Outcome, reasons: Vec<String>, seeds: Vec<SeedSummary>, threshold: f64) -> Self {
        let ok: Vec<&SeedSummary> = seeds.iter().filter(|s| !s.diverged).collect();
        let finals: Vec<f64> = ok.iter().map(|s| s.final_value).collect();
        let lambdas: Vec<f64> = ok.iter().filter_map(|s| s.lambda_hat).collect();
        let grads: Vec<f64> = ok.iter().filter_map(|s| s.lambda_hat_grad).collect();
        let below = seeds.iter().filter(|s| !s.diverged && s.final_value < threshold).count();
        Verdict {
            outcome,
            reasons,
            threshold,
            median_final: median(&finals),
            max_final: finals.iter().copied().reduce(f64::max),
            fraction_below: if seeds.is_empty() {
                0.0
            } else {
                below as f64 / seeds.len() as f64
            },
            median_lambda: median(&lambdas),
            median_lambda_grad: median(&grads),
            min_lambda: lambdas.iter().copied().reduce(f64::min),
            seeds,
        }
    }

    pub fn hypotheses_not_met(reasons: Vec<String>) -> Self {
        Self::assemble(Outcome::HypothesesNotMet, reasons, Vec::new(), f64::NAN)
    }

    /// One row per seed plus `median` and `min` summary rows whose flag
    /// column carries the outcome.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{VERDICT_HEADER}\n");
        for r in &self.seeds {
            let flag = if r.diverged {
                "diverged"
            } else if r.passed {
                "ok"
            } else {
                "fail"
            };
            s.push_str(&format!(
                "{},{},{},{:e},{flag}\n",
                r.seed,
                fmt_opt(r.lambda_hat),
                fmt_opt(r.lambda_hat_grad),
                r.final_value
            ));
        }
        let ok = self.seeds.iter().filter(|r| !r.diverged);
        let min_grad = ok.clone().filter_map(|r| r.lambda_hat_grad).reduce(f64::min);
        let min_final = ok.map(|r| r.final_value).reduce(f64::min);
        s.push_str(&format!(
            "median,{},{},{},{}\n",
            fmt_opt(self.median_lambda),
            fmt_opt(self.median_lambda_grad),
            fmt_opt(self.median_final),
            self.outcome
        ));
        s.push_str(&format!(
            "min,{},{},{},{}\n",
            fmt_opt(self.min_lambda),
            fmt_opt(min_grad),
            fmt_opt(min_final),
            self.outcome
        ));
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceParams {
    /// Predicted rate exponent.
    pub nu: f64,
    pub slack: f64,
    /// Every seed's final value must be below this.
    pub threshold: f64,
    #[serde(default = "default_window")]
    pub window: f64,
    #[serde(default = "default_min_seeds")]
    pub min_seeds: usize,
}

fn default_window() -> f64 {
    DEFAULT_WINDOW
}

fn default_min_seeds() -> usize {
    10
}

impl ConvergenceParams {
    pub fn new(nu: f64, slack: f64, threshold: f64) -> Self {
        Self {
            nu,
            slack,
            threshold,
            window: DEFAULT_WINDOW,
            min_seeds: 10,
        }
    }
}

/// Multi-seed rate verdict. `value` is the column whose decay is tested
/// (J for SGD, `|theta|^2` for SA); `grad` optionally adds a second
/// fitted column that must meet the same bar.
pub fn convergence_verdict(
    runs: &[(u64, &Trajectory)],
    value: Column,
    grad: Option<Column>,
    params: &ConvergenceParams,
) -> Result<Verdict> {
    if runs.len() < params.min_seeds {
        return Err(Error::Usage(format!(
            "convergence verdict needs at least {} seeds, got {}",
            params.min_seeds,
            runs.len()
        )));
    }
    let bar = params.nu - params.slack;
    let mut seeds = Vec::with_capacity(runs.len());
    let mut reasons = Vec::new();
    for &(seed, traj) in runs {
        if traj.diverged() {
            reasons.push(format!("seed {seed} diverged at step {}", traj.diverged_at.unwrap_or(0)));
            seeds.push(SeedSummary {
                seed,
                lambda_hat: None,
                lambda_hat_grad: None,
                final_value: traj.final_value(value).unwrap_or(f64::NAN),
                diverged: true,
                passed: false,
            });
            continue;
        }
        let lambda_hat = fit_rate(&traj.series(value), params.window)?.lambda_hat;
        let lambda_hat_grad = match grad {
            Some(c) => Some(fit_rate(&traj.series(c), params.window)?.lambda_hat),
            None => None,
        };
        let final_value = traj
            .final_value(value)
            .ok_or_else(|| Error::Usage(format!("trajectory has no {value:?} column")))?;
        seeds.push(SeedSummary {
            seed,
            lambda_hat: Some(lambda_hat),
            lambda_hat_grad,
            final_value,
            diverged: false,
            passed: final_value < params.threshold,
        });
    }
    for s in seeds.iter().filter(|s| !s.diverged && !s.passed) {
        reasons.push(format!(
            "seed {}: final value {:e} >= threshold {:e}",
            s.seed, s.final_value, params.threshold
        ));
    }
    let mut verdict = Verdict::assemble(Outcome::Pass, reasons, seeds, params.threshold);
    if let Some(m) = verdict.median_lambda {
        if m < bar {
            verdict.reasons.push(format!("median lambda_hat {m:.4} < nu - slack = {bar:.4}"));
        }
    }
    if let Some(m) = verdict.median_lambda_grad {
        if m < bar {
            verdict
                .reasons
                .push(format!("median gradient lambda_hat {m:.4} < nu - slack = {bar:.4}"));
        }
    }
    if !verdict.reasons.is_empty() {
        verdict.outcome = Outcome::Fail;
    }
    Ok(verdict)
}

/// Drift `h_t = eta(z_t)` of the Robbins-Siegmund process.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drift {
    #[default]
    Identity,
    /// `eta(r) = r / (1 + r)`.
    Saturating,
    #[serde(skip)]
    Custom(ClassBFunction),
}

impl Drift {
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            Drift::Identity => r,
            Drift::Saturating => r / (1.0 + r),
            Drift::Custom(eta) => eta.eval(r),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Drift::Identity)
    }
}

/// `z_{t+1} = [(1 + f_t) z_t + g_t - alpha_t eta(z_t)] U_{t+1}` with
/// `U` equal to `1 - u` or `1 + u` with probability one half each.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsProcessSpec {
    pub f: Sequence,
    pub g: Sequence,
    pub alpha: PowerLawSchedule,
    #[serde(default)]
    pub drift: Drift,
    pub u: f64,
    pub z0: f64,
}

impl RsProcessSpec {
    pub fn validate(&self) -> Result<()> {
        self.f.validate()?;
        self.g.validate()?;
        if self.alpha.role() != Role::StepSize {
            return Err(Error::Config(format!("alpha schedule has role {:?}", self.alpha.role())));
        }
        if self.alpha.exponent() < 0.0 || self.alpha.eval(0) > 1.0 {
            return Err(Error::Config(format!(
                "alpha_t must stay <= 1 for nonnegativity; alpha_0 = {}",
                self.alpha.eval(0)
            )));
        }
        if !(0.0..1.0).contains(&self.u) {
            return Err(Error::Config(format!("noise level u must lie in [0, 1), got {}", self.u)));
        }
        if !(self.z0.is_finite() && self.z0 > 0.0) {
            return Err(Error::Config(format!("z0 must be positive, got {}", self.z0)));
        }
        for k in -12..=8 {
            let r = 10f64.powi(k);
            let h = self.drift.eval(r);
            if !(h >= 0.0 && h <= r) {
                return Err(Error::Config(format!("drift must satisfy 0 <= eta(r) <= r; fails at r = {r:e}")));
            }
        }
        Ok(())
    }

    /// Pre-noise value `(1 + f_t) z + g_t - alpha_t eta(z)`, i.e. the exact
    /// conditional mean of `z_{t+1}`, together with the drift term
    /// `alpha_t eta(z)`.
    pub fn conditional_mean(&self, t: u64, z: f64) -> (f64, f64) {
        let a = self.alpha.eval(t);
        let drift = a * self.drift.eval(z);
        ((1.0 + self.f.value(t)) * z - drift + self.g.value(t), drift)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RsPath {
    pub seed: u64,
    pub horizon: u64,
    /// Recorded `(t, z_t)`.
    pub rows: Vec<(f64, f64)>,
    pub z_final: f64,
    pub max_z: f64,
    /// Extremes of `z_t` over `t > T/2`.
    pub tail_max: f64,
    pub tail_min: f64,
    /// `sum_{t < T/2} alpha_t h_t` and the same sum up to `T`.
    pub drift_sum_half: f64,
    pub drift_sum: f64,
}

impl RsPath {
    /// `max_{t > T/2} |z_t - z_T|`.
    pub fn tail_oscillation(&self) -> f64 {
        (self.tail_max - self.z_final).max(self.z_final - self.tail_min)
    }
}

pub fn simulate_rs_process(spec: &RsProcessSpec, horizon: u64, seed: u64, stride: RecordStride) -> Result<RsPath> {
    spec.validate()?;
    stride.validate()?;
    let mut rng = SimRng::new(seed);
    let mut rec = crate::optimize::Recorder::new(stride);
    let mut z = spec.z0;
    let mut rows = Vec::new();
    let mut max_z = z;
    let (mut tail_max, mut tail_min) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut drift_sum = 0.0;
    let mut drift_sum_half = 0.0;
    let half = horizon / 2;
    for t in 0..horizon {
        if rec.hit(t) {
            rows.push((t as f64, z));
        }
        if t == half {
            drift_sum_half = drift_sum;
        }
        let (mean, drift) = spec.conditional_mean(t, z);
        if mean < 0.0 {
            return Err(Error::Config(format!("conditional mean negative at t = {t}")));
        }
        drift_sum += drift;
        let factor = if spec.u == 0.0 {
            1.0
        } else if rng.coin() {
            1.0 + spec.u
        } else {
            1.0 - spec.u
        };
        z = mean * factor;
        max_z = max_z.max(z);
        if t + 1 > half {
            tail_max = tail_max.max(z);
            tail_min = tail_min.min(z);
        }
    }
    rows.push((horizon as f64, z));
    if horizon <= half {
        drift_sum_half = drift_sum;
    }
    Ok(RsPath {
        seed,
        horizon,
        rows,
        z_final: z,
        max_z,
        tail_max,
        tail_min,
        drift_sum_half,
        drift_sum,
    })
}

/// Analytic hypotheses of the almost-supermartingale theorem:
/// `sum f < inf`, `sum g < inf`.
pub fn thm51_gate(f: &Sequence, g: &Sequence) -> std::result::Result<(), Vec<String>> {
    let mut reasons = Vec::new();
    if !f.is_summable() {
        reasons.push(format!("sum f_t diverges (terms ~ {})", f.asymptotic()));
    }
    if !g.is_summable() {
        reasons.push(format!("sum g_t diverges (terms ~ {})", g.asymptotic()));
    }
    if reasons.is_empty() {
        Ok(())
    } else {
        Err(reasons)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thm51Params {
    /// Bound on `max_{t > T/2} |z_t - z_T|`.
    pub oscillation_tol: f64,
    /// Bound on `z_T` when convergence to zero is claimed.
    pub threshold: f64,
    /// Bound on the share of `sum alpha_t h_t` accrued after `T/2`.
    pub drift_tail_share: f64,
}

impl Default for Thm51Params {
    fn default() -> Self {
        Self {
            oscillation_tol: 1e-3,
            threshold: 1e-3,
            drift_tail_share: 0.05,
        }
    }
}

pub fn verify_thm51(paths: &[RsPath], spec: &RsProcessSpec, params: &Thm51Params) -> Verdict {
    if let Err(reasons) = thm51_gate(&spec.f, &spec.g) {
        return Verdict::hypotheses_not_met(reasons);
    }
    let claims_zero_limit = !spec.alpha.asymptotic().is_summable();
    let mut reasons = Vec::new();
    let seeds = paths
        .iter()
        .map(|p| {
            let mut fails = Vec::new();
            if !p.max_z.is_finite() {
                fails.push("unbounded path".to_string());
            }
            if !(p.tail_oscillation() <= params.oscillation_tol) {
                fails.push(format!("tail oscillation {:e}", p.tail_oscillation()));
            }
            if claims_zero_limit && !(p.z_final <= params.threshold) {
                fails.push(format!("z_T = {:e} above threshold", p.z_final));
            }
            let share = if p.drift_sum > 0.0 {
                (p.drift_sum - p.drift_sum_half) / p.drift_sum
            } else {
                0.0
            };
            if !(p.drift_sum.is_finite() && share <= params.drift_tail_share) {
                fails.push(format!("drift partial sums still growing (tail share {share:.3})"));
            }
            for f in &fails {
                reasons.push(format!("seed {}: {f}", p.seed));
            }
            SeedSummary {
                seed: p.seed,
                lambda_hat: None,
                lambda_hat_grad: None,
                final_value: p.z_final,
                diverged: !p.max_z.is_finite(),
                passed: fails.is_empty(),
            }
        })
        .collect();
    let outcome = if reasons.is_empty() { Outcome::Pass } else { Outcome::Fail };
    let threshold = if claims_zero_limit { params.threshold } else { f64::INFINITY };
    Verdict::assemble(outcome, reasons, seeds, threshold)
}

/// Analytic gate for the rate theorem at exponent `lambda`, on top of
/// [`thm51_gate`]: identity drift, `sum alpha = inf`,
/// `sum (t+1)^lambda g_t < inf`, and `alpha_t - lambda/t` eventually
/// nonnegative with divergent sum.
pub fn thm52_gate(spec: &RsProcessSpec, lambda: f64) -> std::result::Result<(), Vec<String>> {
    let mut reasons = thm51_gate(&spec.f, &spec.g).err().unwrap_or_default();
    if !spec.drift.is_identity() {
        reasons.push("rate theorem requires eta(r) = r".into());
    }
    let weighted = Asymptotic {
        power: -lambda,
        log_power: 0.0,
    }
    .times(spec.g.asymptotic());
    if !weighted.is_summable() {
        reasons.push(format!("sum (t+1)^{lambda} g_t diverges"));
    }
    let p = spec.alpha.exponent();
    let dominates = p < 1.0 || (p == 1.0 && spec.alpha.scale() > lambda);
    if !dominates {
        reasons.push(format!(
            "alpha_t = {} (t + {})^-{p} does not eventually dominate {lambda}/t with divergent excess",
            spec.alpha.scale(),
            spec.alpha.offset()
        ));
    }
    if reasons.is_empty() {
        Ok(())
    } else {
        Err(reasons)
    }
}

/// Checks `t^lambda z_t -> 0` on each path: fitted decay exponent at least
/// `lambda`, and `t^lambda z_t` over `t >= T/2` below its maximum over
/// `t <= sqrt(T)`.
pub fn verify_thm52(paths: &[RsPath], spec: &RsProcessSpec, lambda: f64) -> Result<Verdict> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Usage(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    if let Err(reasons) = thm52_gate(spec, lambda) {
        return Ok(Verdict::hypotheses_not_met(reasons));
    }
    let mut reasons = Vec::new();
    let mut seeds = Vec::new();
    for p in paths {
        let fit = fit_rate(&p.rows, DEFAULT_WINDOW)?;
        let big_t = p.horizon as f64;
        let scaled = |lo: f64, hi: f64| {
            p.rows
                .iter()
                .filter(|r| r.0 >= lo && r.0 <= hi)
                .map(|r| r.0.powf(lambda) * r.1)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let early = scaled(1.0, big_t.sqrt());
        let late = scaled(big_t / 2.0, big_t);
        let mut fails = Vec::new();
        if fit.lambda_hat < lambda {
            fails.push(format!("lambda_hat {:.4} < {lambda}", fit.lambda_hat));
        }
        if !(late < early) {
            fails.push(format!("t^lambda z_t tail max {late:e} not below early max {early:e}"));
        }
        for f in &fails {
            reasons.push(format!("seed {}: {f}", p.seed));
        }
        seeds.push(SeedSummary {
            seed: p.seed,
            lambda_hat: Some(fit.lambda_hat),
            lambda_hat_grad: None,
            final_value: p.z_final,
            diverged: !p.max_z.is_finite(),
            passed: fails.is_empty(),
        });
    }
    let outcome = if reasons.is_empty() { Outcome::Pass } else { Outcome::Fail };
    Ok(Verdict::assemble(outcome, reasons, seeds, f64::INFINITY))
}
