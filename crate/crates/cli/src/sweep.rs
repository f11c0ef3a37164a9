//! Parameter grids over a base experiment.

use serde_json::Value;

use sgdlab::analysis::Outcome;

use crate::config::Experiment;
use crate::experiment::{execute, ExecOptions, ExperimentResult};
use crate::output::Artifacts;
use crate::plot::{chart, Scale, Series, PALETTE};
use crate::CliError;

/// Scalars a sweep may vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Param {
    IncrementExponent,
    Order,
    AlphaExponent,
    AlphaScale,
    U,
    Lambda,
}

impl Param {
    pub fn parse(name: &str) -> Result<Self, CliError> {
        Ok(match name {
            "s" | "increment_exponent" => Param::IncrementExponent,
            "k" | "order" => Param::Order,
            "p" | "alpha_exponent" => Param::AlphaExponent,
            "alpha_scale" => Param::AlphaScale,
            "u" => Param::U,
            "lambda" => Param::Lambda,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown sweep parameter `{other}` (expected s, k, p, alpha_scale, u or lambda)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::IncrementExponent => "s",
            Param::Order => "k",
            Param::AlphaExponent => "p",
            Param::AlphaScale => "alpha_scale",
            Param::U => "u",
            Param::Lambda => "lambda",
        }
    }

    fn path(self, kind: &str) -> Result<&'static [&'static str], CliError> {
        let path: &'static [&'static str] = match (self, kind) {
            (Param::IncrementExponent, "sgd" | "oracle-diagnostics") => &["oracle", "increment", "exponent"],
            (Param::Order, "sgd" | "oracle-diagnostics") => &["oracle", "order"],
            (Param::AlphaExponent, "sgd" | "sa" | "counterexample") => &["alpha", "exponent"],
            (Param::AlphaScale, "sgd" | "sa" | "counterexample") => &["alpha", "scale"],
            (Param::AlphaExponent, "rs-process") => &["process", "alpha", "exponent"],
            (Param::AlphaScale, "rs-process") => &["process", "alpha", "scale"],
            (Param::U, "rs-process") => &["process", "u"],
            (Param::Lambda, "rs-process") => &["lambda"],
            _ => {
                return Err(CliError::Usage(format!(
                    "parameter `{}` cannot be swept for a {kind} experiment",
                    self.name()
                )))
            }
        };
        Ok(path)
    }
}

/// Parses `0.2,1/3,0.45`. Fractions `a/b` are accepted.
pub fn parse_values(list: &str) -> Result<Vec<f64>, CliError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let bad = || CliError::Usage(format!("cannot parse sweep value `{s}`"));
            let v = match s.split_once('/') {
                Some((a, b)) => {
                    let a: f64 = a.trim().parse().map_err(|_| bad())?;
                    let b: f64 = b.trim().parse().map_err(|_| bad())?;
                    a / b
                }
                None => s.parse().map_err(|_| bad())?,
            };
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad())
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Axis {
    pub param: Param,
    pub values: Vec<f64>,
}

/// Returns a copy of `base` with `param` set to `value`.
pub fn apply(base: &Experiment, param: Param, value: f64) -> Result<Experiment, CliError> {
    let kind = base.kind();
    let path = param.path(kind)?;
    let mut doc = serde_json::to_value(base).map_err(|e| CliError::Config(e.to_string()))?;
    let (last, parents) = path.split_last().expect("paths are nonempty");
    let mut node = &mut doc;
    for key in parents {
        node = node
            .get_mut(*key)
            .filter(|v| v.is_object())
            .ok_or_else(|| CliError::Usage(format!("experiment has no `{key}` to sweep `{}` in", param.name())))?;
    }
    let obj = node.as_object_mut().expect("checked above");
    if !obj.contains_key(*last) && param != Param::Lambda {
        return Err(CliError::Usage(format!(
            "this experiment's `{}` has no `{last}` field",
            parents.last().unwrap_or(&kind)
        )));
    }
    let v = if param == Param::Order {
        if value.fract() != 0.0 || value < 1.0 {
            return Err(CliError::Usage(format!("order must be a positive integer, got {value}")));
        }
        Value::from(value as u64)
    } else {
        serde_json::Number::from_f64(value)
            .map(Value::Number)
            .ok_or_else(|| CliError::Usage(format!("invalid value {value}")))?
    };
    obj.insert((*last).to_string(), v);
    serde_json::from_value(doc).map_err(|e| CliError::Config(format!("swept config is invalid: {e}")))
}

pub struct SweepResult {
    pub outcome: Outcome,
    pub points: Vec<(Vec<f64>, ExperimentResult)>,
    pub artifacts: Artifacts,
}

/// Fail outranks hypotheses-not-met, which outranks pass.
pub fn worst(outcomes: impl IntoIterator<Item = Outcome>) -> Outcome {
    outcomes.into_iter().fold(Outcome::Pass, |acc, o| match (acc, o) {
        (Outcome::Fail, _) | (_, Outcome::Fail) => Outcome::Fail,
        (Outcome::HypothesesNotMet, _) | (_, Outcome::HypothesesNotMet) => Outcome::HypothesesNotMet,
        _ => Outcome::Pass,
    })
}

fn grid(axes: &[Axis]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

pub fn run_sweep(base: &Experiment, axes: &[Axis], opts: ExecOptions) -> Result<SweepResult, CliError> {
    if axes.is_empty() {
        return Err(CliError::Usage("sweep needs at least one --param".into()));
    }
    if axes.len() > 2 {
        return Err(CliError::Usage("sweep supports at most two parameters".into()));
    }
    for (i, a) in axes.iter().enumerate() {
        if a.values.is_empty() {
            return Err(CliError::Usage(format!("empty grid for parameter `{}`", a.param.name())));
        }
        if axes[..i].iter().any(|b| b.param == a.param) {
            return Err(CliError::Usage(format!("parameter `{}` given twice", a.param.name())));
        }
    }
    let points = grid(axes);
    let mut configs = Vec::with_capacity(points.len());
    for p in &points {
        let mut exp = base.clone();
        for (axis, &v) in axes.iter().zip(p) {
            exp = apply(&exp, axis.param, v)?;
        }
        configs.push(exp);
    }
    let point_opts = ExecOptions {
        run_despite_gate: true,
        ..opts
    };
    let mut art = Artifacts::default();
    let mut results = Vec::with_capacity(points.len());
    let fmt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
    let mut csv = String::from("point");
    for a in axes {
        csv.push(',');
        csv.push_str(a.param.name());
    }
    csv.push_str(",predicted_nu,median_lambda_hat,median_lambda_hat_grad,outcome\n");
    for (i, (p, exp)) in points.into_iter().zip(&configs).enumerate() {
        let res = execute(exp, point_opts)?;
        csv.push_str(&format!("{i}"));
        for v in &p {
            csv.push_str(&format!(",{v}"));
        }
        csv.push_str(&format!(
            ",{},{},{},{}\n",
            fmt(res.predicted_nu),
            fmt(res.median_lambda),
            fmt(res.median_lambda_grad),
            res.outcome
        ));
        art.merge_under(&format!("point_{i:03}"), res.artifacts.clone());
        results.push((p, res));
    }
    art.add("sweep.csv", csv);
    if opts.plot {
        art.add("sweep.svg", sweep_plot(base, axes, &results));
    }
    Ok(SweepResult {
        outcome: worst(results.iter().map(|(_, r)| r.outcome)),
        points: results,
        artifacts: art,
    })
}

/// `nu(s) = min{1 - 2 phi - 2 s, k s - phi}`.
pub fn spsa_nu(k: u32, phi: f64, s: f64) -> f64 {
    (1.0 - 2.0 * phi - 2.0 * s).min(k as f64 * s - phi)
}

fn base_order_and_phi(base: &Experiment) -> (Option<u32>, Option<f64>) {
    match base {
        Experiment::Sgd(c) => {
            let k = match &c.oracle {
                sgdlab::oracles::OracleSpec::Spsa { order, .. } => Some(*order),
                sgdlab::oracles::OracleSpec::KieferWolfowitz { .. } => Some(1),
                _ => None,
            };
            (k, Some(1.0 - c.alpha.exponent()))
        }
        _ => (None, None),
    }
}

type Point = (Vec<f64>, ExperimentResult);

fn sweep_plot(base: &Experiment, axes: &[Axis], results: &[Point]) -> String {
    let x_idx = axes
        .iter()
        .position(|a| a.param == Param::IncrementExponent)
        .unwrap_or(0);
    let x_name = axes[x_idx].param.name();
    let (base_k, base_phi) = base_order_and_phi(base);
    let k_idx = axes.iter().position(|a| a.param == Param::Order);
    let p_idx = axes.iter().position(|a| a.param == Param::AlphaExponent);
    // Group points by the other axis (if any) so each group is one curve.
    let other = axes.len().checked_sub(1).map(|_| 1 - x_idx).filter(|&j| j < axes.len());
    let mut groups: Vec<(Option<f64>, Vec<&Point>)> = Vec::new();
    for r in results {
        let key = other.map(|j| r.0[j]);
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut series = Vec::new();
    for (gi, (key, pts)) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let suffix = match (other, key) {
            (Some(j), Some(v)) => format!(", {}={v}", axes[j].param.name()),
            _ => String::new(),
        };
        let measured: Vec<(f64, f64)> = pts
            .iter()
            .filter_map(|(p, r)| r.median_lambda.map(|l| (p[x_idx], l)))
            .collect();
        series.push(Series::line(format!("median lambda_hat{suffix}"), color, measured).markers());
        let predicted: Vec<(f64, f64)> = pts
            .iter()
            .filter_map(|(p, r)| r.predicted_nu.map(|nu| (p[x_idx], nu)))
            .collect();
        if axes[x_idx].param != Param::IncrementExponent {
            series.push(Series::line(format!("predicted nu{suffix}"), color, predicted).dashed());
            continue;
        }
        // Theoretical curve over the swept range of s.
        let k = k_idx.and_then(|j| key.filter(|_| other == Some(j))).map(|v| v as u32).or(base_k);
        let phi = p_idx
            .and_then(|j| key.filter(|_| other == Some(j)))
            .map(|p| 1.0 - p)
            .or(base_phi);
        if let (Some(k), Some(phi)) = (k, phi) {
            let xs: Vec<f64> = pts.iter().map(|(p, _)| p[x_idx]).collect();
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.5);
            let curve: Vec<(f64, f64)> = (0..=200)
                .map(|i| lo + (hi - lo) * i as f64 / 200.0)
                .map(|s| (s, spsa_nu(k, phi, s)))
                .filter(|p| p.1 > 0.0)
                .collect();
            series.push(Series::line(format!("nu(s), k={k}{suffix}"), color, curve).dashed());
        }
        for (s, nu) in predicted {
            series.push(Series::line(format!("predicted nu = {nu:.3} at s = {s:.3}"), PALETTE[3], vec![(s, nu)]).markers());
        }
    }
    chart(
        &format!("rate vs {x_name}"),
        x_name,
        "rate exponent",
        Scale::Linear,
        Scale::Linear,
        &series,
    )
}
