//! Power-law sequences and analytic summability classifiers.
//!
//! Every deterministic sequence in the laboratory (step sizes, bias and
//! standard-deviation envelopes, finite-difference increments, drift terms)
//! is a [`PowerLawSchedule`] `scale * (t + offset)^(-exponent)`. Whether a
//! series built from schedules converges is decided from the exponents alone
//! (p-series and Bertrand-series tests), never from partial sums.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// What a schedule is used for. Operations that need a particular kind of
/// sequence check the role and reject mismatches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    StepSize,
    BiasBound,
    StdDevBound,
    Increment,
    Drift,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct PowerLawSchedule {
    scale: f64,
    exponent: f64,
    offset: u64,
    role: Role,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    scale: f64,
    exponent: f64,
    offset: u64,
    role: Role,
}

impl TryFrom<RawSchedule> for PowerLawSchedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        PowerLawSchedule::new(raw.scale, raw.exponent, raw.offset, raw.role)
    }
}

impl From<PowerLawSchedule> for RawSchedule {
    fn from(s: PowerLawSchedule) -> Self {
        RawSchedule {
            scale: s.scale,
            exponent: s.exponent,
            offset: s.offset,
            role: s.role,
        }
    }
}

impl PowerLawSchedule {
    pub fn new(scale: f64, exponent: f64, offset: u64, role: Role) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("schedule scale must be positive and finite, got {scale}")));
        }
        if !exponent.is_finite() {
            return Err(Error::Config(format!("schedule exponent must be finite, got {exponent}")));
        }
        if offset < 1 {
            return Err(Error::Config("schedule offset must be at least 1".into()));
        }
        Ok(Self {
            scale,
            exponent,
            offset,
            role,
        })
    }

    /// `scale` for every `t`.
    pub fn constant(scale: f64, role: Role) -> Result<Self> {
        Self::new(scale, 0.0, 1, role)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_exponent(&self, exponent: f64) -> Result<Self> {
        Self::new(self.scale, exponent, self.offset, self.role)
    }

    pub fn with_role(&self, role: Role) -> Self {
        Self { role, ..*self }
    }

    pub fn eval(&self, t: u64) -> f64 {
        let base = t.saturating_add(self.offset) as f64;
        if self.exponent == 0.0 {
            self.scale
        } else {
            self.scale * base.powf(-self.exponent)
        }
    }

    pub fn asymptotic(&self) -> Asymptotic {
        Asymptotic {
            power: self.exponent,
            log_power: 0.0,
        }
    }

    fn expect_role(&self, role: Role, what: &str) -> Result<()> {
        if self.role == role {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "{what} must have role {role:?}, got {:?}",
                self.role
            )))
        }
    }
}

/// Decay class `t^(-power) * (ln t)^(-log_power)` of a positive sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Asymptotic {
    pub power: f64,
    pub log_power: f64,
}

impl Asymptotic {
    pub const ZERO_SEQUENCE: Asymptotic = Asymptotic {
        power: f64::INFINITY,
        log_power: 0.0,
    };

    pub fn times(self, other: Asymptotic) -> Asymptotic {
        Asymptotic {
            power: self.power + other.power,
            log_power: self.log_power + other.log_power,
        }
    }

    pub fn powi(self, n: i32) -> Asymptotic {
        Asymptotic {
            power: self.power * n as f64,
            log_power: self.log_power * n as f64,
        }
    }

    /// Bertrand test: the series converges iff `power > 1`, or
    /// `power == 1` and `log_power > 1`.
    pub fn is_summable(self) -> bool {
        self.power > 1.0 || (self.power == 1.0 && self.log_power > 1.0)
    }
}

impl std::fmt::Display for Asymptotic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.power.is_infinite() {
            return f.write_str("0");
        }
        write!(f, "t^-{}", self.power)?;
        if self.log_power != 0.0 {
            write!(f, " (ln t)^-{}", self.log_power)?;
        }
        Ok(())
    }
}

/// Nonnegative deterministic sequence. Covers the power laws plus the
/// inverse-logarithm drift of the divergence counterexample, and products
/// of those.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Sequence {
    Zero,
    PowerLaw { schedule: PowerLawSchedule },
    /// `scale / ln(t + offset)`, with `offset >= 2`.
    InverseLog { scale: f64, offset: u64 },
    Product { factors: Vec<Sequence> },
}

impl Sequence {
    pub fn power_law(schedule: PowerLawSchedule) -> Self {
        Sequence::PowerLaw { schedule }
    }

    pub fn inverse_log(scale: f64, offset: u64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) || offset < 2 {
            return Err(Error::Config(format!(
                "inverse-log sequence needs scale >= 0 and offset >= 2, got ({scale}, {offset})"
            )));
        }
        Ok(Sequence::InverseLog { scale, offset })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Sequence::InverseLog { scale, offset } => Sequence::inverse_log(*scale, *offset).map(|_| ()),
            Sequence::Product { factors } => factors.iter().try_for_each(Sequence::validate),
            _ => Ok(()),
        }
    }

    pub fn value(&self, t: u64) -> f64 {
        match self {
            Sequence::Zero => 0.0,
            Sequence::PowerLaw { schedule } => schedule.eval(t),
            Sequence::InverseLog { scale, offset } => scale / (t.saturating_add(*offset) as f64).ln(),
            Sequence::Product { factors } => factors.iter().map(|f| f.value(t)).product(),
        }
    }

    pub fn asymptotic(&self) -> Asymptotic {
        match self {
            Sequence::Zero => Asymptotic::ZERO_SEQUENCE,
            Sequence::PowerLaw { schedule } => schedule.asymptotic(),
            Sequence::InverseLog { scale, .. } if *scale == 0.0 => Asymptotic::ZERO_SEQUENCE,
            Sequence::InverseLog { .. } => Asymptotic {
                power: 0.0,
                log_power: 1.0,
            },
            Sequence::Product { factors } => factors.iter().fold(
                Asymptotic {
                    power: 0.0,
                    log_power: 0.0,
                },
                |acc, f| acc.times(f.asymptotic()),
            ),
        }
    }

    pub fn is_summable(&self) -> bool {
        self.asymptotic().is_summable()
    }
}

/// One named summability verdict and the exponent arithmetic behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub name: &'static str,
    pub holds: bool,
    pub criterion: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConditionReport {
    pub conditions: Vec<Condition>,
}

impl ConditionReport {
    fn push(&mut self, name: &'static str, holds: bool, criterion: String) {
        self.conditions.push(Condition {
            name,
            holds,
            criterion,
        });
    }

    pub fn all_hold(&self) -> bool {
        self.conditions.iter().all(|c| c.holds)
    }

    pub fn get(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn holds(&self, name: &str) -> bool {
        self.get(name).is_some_and(|c| c.holds)
    }

    pub fn failed(&self) -> impl Iterator<Item = &Condition> {
        self.conditions.iter().filter(|c| !c.holds)
    }
}

pub const SUM_ALPHA_SQ_FINITE: &str = "sum_alpha_sq_finite";
pub const SUM_ALPHA_INFINITE: &str = "sum_alpha_infinite";
pub const SUM_ALPHA_MU_FINITE: &str = "sum_alpha_mu_finite";
pub const SUM_ALPHA_SQ_M_SQ_FINITE: &str = "sum_alpha_sq_m_sq_finite";

/// Robbins-Monro conditions: square-summable but not summable.
pub fn check_rm_conditions(alpha: &PowerLawSchedule) -> Result<ConditionReport> {
    alpha.expect_role(Role::StepSize, "step-size schedule")?;
    let p = alpha.exponent;
    let mut report = ConditionReport::default();
    report.push(
        SUM_ALPHA_SQ_FINITE,
        2.0 * p > 1.0,
        format!("2p = {} {} 1", 2.0 * p, cmp_symbol(2.0 * p > 1.0)),
    );
    report.push(
        SUM_ALPHA_INFINITE,
        p <= 1.0,
        format!("p = {p} {} 1", if p <= 1.0 { "<=" } else { ">" }),
    );
    Ok(report)
}

/// The four step-size conditions for biased SGD (and, with the same
/// criteria, for stochastic approximation):
/// `sum a^2 < inf`, `sum a*mu < inf`, `sum a^2 M^2 < inf`, `sum a = inf`.
///
/// `None` for `mu` or `m` means the sequence is identically zero.
pub fn check_sgd_conditions(
    alpha: &PowerLawSchedule,
    mu: Option<&PowerLawSchedule>,
    m: Option<&PowerLawSchedule>,
) -> Result<ConditionReport> {
    alpha.expect_role(Role::StepSize, "step-size schedule")?;
    if let Some(mu) = mu {
        mu.expect_role(Role::BiasBound, "bias bound")?;
    }
    if let Some(m) = m {
        m.expect_role(Role::StdDevBound, "standard-deviation bound")?;
    }
    let p = alpha.exponent;
    let mut report = ConditionReport::default();
    report.push(
        SUM_ALPHA_SQ_FINITE,
        2.0 * p > 1.0,
        format!("2p = {} {} 1", 2.0 * p, cmp_symbol(2.0 * p > 1.0)),
    );
    match mu {
        Some(mu) => {
            let e = p + mu.exponent;
            report.push(
                SUM_ALPHA_MU_FINITE,
                e > 1.0,
                format!("p + gamma = {e} {} 1", cmp_symbol(e > 1.0)),
            );
        }
        None => report.push(SUM_ALPHA_MU_FINITE, true, "mu = 0".into()),
    }
    let delta = m.map_or(0.0, |m| -m.exponent);
    let e = 2.0 * (p - delta);
    report.push(
        SUM_ALPHA_SQ_M_SQ_FINITE,
        e > 1.0,
        format!("2(p - delta) = {e} {} 1", cmp_symbol(e > 1.0)),
    );
    report.push(
        SUM_ALPHA_INFINITE,
        p <= 1.0,
        format!("p = {p} {} 1", if p <= 1.0 { "<=" } else { ">" }),
    );
    Ok(report)
}

fn cmp_symbol(greater: bool) -> &'static str {
    if greater {
        ">"
    } else {
        "<="
    }
}

/// Exponents entering the rate bound: step size `O(t^-(1-phi))`, bias
/// `O(t^-gamma)`, standard deviation `O(t^delta)`. With exact power laws the
/// lower-envelope constant `C` coincides with `phi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateExponents {
    pub phi: f64,
    pub delta: f64,
    pub gamma: f64,
    pub c: f64,
    pub nu: f64,
}

impl RateExponents {
    pub fn new(phi: f64, delta: f64, gamma: f64) -> Result<Self> {
        let nu = predict_rate(phi, delta, gamma)?;
        Ok(Self {
            phi,
            delta,
            gamma,
            c: phi,
            nu,
        })
    }
}

/// `nu = min{1 - 2(phi + delta), gamma - phi}`.
///
/// Requires `0 <= phi < min{0.5 - delta, gamma}`; `phi = 0` is accepted as the
/// limiting value of the bound.
pub fn predict_rate(phi: f64, delta: f64, gamma: f64) -> Result<f64> {
    if !(phi.is_finite() && delta.is_finite() && gamma.is_finite()) {
        return Err(Error::Domain("rate exponents must be finite".into()));
    }
    if delta < 0.0 {
        return Err(Error::Domain(format!("delta = {delta} must be >= 0")));
    }
    if gamma <= 0.0 {
        return Err(Error::Domain(format!("gamma = {gamma} must be > 0")));
    }
    if phi < 0.0 {
        return Err(Error::Domain(format!("phi = {phi} must be >= 0")));
    }
    if phi >= 0.5 - delta {
        return Err(Error::Domain(format!(
            "phi = {phi} violates phi < 0.5 - delta = {}",
            0.5 - delta
        )));
    }
    if phi >= gamma {
        return Err(Error::Domain(format!("phi = {phi} violates phi < gamma = {gamma}")));
    }
    Ok((1.0 - 2.0 * (phi + delta)).min(gamma - phi))
}

/// Increment exponent `s = (1 - phi)/(k + 2)` balancing the two terms of the
/// rate bound for an order-`k` finite-difference oracle (bias `O(c^k)`,
/// standard deviation `O(1/c)`), and the resulting `nu`.
pub fn optimal_spsa_exponent(k: u32, phi: f64) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::Domain("order k must be at least 1".into()));
    }
    let s = (1.0 - phi) / (k as f64 + 2.0);
    let nu = predict_rate(phi, s, k as f64 * s)?;
    Ok((s, nu))
}

/// Partial sum `sum_{t < n} value(t)`. Advisory numeric companion to the
/// analytic classifiers; see the tests for the exponent range over which the
/// `S(10^6) > 10 S(10^4)` heuristic agrees with the p-series test.
pub fn partial_sum(schedule: &PowerLawSchedule, n: u64) -> f64 {
    // Kahan summation keeps 10^6-term sums accurate to a few ulps.
    let mut sum = 0.0;
    let mut comp = 0.0;
    for t in 0..n {
        let y = schedule.eval(t) - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(scale: f64, p: f64) -> PowerLawSchedule {
        PowerLawSchedule::new(scale, p, 1, Role::StepSize).unwrap()
    }

    #[test]
    fn eval_examples() {
        assert_eq!(step(1.0, 1.0).eval(0), 1.0);
        assert!((step(1.0, 2.0 / 3.0).eval(7) - 0.25).abs() < 1e-15);
        let c = step(2.0, 0.0);
        for t in [0, 1, 100, 1 << 40] {
            assert_eq!(c.eval(t), 2.0);
        }
        assert!(step(1.0, 1.0).eval(1 << 53) > 0.0);
    }

    #[test]
    fn construction_rejects_bad_parameters() {
        assert!(PowerLawSchedule::new(0.0, 1.0, 1, Role::StepSize).is_err());
        assert!(PowerLawSchedule::new(-1.0, 1.0, 1, Role::StepSize).is_err());
        assert!(PowerLawSchedule::new(1.0, 1.0, 0, Role::StepSize).is_err());
        assert!(PowerLawSchedule::new(1.0, f64::NAN, 1, Role::StepSize).is_err());
    }

    #[test]
    fn rm_conditions() {
        let r = check_rm_conditions(&step(1.0, 1.0)).unwrap();
        assert!(r.all_hold());
        let r = check_rm_conditions(&step(1.0, 0.4)).unwrap();
        assert!(!r.holds(SUM_ALPHA_SQ_FINITE));
        assert!(r.holds(SUM_ALPHA_INFINITE));
        let r = check_rm_conditions(&step(1.0, 1.1)).unwrap();
        assert!(r.holds(SUM_ALPHA_SQ_FINITE));
        assert!(!r.holds(SUM_ALPHA_INFINITE));
    }

    #[test]
    fn rm_conditions_reject_wrong_role() {
        let s = PowerLawSchedule::new(1.0, 1.0, 1, Role::Increment).unwrap();
        assert!(matches!(check_rm_conditions(&s), Err(Error::Usage(_))));
    }

    fn bias(gamma: f64) -> PowerLawSchedule {
        PowerLawSchedule::new(1.0, gamma, 1, Role::BiasBound).unwrap()
    }

    fn std_dev(delta: f64) -> PowerLawSchedule {
        PowerLawSchedule::new(1.0, -delta, 1, Role::StdDevBound).unwrap()
    }

    #[test]
    fn sgd_conditions() {
        let r = check_sgd_conditions(&step(1.0, 1.0), Some(&bias(1.0)), Some(&std_dev(0.0))).unwrap();
        assert!(r.all_hold());
        assert_eq!(r.conditions.len(), 4);

        let r = check_sgd_conditions(&step(1.0, 0.6), Some(&bias(0.3)), Some(&std_dev(0.0))).unwrap();
        assert!(!r.holds(SUM_ALPHA_MU_FINITE));
        assert_eq!(r.failed().count(), 1);

        let r = check_sgd_conditions(&step(1.0, 0.95), Some(&bias(1.0 / 3.0)), Some(&std_dev(1.0 / 3.0))).unwrap();
        assert!(r.all_hold(), "{r:?}");
    }

    #[test]
    fn sgd_conditions_reject_wrong_roles() {
        let a = step(1.0, 1.0);
        assert!(check_sgd_conditions(&a, Some(&std_dev(0.0)), None).is_err());
        assert!(check_sgd_conditions(&a, None, Some(&bias(1.0))).is_err());
        assert!(check_sgd_conditions(&bias(1.0), None, None).is_err());
    }

    #[test]
    fn predict_rate_examples() {
        let nu = predict_rate(1e-9, 0.0, 1.0).unwrap();
        assert!((nu - 1.0).abs() < 1e-8);
        let nu = predict_rate(0.0, 1.0 / 3.0, 1.0 / 3.0).unwrap();
        assert!((nu - 1.0 / 3.0).abs() < 1e-15);
        let nu = predict_rate(0.1, 0.2, 0.5).unwrap();
        assert!((nu - 0.4).abs() < 1e-15);
    }

    #[test]
    fn predict_rate_names_violated_bound() {
        let e = predict_rate(0.3, 0.25, 1.0).unwrap_err();
        assert!(e.to_string().contains("0.5 - delta"), "{e}");
        let e = predict_rate(0.2, 0.0, 0.1).unwrap_err();
        assert!(e.to_string().contains("gamma"), "{e}");
        assert!(predict_rate(-0.1, 0.0, 1.0).is_err());
    }

    #[test]
    fn optimal_spsa_examples() {
        let (s, nu) = optimal_spsa_exponent(1, 0.0).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-15 && (nu - 1.0 / 3.0).abs() < 1e-15);
        let (s, nu) = optimal_spsa_exponent(2, 0.0).unwrap();
        assert!((s - 0.25).abs() < 1e-15 && (nu - 0.5).abs() < 1e-15);
        let (_, nu) = optimal_spsa_exponent(100, 0.0).unwrap();
        assert!((nu - 100.0 / 102.0).abs() < 1e-12);
        assert!(optimal_spsa_exponent(0, 0.0).is_err());
    }

    #[test]
    fn optimal_spsa_matches_grid_search() {
        // Oracle: brute-force maximization of min{1 - 2s, k s} over s in [0, 0.5].
        for k in 1..=6u32 {
            let mut best = (f64::NEG_INFINITY, 0.0);
            for i in 0..=5000 {
                let s = i as f64 * 1e-4;
                let v = (1.0 - 2.0 * s).min(k as f64 * s);
                if v > best.0 {
                    best = (v, s);
                }
            }
            let (s, nu) = optimal_spsa_exponent(k, 0.0).unwrap();
            assert!((nu - best.0).abs() <= 2.0 * k as f64 * 1e-4, "k={k}: {nu} vs {}", best.0);
            assert!((s - best.1).abs() <= 1e-4, "k={k}: {s} vs {}", best.1);
        }
    }

    #[test]
    fn partial_sums_agree_with_classifier_in_documented_range() {
        // The 10x growth heuristic separates divergent p <= 0.45 from
        // convergent p >= 1.05; in 0.45 < p <= 1 the divergence is too slow to
        // show up within 10^6 terms.
        for p in [0.0, 0.2, 0.45, 1.05, 1.5, 2.0, 3.0] {
            let s = step(1.0, p);
            let divergent = !s.asymptotic().is_summable();
            let grew = partial_sum(&s, 1_000_000) > 10.0 * partial_sum(&s, 10_000);
            assert_eq!(divergent, grew, "p = {p}");
        }
    }

    #[test]
    fn bertrand_classification() {
        let alpha = Sequence::power_law(step(1.0, 1.0));
        let beta = Sequence::inverse_log(1.0, 2).unwrap();
        let prod = Sequence::Product {
            factors: vec![alpha.clone(), beta.clone()],
        };
        assert!(!prod.is_summable());
        let beta_sq = Sequence::Product {
            factors: vec![alpha, beta.clone(), beta],
        };
        assert!(beta_sq.is_summable());
        assert!(Asymptotic { power: 1.0, log_power: 2.0 }.is_summable());
        assert!(Sequence::Zero.is_summable());
    }

    #[test]
    fn schedule_serde_round_trip_and_validation() {
        let json = r#"{"scale":0.5,"exponent":0.9,"offset":2,"role":"step_size"}"#;
        let s: PowerLawSchedule = serde_json::from_str(json).unwrap();
        assert_eq!(s, PowerLawSchedule::new(0.5, 0.9, 2, Role::StepSize).unwrap());
        assert_eq!(serde_json::to_string(&s).unwrap(), json);
        let bad = r#"{"scale":0.5,"exponent":0.9,"offset":0,"role":"step_size"}"#;
        assert!(serde_json::from_str::<PowerLawSchedule>(bad).is_err());
        let unknown = r#"{"scale":0.5,"exponent":0.9,"offset":1,"role":"step_size","x":1}"#;
        assert!(serde_json::from_str::<PowerLawSchedule>(unknown).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn eval_positive_and_monotone(scale in 1e-3..1e3f64, p in 0.0..3.0f64, t0 in 1u64..100, t in 0u64..1_000_000) {
                let s = PowerLawSchedule::new(scale, p, t0, Role::StepSize).unwrap();
                let a = s.eval(t);
                let b = s.eval(t + 1);
                prop_assert!(a > 0.0 && b > 0.0);
                if p > 0.0 { prop_assert!(b < a); } else { prop_assert_eq!(a, b); }
            }

            #[test]
            fn predict_rate_monotonicity(phi in 0.0..0.1f64, delta in 0.0..0.2f64, gamma in 0.15..1.5f64, eps in 1e-4..0.05f64) {
                let base = predict_rate(phi, delta, gamma).unwrap();
                if let Ok(v) = predict_rate(phi + eps, delta, gamma) { prop_assert!(v <= base); }
                if let Ok(v) = predict_rate(phi, delta + eps, gamma) { prop_assert!(v <= base); }
                let v = predict_rate(phi, delta, gamma + eps).unwrap();
                prop_assert!(v >= base);
            }
        }
    }
}
