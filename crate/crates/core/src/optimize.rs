//! Iteration engines: SGD `theta <- theta - alpha_t h`, stochastic
//! approximation `theta <- theta + alpha_t (f(theta) + xi)`, and the scalar
//! recursion that diverges under merely vanishing drift.

use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::objectives::{sample_box, ClassBFunction, Objective};
use crate::oracles::{BiasDirection, OracleSpec, Workspace};
use crate::rng::SimRng;
use crate::schedules::{PowerLawSchedule, Role, Sequence};
use crate::{dot, norm, norm_sq, Error, Result};

/// Iterates whose norm exceeds this are treated as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Which steps are written to the trajectory. Step 0 and the final step are
/// always recorded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStride {
    Every(u64),
    /// Record at `ceil(ratio^j)`, `j = 0, 1, ...`.
    Geometric(f64),
}

impl Default for RecordStride {
    fn default() -> Self {
        RecordStride::Geometric(1.05)
    }
}

impl RecordStride {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RecordStride::Every(0) => Err(Error::Config("record stride must be at least 1".into())),
            RecordStride::Geometric(r) if !(r.is_finite() && r > 1.0) => {
                Err(Error::Config(format!("geometric record ratio must exceed 1, got {r}")))
            }
            _ => Ok(()),
        }
    }
}

pub(crate) struct Recorder {
    stride: RecordStride,
    next: u64,
    power: f64,
}

impl Recorder {
    pub(crate) fn new(stride: RecordStride) -> Self {
        Self {
            stride,
            next: 0,
            power: 1.0,
        }
    }

    pub(crate) fn hit(&mut self, t: u64) -> bool {
        if t < self.next {
            return false;
        }
        match self.stride {
            RecordStride::Every(n) => self.next = t + n,
            RecordStride::Geometric(r) => {
                while self.power.ceil() <= t as f64 {
                    self.power *= r;
                }
                self.next = self.power.ceil() as u64;
            }
        }
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub t: u64,
    pub j: Option<f64>,
    pub grad_sq: Option<f64>,
    pub rho: Option<f64>,
    pub v: Option<f64>,
    pub evals: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    J,
    GradSq,
    Rho,
    /// `rho^2`; for SA runs this is `|theta|^2`.
    RhoSq,
    V,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    pub final_theta: Vec<f64>,
    /// Step at which the divergence guard fired; rows stop before it.
    pub diverged_at: Option<u64>,
    pub horizon: u64,
}

pub const TRAJECTORY_HEADER: &str = "t,J,grad_sq,rho,V,evals";

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

impl Trajectory {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn last(&self) -> Option<&TrajectoryRow> {
        self.rows.last()
    }

    /// `(t, value)` pairs for the column, skipping rows where it is absent.
    pub fn series(&self, column: Column) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| {
                let v = match column {
                    Column::J => r.j,
                    Column::GradSq => r.grad_sq,
                    Column::Rho => r.rho,
                    Column::RhoSq => r.rho.map(|x| x * x),
                    Column::V => r.v,
                }?;
                Some((r.t as f64, v))
            })
            .collect()
    }

    pub fn final_value(&self, column: Column) -> Option<f64> {
        self.series(column).last().map(|p| p.1)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{TRAJECTORY_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.t,
                fmt_opt(r.j),
                fmt_opt(r.grad_sq),
                fmt_opt(r.rho),
                fmt_opt(r.v),
                r.evals
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

/// All-ones direction scaled to norm 5.
pub fn default_theta0(dim: usize) -> Vec<f64> {
    vec![5.0 / (dim as f64).sqrt(); dim]
}

fn check_theta0(theta0: &[f64], dim: usize) -> Result<()> {
    if theta0.len() != dim {
        return Err(Error::Config(format!("theta0 has length {}, expected {dim}", theta0.len())));
    }
    if theta0.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config("theta0 must be finite".into()));
    }
    Ok(())
}

fn check_alpha(alpha: &PowerLawSchedule) -> Result<()> {
    if alpha.role() != Role::StepSize {
        return Err(Error::Config(format!("step size schedule has role {:?}", alpha.role())));
    }
    Ok(())
}

fn out_of_bounds(theta: &[f64]) -> bool {
    let n = norm(theta);
    !n.is_finite() || n > DIVERGENCE_NORM
}

#[derive(Clone)]
pub struct SgdRun<'a> {
    pub objective: &'a dyn Objective,
    pub oracle: &'a OracleSpec,
    pub alpha: PowerLawSchedule,
    pub theta0: Vec<f64>,
    pub horizon: u64,
    pub stride: RecordStride,
    pub seed: u64,
}

impl SgdRun<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        check_theta0(&self.theta0, self.objective.dim())?;
        check_alpha(&self.alpha)?;
        self.stride.validate()?;
        self.oracle.validate(self.objective.dim())
    }
}

pub fn run_sgd(run: &SgdRun) -> Result<Trajectory> {
    run.validate()?;
    let obj = run.objective;
    let d = obj.dim();
    let mut rng = SimRng::new(run.seed);
    let mut ws = Workspace::new(d);
    let mut theta = run.theta0.clone();
    let mut h = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut rec = Recorder::new(run.stride);
    let mut rows = Vec::new();
    let mut evals = 0u64;
    let mut diverged_at = None;

    let row = |t: u64, theta: &[f64], evals: u64, grad: &mut [f64]| {
        obj.gradient(theta, grad);
        TrajectoryRow {
            t,
            j: Some(obj.value(theta)),
            grad_sq: Some(norm_sq(grad)),
            rho: obj.distance_to_minimizers(theta),
            v: None,
            evals,
        }
    };

    for t in 0..run.horizon {
        if rec.hit(t) {
            rows.push(row(t, &theta, evals, &mut grad));
        }
        evals += run.oracle.sample_into(obj, &theta, t, &mut rng, &mut ws, &mut h)? as u64;
        let a = run.alpha.eval(t);
        for (x, hi) in theta.iter_mut().zip(&h) {
            *x -= a * hi;
        }
        if out_of_bounds(&theta) {
            diverged_at = Some(t + 1);
            break;
        }
    }
    if diverged_at.is_none() {
        rows.push(row(run.horizon, &theta, evals, &mut grad));
    }
    Ok(Trajectory {
        rows,
        final_theta: theta,
        diverged_at,
        horizon: run.horizon,
    })
}

/// How the mean field pulls towards the root: `<grad V, f> <= -c |theta|^2`
/// or `<grad V, f> <= -psi(|theta|)`.
#[derive(Clone, Debug)]
pub enum SaDecay {
    Quadratic(f64),
    ClassB(ClassBFunction),
}

type Field = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type Scalar = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Root-finding problem with a user-supplied Lyapunov function. The root is
/// at the origin.
#[derive(Clone)]
pub struct SaProblem {
    pub name: String,
    pub dim: usize,
    pub field: Field,
    pub lipschitz: f64,
    pub lyapunov: Scalar,
    pub lyapunov_grad: Field,
    pub a: f64,
    pub b: f64,
    pub decay: SaDecay,
}

impl std::fmt::Debug for SaProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SaProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("lipschitz", &self.lipschitz)
            .field("a", &self.a)
            .field("b", &self.b)
            .field("decay", &self.decay)
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaCatalog {
    /// `f = -theta`, `V = |theta|^2`.
    Linear,
    /// `f = -theta / (1 + |theta|)`, `V = |theta|^2`.
    Saturating,
}

fn sq_lyapunov() -> (Scalar, Field) {
    (
        Arc::new(|x: &[f64]| norm_sq(x)),
        Arc::new(|x: &[f64], out: &mut [f64]| {
            for (o, xi) in out.iter_mut().zip(x) {
                *o = 2.0 * xi;
            }
        }),
    )
}

impl SaProblem {
    pub fn catalog(kind: SaCatalog, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        let (lyapunov, lyapunov_grad) = sq_lyapunov();
        Ok(match kind {
            SaCatalog::Linear => SaProblem {
                name: "linear".into(),
                dim,
                field: Arc::new(|x: &[f64], out: &mut [f64]| {
                    for (o, xi) in out.iter_mut().zip(x) {
                        *o = -xi;
                    }
                }),
                lipschitz: 1.0,
                lyapunov,
                lyapunov_grad,
                a: 1.0,
                b: 1.0,
                decay: SaDecay::Quadratic(2.0),
            },
            SaCatalog::Saturating => SaProblem {
                name: "saturating".into(),
                dim,
                field: Arc::new(|x: &[f64], out: &mut [f64]| {
                    let s = 1.0 + norm(x);
                    for (o, xi) in out.iter_mut().zip(x) {
                        *o = -xi / s;
                    }
                }),
                lipschitz: 1.0,
                lyapunov,
                lyapunov_grad,
                a: 1.0,
                b: 1.0,
                decay: SaDecay::ClassB(ClassBFunction::new("2r^2/(1+r)", |r| 2.0 * r * r / (1.0 + r))),
            },
        })
    }

    pub fn field_vec(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.field)(theta, &mut out);
        out
    }

    /// Checks the root, Lipschitz, sandwich and decay conditions on the
    /// given points (and on consecutive pairs for the Lipschitz bound).
    pub fn verify(&self, points: &[Vec<f64>]) -> Result<()> {
        let tol = 1e-12;
        let zero = vec![0.0; self.dim];
        if norm(&self.field_vec(&zero)) > tol {
            return Err(Error::Config(format!("{}: f(0) != 0", self.name)));
        }
        let mut gv = vec![0.0; self.dim];
        for (i, p) in points.iter().enumerate() {
            let r2 = norm_sq(p);
            let v = (self.lyapunov)(p);
            let slack = tol * (1.0 + v.abs() + r2);
            if v < self.a * r2 - slack || v > self.b * r2 + slack {
                return Err(Error::Config(format!(
                    "{}: a|theta|^2 <= V <= b|theta|^2 fails at point {i}",
                    self.name
                )));
            }
            let f = self.field_vec(p);
            (self.lyapunov_grad)(p, &mut gv);
            let inner = dot(&gv, &f);
            let bound = match &self.decay {
                SaDecay::Quadratic(c) => -c * r2,
                SaDecay::ClassB(psi) => -psi.eval(r2.sqrt()),
            };
            if inner > bound + tol * (1.0 + inner.abs()) {
                return Err(Error::Config(format!("{}: decay condition fails at point {i}", self.name)));
            }
            if i > 0 {
                let q = &points[i - 1];
                let df: Vec<f64> = f.iter().zip(self.field_vec(q)).map(|(a, b)| a - b).collect();
                let dx: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
                if norm(&df) > self.lipschitz * norm(&dx) * (1.0 + tol) + tol {
                    return Err(Error::Config(format!(
                        "{}: Lipschitz bound S = {} fails between points {} and {i}",
                        self.name,
                        self.lipschitz,
                        i - 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Additive SA noise. The bias has norm exactly `mu_t (1 + |theta|)`; the
/// zero-mean part has second moment `M_t^2 (1 + |theta|^2)` split evenly
/// over components. `AlongGradient` points the bias along `-f(theta)`,
/// i.e. away from the root.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaNoise {
    #[serde(default)]
    pub bias: Option<PowerLawSchedule>,
    #[serde(default)]
    pub bias_direction: BiasDirection,
    #[serde(default)]
    pub std: Option<PowerLawSchedule>,
}

impl SaNoise {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Some(b) = &self.bias {
            if b.role() != Role::BiasBound {
                return Err(Error::Config(format!("SA bias schedule has role {:?}", b.role())));
            }
        }
        if let Some(m) = &self.std {
            if m.role() != Role::StdDevBound {
                return Err(Error::Config(format!("SA noise schedule has role {:?}", m.role())));
            }
        }
        self.bias_direction.validate(dim)
    }
}

#[derive(Clone, Debug)]
pub struct SaRun<'a> {
    pub problem: &'a SaProblem,
    pub noise: SaNoise,
    pub alpha: PowerLawSchedule,
    pub theta0: Vec<f64>,
    pub horizon: u64,
    pub stride: RecordStride,
    pub seed: u64,
}

/// Points used to certify an SA problem before a run: a box twice the size
/// of the initial point, from a fixed stream.
pub fn sa_certification_points(dim: usize, theta0: &[f64]) -> Vec<Vec<f64>> {
    let mut rng = SimRng::new(0x5a_5a_5a);
    sample_box(dim, 256, 2.0 * norm(theta0) + 1.0, &mut rng)
}

pub fn run_sa(run: &SaRun) -> Result<Trajectory> {
    let p = run.problem;
    let d = p.dim;
    if run.horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    check_theta0(&run.theta0, d)?;
    check_alpha(&run.alpha)?;
    run.stride.validate()?;
    run.noise.validate(d)?;
    p.verify(&sa_certification_points(d, &run.theta0))?;

    let mut rng = SimRng::new(run.seed);
    let mut theta = run.theta0.clone();
    let mut f = vec![0.0; d];
    let mut dir = vec![0.0; d];
    let mut neg_f = vec![0.0; d];
    let mut rec = Recorder::new(run.stride);
    let mut rows = Vec::new();
    let mut diverged_at = None;
    let row = |t: u64, theta: &[f64]| TrajectoryRow {
        t,
        j: None,
        grad_sq: None,
        rho: Some(norm(theta)),
        v: Some((p.lyapunov)(theta)),
        evals: t,
    };

    for t in 0..run.horizon {
        if rec.hit(t) {
            rows.push(row(t, &theta));
        }
        (p.field)(&theta, &mut f);
        let r = norm(&theta);
        if let Some(mu) = &run.noise.bias {
            let size = mu.eval(t) * (1.0 + r);
            for (n, fi) in neg_f.iter_mut().zip(&f) {
                *n = -fi;
            }
            run.noise.bias_direction.unit(&neg_f, &mut dir);
            for (fi, di) in f.iter_mut().zip(&dir) {
                *fi += size * di;
            }
        }
        if let Some(m) = &run.noise.std {
            let std = m.eval(t) * ((1.0 + r * r) / d as f64).sqrt();
            for fi in f.iter_mut() {
                *fi += std * rng.normal();
            }
        }
        let a = run.alpha.eval(t);
        for (x, fi) in theta.iter_mut().zip(&f) {
            *x += a * fi;
        }
        if out_of_bounds(&theta) {
            diverged_at = Some(t + 1);
            break;
        }
    }
    if diverged_at.is_none() {
        rows.push(row(run.horizon, &theta));
    }
    Ok(Trajectory {
        rows,
        final_theta: theta,
        diverged_at,
        horizon: run.horizon,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CounterexampleRow {
    pub t: u64,
    pub theta: f64,
    /// `sum_{k<t} alpha_k beta_k`.
    pub lower_bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterexampleTrace {
    pub rows: Vec<CounterexampleRow>,
    pub final_theta: f64,
    pub final_lower_bound: f64,
    /// First step at which `theta` overflowed and was clamped to `f64::MAX`.
    pub saturated_at: Option<u64>,
}

impl CounterexampleTrace {
    /// True when `theta_t >= lower_bound_t` on every recorded row.
    pub fn lower_bound_holds(&self) -> bool {
        self.rows.iter().all(|r| r.theta >= r.lower_bound) && self.final_theta >= self.final_lower_bound
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,theta,lower_bound\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:e},{:e}\n", r.t, r.theta, r.lower_bound));
        }
        s
    }
}

/// `theta_{t+1} = (1 + alpha_t) theta_t + alpha_t beta_t`.
pub fn run_divergence_counterexample(
    alpha: &PowerLawSchedule,
    beta: &Sequence,
    theta0: f64,
    horizon: u64,
    stride: RecordStride,
) -> Result<CounterexampleTrace> {
    check_alpha(alpha)?;
    beta.validate()?;
    stride.validate()?;
    if !(theta0.is_finite() && theta0 >= 0.0) {
        return Err(Error::Config(format!("theta0 must be finite and >= 0, got {theta0}")));
    }
    let mut theta = theta0;
    let mut bound = 0.0;
    let mut saturated_at = None;
    let mut rec = Recorder::new(stride);
    let mut rows = Vec::new();
    for t in 0..horizon {
        if rec.hit(t) {
            rows.push(CounterexampleRow {
                t,
                theta,
                lower_bound: bound,
            });
        }
        let a = alpha.eval(t);
        let b = beta.value(t);
        if !(b >= 0.0) {
            return Err(Error::Config(format!("beta_{t} = {b} is negative")));
        }
        let drive = a * b;
        theta = (1.0 + a) * theta + drive;
        bound += drive;
        if !theta.is_finite() {
            theta = f64::MAX;
            saturated_at.get_or_insert(t + 1);
        }
    }
    rows.push(CounterexampleRow {
        t: horizon,
        theta,
        lower_bound: bound,
    });
    Ok(CounterexampleTrace {
        rows,
        final_theta: theta,
        final_lower_bound: bound,
        saturated_at,
    })
}
