//! Test objectives with exact gradients and structural metadata.
//!
//! Every objective is stored shifted so that its infimum is zero. Alongside
//! value and gradient each one declares the Lipschitz constant `L` of its
//! gradient, optionally a PL constant `K` (`|grad J|^2 >= K J`), a KL' bound
//! `psi` (`|grad J| >= psi(J)`) and the distance `rho` to its minimizer set.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::rng::SimRng;
use crate::{dot, norm, norm_sq, Error, Result};

/// A scalar map `eta: R+ -> R+` with `eta(0) = 0` whose infimum over every
/// interval `[eps, M]` with `eps > 0` is positive.
#[derive(Clone)]
pub struct ClassBFunction {
    name: String,
    map: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for ClassBFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassBFunction").field("name", &self.name).finish()
    }
}

impl ClassBFunction {
    pub fn new(name: impl Into<String>, map: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            map: Arc::new(map),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, r: f64) -> f64 {
        (self.map)(r)
    }

    /// Grid minimum of the map over `[eps, max]` using `resolution` evenly
    /// spaced points (endpoints included).
    pub fn grid_infimum(&self, eps: f64, max: f64, resolution: usize) -> f64 {
        let n = resolution.max(2);
        (0..n)
            .map(|i| self.eval(eps + (max - eps) * i as f64 / (n - 1) as f64))
            .fold(f64::INFINITY, f64::min)
    }

    /// Checks `eta(0) = 0` and a positive grid infimum on each `(eps, M)` pair.
    pub fn check(&self, pairs: &[(f64, f64)], resolution: usize) -> bool {
        self.eval(0.0) == 0.0
            && pairs
                .iter()
                .all(|&(eps, max)| eps > 0.0 && eps <= max && self.grid_infimum(eps, max, resolution) > 0.0)
    }
}

/// Differentiable objective with `inf J = 0`.
pub trait Objective: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn value(&self, theta: &[f64]) -> f64;

    fn gradient(&self, theta: &[f64], out: &mut [f64]);

    /// Lipschitz constant of the gradient.
    fn smoothness(&self) -> f64;

    /// PL constant, when the objective satisfies the PL inequality.
    fn pl_constant(&self) -> Option<f64> {
        None
    }

    /// KL' bound `psi` with `|grad J(theta)| >= psi(J(theta))`.
    fn kl_bound(&self) -> Option<ClassBFunction> {
        self.pl_constant()
            .map(|k| ClassBFunction::new(format!("sqrt({k} r)"), move |r: f64| (k * r.max(0.0)).sqrt()))
    }

    /// Whether the objective satisfies KL' (every PL objective does).
    fn satisfies_kl_prime(&self) -> bool {
        self.pl_constant().is_some()
    }

    /// Distance to the minimizer set, where that set is known exactly.
    fn distance_to_minimizers(&self, _theta: &[f64]) -> Option<f64> {
        None
    }

    fn as_finite_sum(&self) -> Option<&dyn FiniteSum> {
        None
    }

    fn gradient_vec(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.gradient(theta, &mut g);
        g
    }
}

/// Objectives of the form `(1/m) sum_i f_i(theta)` exposing per-sample
/// gradients for minibatch oracles.
pub trait FiniteSum {
    fn num_samples(&self) -> usize;

    fn sample_gradient(&self, index: usize, theta: &[f64], out: &mut [f64]);
}

/// `J = 0.5 theta^T A theta` with `A` symmetric positive definite.
#[derive(Clone, Debug)]
pub struct Quadratic {
    matrix: DMatrix<f64>,
    lambda_min: f64,
    lambda_max: f64,
}

impl Quadratic {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Config("quadratic matrix must be square and nonempty".into()));
        }
        let matrix = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
        if (0..d).any(|i| (0..d).any(|j| (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 * (1.0 + matrix[(i, j)].abs()))) {
            return Err(Error::Config("quadratic matrix must be symmetric".into()));
        }
        let eig = SymmetricEigen::new(matrix.clone());
        let lambda_min = eig.eigenvalues.min();
        let lambda_max = eig.eigenvalues.max();
        if !(lambda_min > 0.0) {
            return Err(Error::Config(format!(
                "quadratic matrix must be positive definite, smallest eigenvalue {lambda_min}"
            )));
        }
        Ok(Self {
            matrix,
            lambda_min,
            lambda_max,
        })
    }

    pub fn diagonal(spectrum: &[f64]) -> Result<Self> {
        let d = spectrum.len();
        Self::new(
            (0..d)
                .map(|i| (0..d).map(|j| if i == j { spectrum[i] } else { 0.0 }).collect())
                .collect(),
        )
    }

    pub fn identity(d: usize) -> Self {
        Self::diagonal(&vec![1.0; d]).expect("identity is positive definite")
    }

    pub fn eigenvalue_range(&self) -> (f64, f64) {
        (self.lambda_min, self.lambda_max)
    }
}

impl Objective for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.gradient(theta, &mut g);
        0.5 * dot(theta, &g)
    }

    fn gradient(&self, theta: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..d).map(|j| self.matrix[(i, j)] * theta[j]).sum();
        }
    }

    fn smoothness(&self) -> f64 {
        self.lambda_max
    }

    fn pl_constant(&self) -> Option<f64> {
        Some(2.0 * self.lambda_min)
    }

    fn distance_to_minimizers(&self, theta: &[f64]) -> Option<f64> {
        Some(norm(theta))
    }
}

/// Separable `sum_i theta_i^2 + sin^2 theta_i`: nonconvex, PL with `K = 1`.
///
/// `L = 4` is `sup |s''|` for `s(x) = x^2 + sin^2 x`, since
/// `s''(x) = 2 + 2 cos 2x`.
#[derive(Clone, Debug)]
pub struct SinSq {
    dim: usize,
}

impl SinSq {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        Ok(Self { dim })
    }
}

impl Objective for SinSq {
    fn name(&self) -> &str {
        "sin_sq"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .map(|&x| {
                let s = x.sin();
                x * x + s * s
            })
            .sum()
    }

    fn gradient(&self, theta: &[f64], out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(theta) {
            *o = 2.0 * x + (2.0 * x).sin();
        }
    }

    fn smoothness(&self) -> f64 {
        4.0
    }

    fn pl_constant(&self) -> Option<f64> {
        Some(1.0)
    }

    fn distance_to_minimizers(&self, theta: &[f64]) -> Option<f64> {
        Some(norm(theta))
    }
}

/// Even scalar function that satisfies KL' but not PL, extended to `d`
/// dimensions as a separable sum:
///
/// `g(x) = x^2 + 4 sin^2 x` for `|x| <= 5`, and past the seam a saturating
/// exponential `g(5) + g'(5)/2 (1 - exp(-2(|x| - 5)))` that keeps `g` C^1.
#[derive(Clone, Debug)]
pub struct KlPrimeExample {
    dim: usize,
}

pub const KL_SEAM: f64 = 5.0;

impl KlPrimeExample {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        Ok(Self { dim })
    }

    fn inner(x: f64) -> f64 {
        let s = x.sin();
        x * x + 4.0 * s * s
    }

    fn inner_derivative(x: f64) -> f64 {
        2.0 * x + 4.0 * (2.0 * x).sin()
    }

    pub fn scalar_value(x: f64) -> f64 {
        let a = x.abs();
        if a <= KL_SEAM {
            Self::inner(a)
        } else {
            Self::inner(KL_SEAM) + 0.5 * Self::inner_derivative(KL_SEAM) * (1.0 - (-2.0 * (a - KL_SEAM)).exp())
        }
    }

    pub fn scalar_derivative(x: f64) -> f64 {
        let a = x.abs();
        let d = if a <= KL_SEAM {
            Self::inner_derivative(a)
        } else {
            Self::inner_derivative(KL_SEAM) * (-2.0 * (a - KL_SEAM)).exp()
        };
        d.copysign(x)
    }

    /// Supremum of the scalar function (approached as `|x| -> inf`).
    pub fn scalar_supremum() -> f64 {
        Self::inner(KL_SEAM) + 0.5 * Self::inner_derivative(KL_SEAM)
    }

    /// The ratio `g'(x)^2 / g(x)` as a function of `x >= 0`, extended by 0 at
    /// the origin. Tends to zero at infinity but stays positive on every
    /// compact interval away from zero.
    pub fn ratio() -> ClassBFunction {
        ClassBFunction::new("g'(x)^2/g(x)", |x: f64| {
            if x == 0.0 {
                0.0
            } else {
                let d = Self::scalar_derivative(x);
                d * d / Self::scalar_value(x)
            }
        })
    }

    /// Inverse of `g` on `[0, inf)`, which is strictly increasing there.
    fn scalar_inverse(r: f64) -> f64 {
        let mut lo = 0.0;
        let mut hi = KL_SEAM;
        while Self::scalar_value(hi) < r {
            hi *= 2.0;
            if hi > 1e6 {
                return f64::INFINITY;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if Self::scalar_value(mid) < r {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

impl Objective for KlPrimeExample {
    fn name(&self) -> &str {
        "kl_prime"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, theta: &[f64]) -> f64 {
        theta.iter().map(|&x| Self::scalar_value(x)).sum()
    }

    fn gradient(&self, theta: &[f64], out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(theta) {
            *o = Self::scalar_derivative(x);
        }
    }

    /// `max(sup |g''| on [0, 5], 2 g'(5))`: the inner part has `g'' = 2 + 8 cos 2x`
    /// (sup 10) and the tail has `|g''| <= 2 g'(5)`.
    fn smoothness(&self) -> f64 {
        10f64.max(2.0 * Self::inner_derivative(KL_SEAM))
    }

    /// One-dimensional bound `psi(r) = |g'(g^-1(r))|`; for `d > 1` no closed
    /// form is provided.
    fn kl_bound(&self) -> Option<ClassBFunction> {
        (self.dim == 1).then(|| {
            ClassBFunction::new("|g'(g^-1(r))|", |r: f64| {
                if r <= 0.0 {
                    0.0
                } else {
                    let x = Self::scalar_inverse(r);
                    if x.is_finite() {
                        Self::scalar_derivative(x).abs()
                    } else {
                        0.0
                    }
                }
            })
        })
    }

    fn satisfies_kl_prime(&self) -> bool {
        true
    }

    fn distance_to_minimizers(&self, theta: &[f64]) -> Option<f64> {
        Some(norm(theta))
    }
}

/// Consistent least squares `J = (1/m) sum_i (y_i - <x_i, theta>)^2` with
/// Gaussian design and `y = X theta*`, so `J* = 0`.
#[derive(Clone, Debug)]
pub struct FiniteSumLs {
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
    solution: Vec<f64>,
    smoothness: f64,
    pl: f64,
}

impl FiniteSumLs {
    pub fn new(samples: usize, dim: usize, data_seed: u64) -> Result<Self> {
        if samples == 0 || dim == 0 {
            return Err(Error::Config("finite-sum least squares needs samples > 0 and dim > 0".into()));
        }
        let mut rng = SimRng::new(data_seed);
        let solution: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let features: Vec<Vec<f64>> = (0..samples).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
        let targets = features.iter().map(|x| dot(x, &solution)).collect();
        // Hessian (2/m) X^T X.
        let hessian = DMatrix::from_fn(dim, dim, |i, j| {
            2.0 / samples as f64 * features.iter().map(|x| x[i] * x[j]).sum::<f64>()
        });
        let eig = SymmetricEigen::new(hessian);
        let smoothness = eig.eigenvalues.max();
        let lambda_min = eig.eigenvalues.min();
        Ok(Self {
            features,
            targets,
            solution,
            smoothness,
            pl: 2.0 * lambda_min,
        })
    }

    pub fn solution(&self) -> &[f64] {
        &self.solution
    }

    fn residual(&self, i: usize, theta: &[f64]) -> f64 {
        self.targets[i] - dot(&self.features[i], theta)
    }

    /// PL holds with `K = 2 lambda_min(H)` when the design has full column rank.
    fn full_rank(&self) -> bool {
        self.pl > 1e-10 * self.smoothness
    }
}

impl Objective for FiniteSumLs {
    fn name(&self) -> &str {
        "finite_sum_ls"
    }

    fn dim(&self) -> usize {
        self.solution.len()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let m = self.targets.len();
        (0..m).map(|i| self.residual(i, theta).powi(2)).sum::<f64>() / m as f64
    }

    fn gradient(&self, theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let m = self.targets.len();
        for (i, x) in self.features.iter().enumerate() {
            let r = self.residual(i, theta);
            for (o, xi) in out.iter_mut().zip(x) {
                *o -= 2.0 * r * xi / m as f64;
            }
        }
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }

    fn pl_constant(&self) -> Option<f64> {
        self.full_rank().then_some(self.pl)
    }

    fn distance_to_minimizers(&self, theta: &[f64]) -> Option<f64> {
        self.full_rank().then(|| {
            theta
                .iter()
                .zip(&self.solution)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
    }

    fn as_finite_sum(&self) -> Option<&dyn FiniteSum> {
        Some(self)
    }
}

impl FiniteSum for FiniteSumLs {
    fn num_samples(&self) -> usize {
        self.targets.len()
    }

    fn sample_gradient(&self, index: usize, theta: &[f64], out: &mut [f64]) {
        let r = self.residual(index, theta);
        for (o, xi) in out.iter_mut().zip(&self.features[index]) {
            *o = -2.0 * r * xi;
        }
    }
}

/// `n` points drawn uniformly from `[-half_width, half_width]^d`.
pub fn sample_box(dim: usize, n: usize, half_width: f64, rng: &mut SimRng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| half_width * (2.0 * rng.uniform() - 1.0)).collect())
        .collect()
}

/// Outcome of checking an inequality on a sample of points.
#[derive(Clone, Debug, PartialEq)]
pub struct ViolationReport {
    /// Extreme signed margin (max of `lhs - rhs` for upper bounds, min of
    /// `lhs - rhs` for lower bounds).
    pub extreme_margin: f64,
    pub extreme_index: Option<usize>,
    pub violations: usize,
    pub checked: usize,
}

impl ViolationReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

const INEQUALITY_SLACK: f64 = 1e-9;

/// `|grad J|^2 <= 2 L J` at every point, up to `1e-9 (1 + 2 L J)`.
pub fn check_smoothness_bound(obj: &dyn Objective, points: &[Vec<f64>]) -> ViolationReport {
    let l = obj.smoothness();
    let mut g = vec![0.0; obj.dim()];
    let mut report = ViolationReport {
        extreme_margin: f64::NEG_INFINITY,
        extreme_index: None,
        violations: 0,
        checked: points.len(),
    };
    for (idx, p) in points.iter().enumerate() {
        obj.gradient(p, &mut g);
        let rhs = 2.0 * l * obj.value(p);
        let margin = norm_sq(&g) - rhs;
        if margin > report.extreme_margin {
            report.extreme_margin = margin;
            report.extreme_index = Some(idx);
        }
        if margin > INEQUALITY_SLACK * (1.0 + rhs) {
            report.violations += 1;
        }
    }
    report
}

/// `|grad J|^2 >= K J` at every point, up to `1e-9 (1 + K J)`.
pub fn check_pl(obj: &dyn Objective, points: &[Vec<f64>]) -> Result<ViolationReport> {
    let k = obj
        .pl_constant()
        .ok_or_else(|| Error::Usage(format!("objective {} declares no PL constant", obj.name())))?;
    let mut g = vec![0.0; obj.dim()];
    let mut report = ViolationReport {
        extreme_margin: f64::INFINITY,
        extreme_index: None,
        violations: 0,
        checked: points.len(),
    };
    for (idx, p) in points.iter().enumerate() {
        obj.gradient(p, &mut g);
        let rhs = k * obj.value(p);
        let margin = norm_sq(&g) - rhs;
        if margin < report.extreme_margin {
            report.extreme_margin = margin;
            report.extreme_index = Some(idx);
        }
        if margin < -INEQUALITY_SLACK * (1.0 + rhs) {
            report.violations += 1;
        }
    }
    Ok(report)
}

pub const FD_STEP: f64 = 1e-6;

/// Central-difference approximation of the gradient.
pub fn finite_difference_gradient(obj: &dyn Objective, theta: &[f64], step: f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + step;
            let up = obj.value(&probe);
            probe[i] = theta[i] - step;
            let down = obj.value(&probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest componentwise discrepancy `|fd_i - g_i| / max(1, |g_i|)` between
/// the analytic gradient and central differences with step `1e-6`.
pub fn check_gradient(obj: &dyn Objective, points: &[Vec<f64>]) -> f64 {
    let mut g = vec![0.0; obj.dim()];
    let mut worst: f64 = 0.0;
    for p in points {
        obj.gradient(p, &mut g);
        let fd = finite_difference_gradient(obj, p, FD_STEP);
        for (a, b) in g.iter().zip(&fd) {
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    worst
}
