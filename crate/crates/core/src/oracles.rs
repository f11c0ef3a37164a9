//! Stochastic-gradient oracles.
//!
//! An oracle maps `(theta, t, rng)` to a search direction `h` whose
//! conditional mean `z = E_t h` may differ from `grad J(theta)` by a bias
//! `x = z - grad J` and whose fluctuation `h - z` may have unbounded variance.
//! Each oracle reports its evaluation cost and its declared bias and
//! standard-deviation envelopes.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::objectives::Objective;
use crate::rng::SimRng;
use crate::schedules::{PowerLawSchedule, Role};
use crate::{norm, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Gaussian,
    Uniform,
}

/// Mean-zero additive measurement noise with standard deviation `std`,
/// drawn independently per evaluation and per component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    #[serde(default)]
    pub std: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::none()
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            std: 0.0,
        }
    }

    pub fn gaussian(std: f64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            std,
        }
    }

    pub fn uniform(std: f64) -> Self {
        Self {
            kind: NoiseKind::Uniform,
            std,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.std.is_finite() && self.std >= 0.0) {
            return Err(Error::Config(format!("noise std must be finite and >= 0, got {}", self.std)));
        }
        Ok(())
    }

    pub fn variance(&self) -> f64 {
        match self.kind {
            NoiseKind::None => 0.0,
            _ => self.std * self.std,
        }
    }

    pub fn draw(&self, rng: &mut SimRng) -> f64 {
        match self.kind {
            NoiseKind::None => 0.0,
            NoiseKind::Gaussian => self.std * rng.normal(),
            NoiseKind::Uniform => self.std * 3f64.sqrt() * (2.0 * rng.uniform() - 1.0),
        }
    }
}

/// Direction of the injected bias in [`OracleSpec::ExactNoisy`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", deny_unknown_fields)]
pub enum BiasDirection {
    /// A fixed vector, normalized to unit length on use.
    Fixed { direction: Vec<f64> },
    /// `grad J / |grad J|`, falling back to the first basis vector at
    /// stationary points.
    #[default]
    AlongGradient,
}

impl BiasDirection {
    pub(crate) fn validate(&self, dim: usize) -> Result<()> {
        if let BiasDirection::Fixed { direction } = self {
            if direction.len() != dim {
                return Err(Error::Config(format!(
                    "bias direction has length {}, expected {dim}",
                    direction.len()
                )));
            }
            let n = norm(direction);
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::Config("bias direction must be a nonzero finite vector".into()));
            }
        }
        Ok(())
    }

    /// Writes the unit direction into `out`; `reference` is the vector the
    /// adaptive policy aligns with.
    pub(crate) fn unit(&self, reference: &[f64], out: &mut [f64]) {
        let (src, n) = match self {
            BiasDirection::Fixed { direction } => (direction.as_slice(), norm(direction)),
            BiasDirection::AlongGradient => (reference, norm(reference)),
        };
        if n > 0.0 {
            for (o, s) in out.iter_mut().zip(src) {
                *o = s / n;
            }
        } else {
            out.iter_mut().for_each(|o| *o = 0.0);
            out[0] = 1.0;
        }
    }
}

/// Which stochastic-gradient construction to use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OracleSpec {
    /// `h = grad J + x + zeta` with `|x| = mu_t (1 + |grad J|)` exactly and
    /// Gaussian `zeta` of total second moment `M_t^2 (1 + J)` spread evenly
    /// over the components.
    ExactNoisy {
        #[serde(default)]
        bias: Option<PowerLawSchedule>,
        #[serde(default)]
        bias_direction: BiasDirection,
        #[serde(default)]
        noise: Option<PowerLawSchedule>,
    },
    /// `h = d e_i o (grad J + xi)`, `i` uniform.
    CoordinateUniform {
        #[serde(default)]
        noise: NoiseModel,
    },
    /// `h = d e_i o (grad J + xi)` with `i ~ phi_t`, where
    /// `phi_t = u + (phi_0 - u) decay(t)` drifts towards uniform `u`.
    CoordinateOffPolicy {
        initial: Vec<f64>,
        #[serde(default)]
        decay: Option<PowerLawSchedule>,
        #[serde(default)]
        noise: NoiseModel,
    },
    /// `h = (d/m) e_S o (grad J + xi)` over a uniform size-`m` subset `S`.
    BlockCoordinate {
        block_size: usize,
        #[serde(default)]
        noise: NoiseModel,
    },
    /// Coordinatewise central differences, `2d` evaluations.
    KieferWolfowitz {
        #[serde(default)]
        increment: Option<PowerLawSchedule>,
        #[serde(default)]
        noise: NoiseModel,
    },
    /// Simultaneous perturbation along a Rademacher direction with `k + 1`
    /// evaluations and an order-`k` difference stencil.
    Spsa {
        order: u32,
        #[serde(default)]
        increment: Option<PowerLawSchedule>,
        #[serde(default)]
        noise: NoiseModel,
    },
    /// Average of `batch_size` per-sample gradients drawn with replacement.
    Minibatch { batch_size: usize },
}

/// Per-draw diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub enum OracleAux {
    None,
    Coordinate(usize),
    Block(Vec<usize>),
    Signs(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSample {
    pub h: Vec<f64>,
    pub evals_used: usize,
    pub aux: OracleAux,
}

/// Declared `mu_t` and `M_t` envelopes. `None` means identically zero for
/// the bias and bounded for the standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct DeclaredEnvelope {
    pub bias: Option<PowerLawSchedule>,
    pub std_dev: Option<PowerLawSchedule>,
}

impl DeclaredEnvelope {
    /// Decay exponent of the bias; 1 when the oracle is unbiased.
    pub fn gamma(&self) -> f64 {
        self.bias.map_or(1.0, |b| b.exponent())
    }

    /// Growth exponent of the standard deviation; 0 when bounded.
    pub fn delta(&self) -> f64 {
        self.std_dev.map_or(0.0, |m| (-m.exponent()).max(0.0))
    }
}

/// Scratch buffers reused across draws.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    grad: Vec<f64>,
    probe: Vec<f64>,
    dir: Vec<f64>,
    signs: Vec<f64>,
    block: Vec<usize>,
    values: Vec<f64>,
    coordinate: Option<usize>,
}

impl Workspace {
    pub fn new(dim: usize) -> Self {
        Self {
            grad: vec![0.0; dim],
            probe: vec![0.0; dim],
            dir: vec![0.0; dim],
            signs: vec![0.0; dim],
            block: Vec::with_capacity(dim),
            values: Vec::new(),
            coordinate: None,
        }
    }
}

/// Weights `w_j` with `f'(0) ~ sum_j w_j f(x_j)` for unit-spaced nodes
/// (Fornberg's recursion for the first derivative).
pub fn first_derivative_weights(nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    let m = 1usize;
    let mut c = vec![vec![0.0; m + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = nodes[0];
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i];
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[m]).collect()
}

/// Stencil nodes (in units of the increment) for an order-`k` directional
/// difference: `{-1, 1}` for `k = 1`, symmetric `-k/2..=k/2` for even `k`,
/// forward `0..=k` otherwise.
pub fn spsa_nodes(order: u32) -> Vec<f64> {
    let k = order as i64;
    if k == 1 {
        vec![-1.0, 1.0]
    } else if k % 2 == 0 {
        (-k / 2..=k / 2).map(|j| j as f64).collect()
    } else {
        (0..=k).map(|j| j as f64).collect()
    }
}

impl OracleSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        fn role(s: &Option<PowerLawSchedule>, role: Role, what: &str) -> Result<()> {
            match s {
                Some(s) if s.role() != role => Err(Error::Config(format!(
                    "{what} schedule must have role {role:?}, got {:?}",
                    s.role()
                ))),
                _ => Ok(()),
            }
        }
        fn increment(s: &Option<PowerLawSchedule>) -> Result<()> {
            if s.is_none() {
                return Err(Error::Config("zeroth-order oracle requires an increment schedule".into()));
            }
            role(s, Role::Increment, "increment")
        }
        match self {
            OracleSpec::ExactNoisy {
                bias,
                bias_direction,
                noise,
            } => {
                role(bias, Role::BiasBound, "bias")?;
                role(noise, Role::StdDevBound, "noise")?;
                bias_direction.validate(dim)
            }
            OracleSpec::CoordinateUniform { noise } => noise.validate(),
            OracleSpec::CoordinateOffPolicy { initial, decay, noise } => {
                noise.validate()?;
                if initial.len() != dim {
                    return Err(Error::Config(format!(
                        "off-policy distribution has length {}, expected {dim}",
                        initial.len()
                    )));
                }
                if initial.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(Error::Config("off-policy probabilities must be nonnegative".into()));
                }
                let total: f64 = initial.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("off-policy probabilities sum to {total}, not 1")));
                }
                if let Some(d) = decay {
                    if d.exponent() < 0.0 || d.eval(0) > 1.0 {
                        return Err(Error::Config("off-policy decay must be nonincreasing and start <= 1".into()));
                    }
                }
                Ok(())
            }
            OracleSpec::BlockCoordinate { block_size, noise } => {
                noise.validate()?;
                if *block_size == 0 || *block_size > dim {
                    return Err(Error::Config(format!("block size {block_size} must lie in 1..={dim}")));
                }
                Ok(())
            }
            OracleSpec::KieferWolfowitz { increment: inc, noise } => {
                noise.validate()?;
                increment(inc)
            }
            OracleSpec::Spsa {
                order,
                increment: inc,
                noise,
            } => {
                noise.validate()?;
                if *order == 0 {
                    return Err(Error::Config("SPSA order must be at least 1".into()));
                }
                increment(inc)
            }
            OracleSpec::Minibatch { batch_size } => {
                if *batch_size == 0 {
                    return Err(Error::Config("batch size must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// Function/gradient evaluations consumed by one draw.
    pub fn cost(&self, dim: usize) -> usize {
        match self {
            OracleSpec::ExactNoisy { .. }
            | OracleSpec::CoordinateUniform { .. }
            | OracleSpec::CoordinateOffPolicy { .. }
            | OracleSpec::BlockCoordinate { .. } => 1,
            OracleSpec::KieferWolfowitz { .. } => 2 * dim,
            OracleSpec::Spsa { order, .. } => *order as usize + 1,
            OracleSpec::Minibatch { batch_size } => *batch_size,
        }
    }

    pub fn is_zeroth_order(&self) -> bool {
        matches!(self, OracleSpec::KieferWolfowitz { .. } | OracleSpec::Spsa { .. })
    }

    pub fn increment(&self) -> Option<&PowerLawSchedule> {
        match self {
            OracleSpec::KieferWolfowitz { increment, .. } | OracleSpec::Spsa { increment, .. } => increment.as_ref(),
            _ => None,
        }
    }

    /// Declared envelopes. Finite-difference oracles with increment
    /// `c_t ~ t^-s` have bias `O(c_t^k)` and standard deviation `O(1/c_t)`;
    /// Kiefer-Wolfowitz is declared with `k = 1`.
    pub fn declared_envelope(&self) -> Result<DeclaredEnvelope> {
        let fd = |c: &PowerLawSchedule, k: f64| -> Result<DeclaredEnvelope> {
            let s = c.exponent();
            Ok(DeclaredEnvelope {
                bias: Some(PowerLawSchedule::new(1.0, k * s, c.offset(), Role::BiasBound)?),
                std_dev: Some(PowerLawSchedule::new(1.0, -s, c.offset(), Role::StdDevBound)?),
            })
        };
        match self {
            OracleSpec::ExactNoisy { bias, noise, .. } => Ok(DeclaredEnvelope {
                bias: *bias,
                std_dev: *noise,
            }),
            OracleSpec::CoordinateOffPolicy { decay, .. } => Ok(DeclaredEnvelope {
                bias: decay.map(|d| d.with_role(Role::BiasBound)),
                std_dev: None,
            }),
            OracleSpec::CoordinateUniform { .. } | OracleSpec::BlockCoordinate { .. } | OracleSpec::Minibatch { .. } => {
                Ok(DeclaredEnvelope {
                    bias: None,
                    std_dev: None,
                })
            }
            OracleSpec::KieferWolfowitz { increment, .. } => fd(self.require_increment(increment)?, 1.0),
            OracleSpec::Spsa { order, increment, .. } => fd(self.require_increment(increment)?, *order as f64),
        }
    }

    fn require_increment<'a>(&self, inc: &'a Option<PowerLawSchedule>) -> Result<&'a PowerLawSchedule> {
        inc.as_ref()
            .ok_or_else(|| Error::Config("zeroth-order oracle requires an increment schedule".into()))
    }

    /// Off-policy sampling distribution at step `t`.
    pub fn sampling_distribution(&self, dim: usize, t: u64) -> Option<Vec<f64>> {
        match self {
            OracleSpec::CoordinateUniform { .. } => Some(vec![1.0 / dim as f64; dim]),
            OracleSpec::CoordinateOffPolicy { initial, decay, .. } => {
                let w = decay.map_or(1.0, |d| d.eval(t));
                let u = 1.0 / dim as f64;
                Some(initial.iter().map(|p| u + (p - u) * w).collect())
            }
            _ => None,
        }
    }

    /// Draws one search direction.
    pub fn sample(&self, obj: &dyn Objective, theta: &[f64], t: u64, rng: &mut SimRng) -> Result<OracleSample> {
        let d = obj.dim();
        let mut ws = Workspace::new(d);
        let mut h = vec![0.0; d];
        let evals = self.sample_into(obj, theta, t, rng, &mut ws, &mut h)?;
        let aux = match self {
            OracleSpec::CoordinateUniform { .. } | OracleSpec::CoordinateOffPolicy { .. } => {
                OracleAux::Coordinate(ws.coordinate.expect("coordinate recorded"))
            }
            OracleSpec::BlockCoordinate { .. } => OracleAux::Block(ws.block.clone()),
            OracleSpec::Spsa { .. } => OracleAux::Signs(ws.signs.clone()),
            _ => OracleAux::None,
        };
        Ok(OracleSample {
            h,
            evals_used: evals,
            aux,
        })
    }

    /// Allocation-free draw into `h`; returns the evaluation count.
    pub fn sample_into(
        &self,
        obj: &dyn Objective,
        theta: &[f64],
        t: u64,
        rng: &mut SimRng,
        ws: &mut Workspace,
        h: &mut [f64],
    ) -> Result<usize> {
        let d = obj.dim();
        if ws.grad.len() != d {
            *ws = Workspace::new(d);
        }
        match self {
            OracleSpec::ExactNoisy {
                bias,
                bias_direction,
                noise,
            } => {
                obj.gradient(theta, &mut ws.grad);
                h.copy_from_slice(&ws.grad);
                if let Some(mu) = bias {
                    let size = mu.eval(t) * (1.0 + norm(&ws.grad));
                    bias_direction.unit(&ws.grad, &mut ws.dir);
                    for (hi, di) in h.iter_mut().zip(&ws.dir) {
                        *hi += size * di;
                    }
                }
                if let Some(m) = noise {
                    let j = obj.value(theta);
                    let std = m.eval(t) * ((1.0 + j) / d as f64).sqrt();
                    for hi in h.iter_mut() {
                        *hi += std * rng.normal();
                    }
                }
            }
            OracleSpec::CoordinateUniform { noise } => {
                let i = rng.below(d);
                self.coordinate_direction(obj, theta, i, noise, rng, ws, h);
            }
            OracleSpec::CoordinateOffPolicy { noise, .. } => {
                let probs = self.sampling_distribution(d, t).expect("coordinate oracle");
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut i = d - 1;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        i = k;
                        break;
                    }
                }
                self.coordinate_direction(obj, theta, i, noise, rng, ws, h);
            }
            OracleSpec::BlockCoordinate { block_size, noise } => {
                let m = *block_size;
                // Partial Fisher-Yates over 0..d.
                ws.block.clear();
                ws.block.extend(0..d);
                for k in 0..m {
                    let j = k + rng.below(d - k);
                    ws.block.swap(k, j);
                }
                ws.block.truncate(m);
                ws.block.sort_unstable();
                obj.gradient(theta, &mut ws.grad);
                h.iter_mut().for_each(|x| *x = 0.0);
                let factor = d as f64 / m as f64;
                for &i in &ws.block {
                    h[i] = factor * (ws.grad[i] + noise.draw(rng));
                }
            }
            OracleSpec::KieferWolfowitz { increment, noise } => {
                let c = self.require_increment(increment)?.eval(t);
                ws.probe.copy_from_slice(theta);
                for i in 0..d {
                    ws.probe[i] = theta[i] + c;
                    let up = obj.value(&ws.probe) + noise.draw(rng);
                    ws.probe[i] = theta[i] - c;
                    let down = obj.value(&ws.probe) + noise.draw(rng);
                    ws.probe[i] = theta[i];
                    h[i] = (up - down) / (2.0 * c);
                }
            }
            OracleSpec::Spsa {
                order,
                increment,
                noise,
            } => {
                let c = self.require_increment(increment)?.eval(t);
                rng.rademacher(&mut ws.signs);
                let nodes = spsa_nodes(*order);
                let weights = first_derivative_weights(&nodes);
                ws.values.clear();
                for &node in &nodes {
                    for ((p, th), s) in ws.probe.iter_mut().zip(theta).zip(&ws.signs) {
                        *p = th + node * c * s;
                    }
                    ws.values.push(obj.value(&ws.probe));
                }
                // Each component sees its own measurement errors.
                for (hi, s) in h.iter_mut().zip(&ws.signs) {
                    let directional: f64 = weights
                        .iter()
                        .zip(&ws.values)
                        .map(|(w, v)| w * (v + noise.draw(rng)))
                        .sum();
                    *hi = directional / (c * s);
                }
            }
            OracleSpec::Minibatch { batch_size } => {
                let fs = obj.as_finite_sum().ok_or_else(|| {
                    Error::Config(format!("minibatch oracle needs a finite-sum objective, got {}", obj.name()))
                })?;
                let m = fs.num_samples();
                h.iter_mut().for_each(|x| *x = 0.0);
                for _ in 0..*batch_size {
                    let i = rng.below(m);
                    fs.sample_gradient(i, theta, &mut ws.grad);
                    for (hi, g) in h.iter_mut().zip(&ws.grad) {
                        *hi += g;
                    }
                }
                let n = *batch_size as f64;
                h.iter_mut().for_each(|x| *x /= n);
            }
        }
        Ok(self.cost(d))
    }

    #[allow(clippy::too_many_arguments)]
    fn coordinate_direction(
        &self,
        obj: &dyn Objective,
        theta: &[f64],
        i: usize,
        noise: &NoiseModel,
        rng: &mut SimRng,
        ws: &mut Workspace,
        h: &mut [f64],
    ) {
        let d = obj.dim();
        obj.gradient(theta, &mut ws.grad);
        h.iter_mut().for_each(|x| *x = 0.0);
        h[i] = d as f64 * (ws.grad[i] + noise.draw(rng));
        ws.coordinate = Some(i);
    }
}

/// Largest dimension for which the SPSA sign set is enumerated.
pub const MAX_ENUMERATED_DIM: usize = 20;

/// Bias `E_t h - grad J(theta)` by exact enumeration of the outcome set.
/// Measurement noise is zero-mean and does not enter. SPSA enumerates all
/// `2^d` sign vectors, so it is limited to `d <= MAX_ENUMERATED_DIM`.
pub fn exact_bias(oracle: &OracleSpec, obj: &dyn Objective, theta: &[f64], t: u64) -> Result<Vec<f64>> {
    let d = obj.dim();
    oracle.validate(d)?;
    let g = obj.gradient_vec(theta);
    let mean = match oracle {
        OracleSpec::ExactNoisy { bias, bias_direction, .. } => {
            let size = bias.map_or(0.0, |mu| mu.eval(t) * (1.0 + norm(&g)));
            let mut dir = vec![0.0; d];
            bias_direction.unit(&g, &mut dir);
            return Ok(dir.iter().map(|u| size * u).collect());
        }
        OracleSpec::CoordinateUniform { .. } | OracleSpec::CoordinateOffPolicy { .. } => {
            let probs = oracle.sampling_distribution(d, t).expect("coordinate oracle");
            // Outcome i contributes d g_i e_i with probability phi_i.
            probs.iter().zip(&g).map(|(p, gi)| p * (d as f64 * gi)).collect()
        }
        OracleSpec::BlockCoordinate { block_size, .. } => {
            let m = *block_size;
            let mut mean = vec![0.0; d];
            let subsets: Vec<Vec<usize>> = (0..d).combinations(m).collect();
            let p = 1.0 / subsets.len() as f64;
            let factor = d as f64 / m as f64;
            for s in &subsets {
                for &i in s {
                    mean[i] += p * factor * g[i];
                }
            }
            mean
        }
        OracleSpec::KieferWolfowitz { increment, .. } => {
            let c = oracle.require_increment(increment)?.eval(t);
            let mut probe = theta.to_vec();
            (0..d)
                .map(|i| {
                    probe[i] = theta[i] + c;
                    let up = obj.value(&probe);
                    probe[i] = theta[i] - c;
                    let down = obj.value(&probe);
                    probe[i] = theta[i];
                    (up - down) / (2.0 * c)
                })
                .collect()
        }
        OracleSpec::Spsa { order, increment, .. } => {
            if d > MAX_ENUMERATED_DIM {
                return Err(Error::Usage(format!(
                    "exact SPSA bias enumerates 2^d directions; d = {d} exceeds {MAX_ENUMERATED_DIM}"
                )));
            }
            let c = oracle.require_increment(increment)?.eval(t);
            let nodes = spsa_nodes(*order);
            let weights = first_derivative_weights(&nodes);
            let count = 1u64 << d;
            let mut mean = vec![0.0; d];
            let mut signs = vec![0.0; d];
            let mut probe = vec![0.0; d];
            for mask in 0..count {
                for (i, s) in signs.iter_mut().enumerate() {
                    *s = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
                }
                let directional: f64 = nodes
                    .iter()
                    .zip(&weights)
                    .map(|(node, w)| {
                        for ((p, th), s) in probe.iter_mut().zip(theta).zip(&signs) {
                            *p = th + node * c * s;
                        }
                        w * obj.value(&probe)
                    })
                    .sum();
                for (m, s) in mean.iter_mut().zip(&signs) {
                    *m += directional / (c * s) / count as f64;
                }
            }
            mean
        }
        OracleSpec::Minibatch { .. } => {
            let fs = obj.as_finite_sum().ok_or_else(|| {
                Error::Config(format!("minibatch oracle needs a finite-sum objective, got {}", obj.name()))
            })?;
            let n = fs.num_samples();
            let mut mean = vec![0.0; d];
            let mut gi = vec![0.0; d];
            for i in 0..n {
                fs.sample_gradient(i, theta, &mut gi);
                for (m, x) in mean.iter_mut().zip(&gi) {
                    *m += x / n as f64;
                }
            }
            mean
        }
    };
    Ok(mean.iter().zip(&g).map(|(a, b)| a - b).collect())
}

impl OracleSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            OracleSpec::ExactNoisy { .. } => "exact_noisy",
            OracleSpec::CoordinateUniform { .. } => "coordinate_uniform",
            OracleSpec::CoordinateOffPolicy { .. } => "coordinate_off_policy",
            OracleSpec::BlockCoordinate { .. } => "block_coordinate",
            OracleSpec::KieferWolfowitz { .. } => "kiefer_wolfowitz",
            OracleSpec::Spsa { .. } => "spsa",
            OracleSpec::Minibatch { .. } => "minibatch",
        }
    }
}

/// Monte-Carlo estimates of the bias and conditional variance at a fixed
/// `(theta, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasVarianceEstimate {
    pub samples: usize,
    pub mean: Vec<f64>,
    pub bias: Vec<f64>,
    /// Per-component standard error of the mean.
    pub bias_stderr: Vec<f64>,
    pub bias_norm: f64,
    /// Euclidean norm of `bias_stderr`.
    pub bias_stderr_norm: f64,
    /// `E |h - E h|^2` (trace of the covariance).
    pub variance: f64,
    pub variance_stderr: f64,
    pub gradient_norm: f64,
    pub objective: f64,
    pub evals_per_draw: usize,
}

/// 95% normal-approximation multiplier for confidence half-widths.
pub const CI_Z: f64 = 1.96;

impl BiasVarianceEstimate {
    pub fn bias_halfwidth(&self) -> f64 {
        CI_Z * self.bias_stderr_norm
    }

    pub fn variance_halfwidth(&self) -> f64 {
        CI_Z * self.variance_stderr
    }

    /// `|x_hat| <= mu (1 + |grad J|)` allowing `z` standard errors of slack.
    pub fn bias_within(&self, mu: f64, z: f64) -> bool {
        self.bias_norm <= mu * (1.0 + self.gradient_norm) + z * self.bias_stderr_norm
    }

    /// `variance <= M^2 (1 + J)` allowing `z` standard errors of slack.
    pub fn variance_within(&self, m: f64, z: f64) -> bool {
        self.variance <= m * m * (1.0 + self.objective) + z * self.variance_stderr
    }
}

pub fn estimate_bias_variance(
    oracle: &OracleSpec,
    obj: &dyn Objective,
    theta: &[f64],
    t: u64,
    n: usize,
    rng: &mut SimRng,
) -> Result<BiasVarianceEstimate> {
    if n < 1000 {
        return Err(Error::Usage(format!("at least 1000 samples required, got {n}")));
    }
    let d = obj.dim();
    oracle.validate(d)?;
    let mut ws = Workspace::new(d);
    let mut draws = vec![0.0; n * d];
    let mut evals = 0;
    for row in draws.chunks_mut(d) {
        evals = oracle.sample_into(obj, theta, t, rng, &mut ws, row)?;
    }
    let mut mean = vec![0.0; d];
    for row in draws.chunks(d) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut comp_var = vec![0.0; d];
    let mut sq_norms = Vec::with_capacity(n);
    for row in draws.chunks(d) {
        let mut q = 0.0;
        for ((v, x), m) in comp_var.iter_mut().zip(row).zip(&mean) {
            let dev = x - m;
            *v += dev * dev;
            q += dev * dev;
        }
        sq_norms.push(q);
    }
    let nf = n as f64;
    comp_var.iter_mut().for_each(|v| *v /= nf - 1.0);
    let variance = comp_var.iter().sum::<f64>();
    let q_mean = sq_norms.iter().sum::<f64>() / nf;
    let q_var = sq_norms.iter().map(|q| (q - q_mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let g = obj.gradient_vec(theta);
    let bias: Vec<f64> = mean.iter().zip(&g).map(|(m, gi)| m - gi).collect();
    let bias_stderr: Vec<f64> = comp_var.iter().map(|v| (v / nf).sqrt()).collect();
    Ok(BiasVarianceEstimate {
        samples: n,
        bias_norm: norm(&bias),
        bias_stderr_norm: norm(&bias_stderr),
        mean,
        bias,
        bias_stderr,
        variance,
        variance_stderr: (q_var / nf).sqrt(),
        gradient_norm: norm(&g),
        objective: obj.value(theta),
        evals_per_draw: evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{FiniteSumLs, Quadratic, SinSq};

    /// Linear objective with a prescribed constant gradient (not bounded
    /// below; only used to exercise oracle algebra).
    struct ConstGrad(Vec<f64>);

    impl Objective for ConstGrad {
        fn name(&self) -> &str {
            "const_grad"
        }
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn value(&self, theta: &[f64]) -> f64 {
            crate::dot(&self.0, theta)
        }
        fn gradient(&self, _theta: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&self.0);
        }
        fn smoothness(&self) -> f64 {
            1.0
        }
    }

    fn increment(c: f64) -> PowerLawSchedule {
        PowerLawSchedule::constant(c, Role::Increment).unwrap()
    }

    #[test]
    fn fd_weights_match_classical_tables() {
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-14);
        assert!(close(&first_derivative_weights(&[-1.0, 1.0]), &[-0.5, 0.5]));
        assert!(close(&first_derivative_weights(&[-1.0, 0.0, 1.0]), &[-0.5, 0.0, 0.5]));
        assert!(close(
            &first_derivative_weights(&[-2.0, -1.0, 0.0, 1.0, 2.0]),
            &[1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0]
        ));
        assert!(close(
            &first_derivative_weights(&[0.0, 1.0, 2.0, 3.0]),
            &[-11.0 / 6.0, 3.0, -1.5, 1.0 / 3.0]
        ));
        assert_eq!(spsa_nodes(1).len(), 2);
        assert_eq!(spsa_nodes(2), vec![-1.0, 0.0, 1.0]);
        assert_eq!(spsa_nodes(3), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn coordinate_uniform_outcomes() {
        let obj = ConstGrad(vec![3.0, 4.0]);
        let oracle = OracleSpec::CoordinateUniform {
            noise: NoiseModel::none(),
        };
        let mut rng = SimRng::new(5);
        let mut seen = [false; 2];
        for _ in 0..64 {
            let s = oracle.sample(&obj, &[0.0, 0.0], 0, &mut rng).unwrap();
            match s.aux {
                OracleAux::Coordinate(0) => {
                    assert_eq!(s.h, vec![6.0, 0.0]);
                    seen[0] = true;
                }
                OracleAux::Coordinate(1) => {
                    assert_eq!(s.h, vec![0.0, 8.0]);
                    seen[1] = true;
                }
                other => panic!("unexpected aux {other:?}"),
            }
            assert_eq!(s.evals_used, 1);
        }
        assert!(seen[0] && seen[1]);
        // Mean over the two equiprobable outcomes is the gradient.
        assert_eq!(exact_bias(&oracle, &obj, &[0.0, 0.0], 0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn spsa_is_exact_on_quadratics_without_noise() {
        let obj = Quadratic::identity(1);
        let oracle = OracleSpec::Spsa {
            order: 1,
            increment: Some(increment(0.1)),
            noise: NoiseModel::none(),
        };
        let mut rng = SimRng::new(1);
        let s = oracle.sample(&obj, &[1.0], 0, &mut rng).unwrap();
        assert!((s.h[0] - 1.0).abs() < 1e-12, "{:?}", s.h);
        assert_eq!(s.evals_used, 2);
        assert!(matches!(s.aux, OracleAux::Signs(ref v) if v.len() == 1));
    }

    #[test]
    fn spsa_higher_order_costs() {
        let obj = SinSq::new(3).unwrap();
        for k in 1..=4 {
            let oracle = OracleSpec::Spsa {
                order: k,
                increment: Some(increment(0.1)),
                noise: NoiseModel::gaussian(0.1),
            };
            let s = oracle.sample(&obj, &[0.1, 0.2, 0.3], 0, &mut SimRng::new(2)).unwrap();
            assert_eq!(s.evals_used, k as usize + 1);
        }
    }

    #[test]
    fn off_policy_bias_example() {
        let obj = ConstGrad(vec![1.0, 1.0]);
        let oracle = OracleSpec::CoordinateOffPolicy {
            initial: vec![0.75, 0.25],
            decay: None,
            noise: NoiseModel::none(),
        };
        let x = exact_bias(&oracle, &obj, &[0.0, 0.0], 0).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && (x[1] + 0.5).abs() < 1e-15);
        let bound = 2.0 * 0.5 * 2f64.sqrt();
        assert!((norm(&x) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(norm(&x) <= bound);
    }

    #[test]
    fn full_block_is_unbiased() {
        let obj = SinSq::new(4).unwrap();
        let oracle = OracleSpec::BlockCoordinate {
            block_size: 4,
            noise: NoiseModel::none(),
        };
        let x = exact_bias(&oracle, &obj, &[0.3, -1.0, 2.0, 0.7], 0).unwrap();
        assert_eq!(x, vec![0.0; 4]);
        let oracle = OracleSpec::BlockCoordinate {
            block_size: 2,
            noise: NoiseModel::none(),
        };
        let x = exact_bias(&oracle, &obj, &[0.3, -1.0, 2.0, 0.7], 0).unwrap();
        assert!(norm(&x) < 1e-14);
    }

    #[test]
    fn exact_bias_of_finite_differences() {
        let q = Quadratic::diagonal(&[1.0, 2.0, 3.0]).unwrap();
        let theta = [0.4, -1.2, 0.7];
        for oracle in [
            OracleSpec::Spsa {
                order: 1,
                increment: Some(increment(0.3)),
                noise: NoiseModel::gaussian(0.5),
            },
            OracleSpec::KieferWolfowitz {
                increment: Some(increment(0.3)),
                noise: NoiseModel::none(),
            },
        ] {
            // Central differences are exact on quadratics.
            assert!(norm(&exact_bias(&oracle, &q, &theta, 0).unwrap()) < 1e-12);
        }
        let obj = SinSq::new(4).unwrap();
        let theta = [0.3, -0.8, 1.1, 0.2];
        let oracle = OracleSpec::Spsa {
            order: 1,
            increment: Some(increment(0.3)),
            noise: NoiseModel::none(),
        };
        let exact = exact_bias(&oracle, &obj, &theta, 0).unwrap();
        assert!(norm(&exact) > 1e-3);
        let est = estimate_bias_variance(&oracle, &obj, &theta, 0, 40_000, &mut SimRng::new(3)).unwrap();
        for ((e, m), se) in exact.iter().zip(&est.bias).zip(&est.bias_stderr) {
            assert!((e - m).abs() < 4.0 * se, "{e} vs {m} (se {se})");
        }
        let big = SinSq::new(MAX_ENUMERATED_DIM + 1).unwrap();
        assert!(matches!(
            exact_bias(&oracle, &big, &[0.0; MAX_ENUMERATED_DIM + 1], 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn exact_bias_of_unbiased_and_biased_oracles() {
        let ls = FiniteSumLs::new(30, 3, 9).unwrap();
        let mb = OracleSpec::Minibatch { batch_size: 4 };
        assert!(norm(&exact_bias(&mb, &ls, &[0.5, 0.5, -1.0], 0).unwrap()) < 1e-10);
        let obj = SinSq::new(2).unwrap();
        let en = OracleSpec::ExactNoisy {
            bias: Some(PowerLawSchedule::new(0.5, 1.0, 1, Role::BiasBound).unwrap()),
            bias_direction: BiasDirection::AlongGradient,
            noise: None,
        };
        let theta = [0.3, 0.9];
        let x = exact_bias(&en, &obj, &theta, 1).unwrap();
        let g = obj.gradient_vec(&theta);
        assert!((norm(&x) - 0.25 * (1.0 + norm(&g))).abs() < 1e-14);
    }

    #[test]
    fn zeroth_order_without_increment_is_config_error() {
        let obj = SinSq::new(2).unwrap();
        let oracle = OracleSpec::Spsa {
            order: 1,
            increment: None,
            noise: NoiseModel::none(),
        };
        assert!(matches!(
            oracle.sample(&obj, &[0.0, 0.0], 0, &mut SimRng::new(0)),
            Err(Error::Config(_))
        ));
        assert!(oracle.validate(2).is_err());
        let kw = OracleSpec::KieferWolfowitz {
            increment: None,
            noise: NoiseModel::none(),
        };
        assert!(kw.sample(&obj, &[0.0, 0.0], 0, &mut SimRng::new(0)).is_err());
    }

    #[test]
    fn exact_noisy_unbiased_estimate() {
        let obj = SinSq::new(3).unwrap();
        let oracle = OracleSpec::ExactNoisy {
            bias: None,
            bias_direction: BiasDirection::AlongGradient,
            noise: Some(PowerLawSchedule::constant(1.0, Role::StdDevBound).unwrap()),
        };
        let est = estimate_bias_variance(&oracle, &obj, &[0.5, -0.2, 1.0], 0, 20_000, &mut SimRng::new(3)).unwrap();
        assert!(est.bias_norm <= 3.0 * est.bias_stderr_norm, "{est:?}");
        // Total second moment is M^2 (1 + J).
        let expected = 1.0 + obj.value(&[0.5, -0.2, 1.0]);
        assert!((est.variance - expected).abs() < 4.0 * est.variance_stderr);
        assert!(est.variance_within(1.0, 4.0));
    }

    #[test]
    fn exact_noisy_bias_saturates_envelope() {
        let obj = SinSq::new(2).unwrap();
        let theta = [0.4, 0.9];
        let oracle = OracleSpec::ExactNoisy {
            bias: Some(PowerLawSchedule::new(1.0, 1.0, 1, Role::BiasBound).unwrap()),
            bias_direction: BiasDirection::Fixed {
                direction: vec![3.0, 4.0],
            },
            noise: None,
        };
        let s = oracle.sample(&obj, &theta, 3, &mut SimRng::new(0)).unwrap();
        let g = obj.gradient_vec(&theta);
        let x: Vec<f64> = s.h.iter().zip(&g).map(|(a, b)| a - b).collect();
        let expected = 0.25 * (1.0 + norm(&g));
        assert!((norm(&x) - expected).abs() < 1e-12);
        assert!((x[0] / x[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn kiefer_wolfowitz_exact_on_quadratic() {
        let obj = Quadratic::diagonal(&[1.0, 3.0]).unwrap();
        let oracle = OracleSpec::KieferWolfowitz {
            increment: Some(increment(0.1)),
            noise: NoiseModel::none(),
        };
        let est = estimate_bias_variance(&oracle, &obj, &[1.0, -2.0], 0, 1000, &mut SimRng::new(0)).unwrap();
        assert!(est.bias_norm <= 1e-9);
        assert_eq!(est.evals_per_draw, 4);
    }

    #[test]
    fn spsa_variance_matches_noise_formula() {
        let d = 3;
        let obj = SinSq::new(d).unwrap();
        let sigma = 0.1;
        let c = 0.05;
        let oracle = OracleSpec::Spsa {
            order: 1,
            increment: Some(increment(c)),
            noise: NoiseModel::gaussian(sigma),
        };
        let est = estimate_bias_variance(&oracle, &obj, &[0.0; 3], 0, 20_000, &mut SimRng::new(8)).unwrap();
        let predicted = sigma * sigma * d as f64 / (2.0 * c * c);
        let ratio = est.variance / predicted;
        assert!((0.3..=3.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn minibatch_requires_finite_sum() {
        let oracle = OracleSpec::Minibatch { batch_size: 4 };
        let obj = SinSq::new(2).unwrap();
        assert!(matches!(
            oracle.sample(&obj, &[0.0, 0.0], 0, &mut SimRng::new(0)),
            Err(Error::Config(_))
        ));
        let ls = FiniteSumLs::new(50, 3, 4).unwrap();
        let s = oracle.sample(&ls, &[0.1, 0.2, 0.3], 0, &mut SimRng::new(0)).unwrap();
        assert_eq!(s.evals_used, 4);
    }

    #[test]
    fn sampling_is_deterministic() {
        let obj = SinSq::new(4).unwrap();
        let oracles = [
            OracleSpec::Spsa {
                order: 2,
                increment: Some(increment(0.1)),
                noise: NoiseModel::gaussian(0.1),
            },
            OracleSpec::BlockCoordinate {
                block_size: 2,
                noise: NoiseModel::uniform(0.3),
            },
            OracleSpec::ExactNoisy {
                bias: None,
                bias_direction: BiasDirection::AlongGradient,
                noise: Some(PowerLawSchedule::constant(1.0, Role::StdDevBound).unwrap()),
            },
        ];
        for o in &oracles {
            let a = o.sample(&obj, &[0.1, 0.2, 0.3, 0.4], 17, &mut SimRng::new(99)).unwrap();
            let b = o.sample(&obj, &[0.1, 0.2, 0.3, 0.4], 17, &mut SimRng::new(99)).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.h), bits(&b.h));
            assert_eq!(a.aux, b.aux);
        }
    }

    #[test]
    fn validation_catches_bad_specs() {
        let bad = [
            OracleSpec::CoordinateOffPolicy {
                initial: vec![0.5, 0.6],
                decay: None,
                noise: NoiseModel::none(),
            },
            OracleSpec::BlockCoordinate {
                block_size: 5,
                noise: NoiseModel::none(),
            },
            OracleSpec::ExactNoisy {
                bias: Some(PowerLawSchedule::constant(1.0, Role::StepSize).unwrap()),
                bias_direction: BiasDirection::AlongGradient,
                noise: None,
            },
            OracleSpec::Minibatch { batch_size: 0 },
            OracleSpec::CoordinateUniform {
                noise: NoiseModel::gaussian(-1.0),
            },
        ];
        for o in &bad {
            assert!(o.validate(2).is_err(), "{o:?}");
        }
        assert!(estimate_bias_variance(
            &OracleSpec::Minibatch { batch_size: 1 },
            &SinSq::new(2).unwrap(),
            &[0.0, 0.0],
            0,
            10,
            &mut SimRng::new(0)
        )
        .is_err());
    }

    #[test]
    fn declared_envelopes() {
        let spsa = OracleSpec::Spsa {
            order: 2,
            increment: Some(PowerLawSchedule::new(1.0, 0.25, 2, Role::Increment).unwrap()),
            noise: NoiseModel::gaussian(0.1),
        };
        let env = spsa.declared_envelope().unwrap();
        assert!((env.gamma() - 0.5).abs() < 1e-15);
        assert!((env.delta() - 0.25).abs() < 1e-15);
        let cu = OracleSpec::CoordinateUniform {
            noise: NoiseModel::none(),
        };
        let env = cu.declared_envelope().unwrap();
        assert_eq!((env.gamma(), env.delta()), (1.0, 0.0));
    }
}
