//! Game specifications, coefficient validation, market prices of risk and
//! graphons.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{FactorTag, Lattice, LatticeError};
use crate::projection::{ConstraintSet, ProjectionError, TransformedProjector};

/// Lower eigenvalue bound for `ΣΣᵀ`.
pub const ELLIPTICITY_EPS: f64 = 1e-8;
/// Largest admissible condition number of `ΣΣᵀ`.
pub const CONDITION_CAP: f64 = 1e10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("ellipticity violation: {0}")]
    Ellipticity(String),
    #[error("invalid graphon: {0}")]
    Graphon(String),
    #[error("unsupported graphon kind: {0}")]
    UnsupportedKind(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid specification: {0}")]
    Invalid(String),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Drift `μ` as a function of time and the agent's own node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftModel {
    Constant { value: Vec<f64> },
    /// Value `values[p]` on `[breaks[p-1], breaks[p])`, with `values.len() = breaks.len() + 1`.
    Piecewise { breaks: Vec<f64>, values: Vec<Vec<f64>> },
    /// `base + amp·(sign of the last own move)`, `base` at time zero.
    LastMove { base: Vec<f64>, amp: Vec<f64> },
    /// `base + slope·W_t` with the own lattice Brownian value.
    UpCount { base: Vec<f64>, slope: Vec<f64> },
}

impl DriftModel {
    pub fn dim(&self) -> usize {
        match self {
            DriftModel::Constant { value } => value.len(),
            DriftModel::Piecewise { values, .. } => values.first().map_or(0, |v| v.len()),
            DriftModel::LastMove { base, .. } | DriftModel::UpCount { base, .. } => base.len(),
        }
    }

    pub fn needs_full_tree(&self) -> bool {
        matches!(self, DriftModel::LastMove { .. })
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, DriftModel::Constant { .. } | DriftModel::Piecewise { .. })
    }

    /// Evaluates `μ` at node `k` of step `t` of the agent's own lattice, whose
    /// first `d` factors are the agent's idiosyncratic components.
    pub fn eval(&self, lat: &Lattice, t: usize, k: usize) -> Vec<f64> {
        match self {
            DriftModel::Constant { value } => value.clone(),
            DriftModel::Piecewise { breaks, values } => {
                let time = t as f64 * lat.dt();
                let p = breaks.iter().filter(|b| **b <= time + 1e-12).count();
                values[p.min(values.len() - 1)].clone()
            }
            DriftModel::LastMove { base, amp } => base
                .iter()
                .zip(amp)
                .enumerate()
                .map(|(c, (b, a))| b + a * lat.last_move(t, k, c).unwrap_or(0.0))
                .collect(),
            DriftModel::UpCount { base, slope } => base
                .iter()
                .zip(slope)
                .enumerate()
                .map(|(c, (b, s))| b + s * lat.brownian(t, k, c))
                .collect(),
        }
    }
}

/// Parameters of one agent (finite game) or one type (graphon game).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub gamma: f64,
    pub x0: f64,
    pub mu: DriftModel,
    /// d×d idiosyncratic volatility, row-major.
    pub sigma: Vec<Vec<f64>>,
    /// Common-noise loading; absent means zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_star: Option<Vec<f64>>,
    #[serde(default)]
    pub constraint: ConstraintSet,
}

impl AgentParams {
    pub fn d(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma_star_vec(&self) -> Vec<f64> {
        self.sigma_star.clone().unwrap_or_else(|| vec![0.0; self.d()])
    }

    pub fn has_common_loading(&self) -> bool {
        self.sigma_star.as_ref().is_some_and(|s| s.iter().any(|v| *v != 0.0))
    }

    /// Convenience constructor for one-dimensional agents.
    pub fn scalar(gamma: f64, x0: f64, sigma: f64, mu: DriftModel) -> Self {
        AgentParams {
            gamma,
            x0,
            mu,
            sigma: vec![vec![sigma]],
            sigma_star: None,
            constraint: ConstraintSet::FullSpace,
        }
    }
}

/// Affine scalar field `a + b·u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lin {
    pub a: f64,
    #[serde(default)]
    pub b: f64,
}

impl Lin {
    pub fn at(&self, u: f64) -> f64 {
        self.a + self.b * u
    }
}

/// Affine vector field `a + b·u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinVec {
    pub a: Vec<f64>,
    #[serde(default)]
    pub b: Vec<f64>,
}

impl LinVec {
    pub fn at(&self, u: f64) -> Vec<f64> {
        self.a
            .iter()
            .enumerate()
            .map(|(i, a)| a + self.b.get(i).copied().unwrap_or(0.0) * u)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftFamily {
    Constant { value: LinVec },
    Piecewise { breaks: Vec<f64>, values: Vec<LinVec> },
    LastMove { base: LinVec, amp: LinVec },
    UpCount { base: LinVec, slope: LinVec },
}

/// Type-indexed parameter family `u ↦ AgentParams`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeFamily {
    pub gamma: Lin,
    pub x0: Lin,
    pub mu: DriftFamily,
    pub sigma: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_star: Option<Vec<f64>>,
    #[serde(default)]
    pub constraint: ConstraintSet,
}

impl TypeFamily {
    pub fn at(&self, u: f64) -> AgentParams {
        let mu = match &self.mu {
            DriftFamily::Constant { value } => DriftModel::Constant { value: value.at(u) },
            DriftFamily::Piecewise { breaks, values } => DriftModel::Piecewise {
                breaks: breaks.clone(),
                values: values.iter().map(|v| v.at(u)).collect(),
            },
            DriftFamily::LastMove { base, amp } => DriftModel::LastMove { base: base.at(u), amp: amp.at(u) },
            DriftFamily::UpCount { base, slope } => DriftModel::UpCount { base: base.at(u), slope: slope.at(u) },
        };
        AgentParams {
            gamma: self.gamma.at(u),
            x0: self.x0.at(u),
            mu,
            sigma: self.sigma.clone(),
            sigma_star: self.sigma_star.clone(),
            constraint: self.constraint.clone(),
        }
    }
}

/// Agents given explicitly or as a family over types `u ∈ (0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AgentSource {
    List(Vec<AgentParams>),
    Family(TypeFamily),
}

impl AgentSource {
    /// Parameters of type `u`; lists are read as step profiles.
    pub fn at_type(&self, u: f64) -> AgentParams {
        match self {
            AgentSource::Family(f) => f.at(u),
            AgentSource::List(list) => {
                let len = list.len();
                let idx = ((u * len as f64).ceil() as usize).clamp(1, len) - 1;
                list[idx].clone()
            }
        }
    }
}

/// Graphon catalog plus user step matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Graphon {
    Constant { p: f64 },
    /// `1 − max(u, v)`
    UniformAttachment,
    Min,
    Product,
    /// Constant on cells `((i−1)/m, i/m] × ((j−1)/m, j/m]`.
    Step { matrix: Vec<Vec<f64>> },
}

impl Graphon {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            Graphon::Constant { p } => *p,
            Graphon::UniformAttachment => 1.0 - u.max(v),
            Graphon::Min => u.min(v),
            Graphon::Product => u * v,
            Graphon::Step { matrix } => {
                let m = matrix.len();
                matrix[cell(u, m)][cell(v, m)]
            }
        }
    }

    pub fn is_step(&self) -> bool {
        matches!(self, Graphon::Step { .. })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Graphon::Constant { p } if !(0.0..=1.0).contains(p) => {
                Err(ModelError::Graphon(format!("constant {p} outside [0, 1]")))
            }
            Graphon::Step { matrix } => check_matrix(matrix).map_err(ModelError::Graphon),
            _ => Ok(()),
        }
    }
}

/// Zero-based cell index `⌈m·u⌉ − 1`, with `u = 0` sent to the first cell.
fn cell(u: f64, m: usize) -> usize {
    ((u * m as f64).ceil() as usize).clamp(1, m) - 1
}

fn check_matrix(matrix: &[Vec<f64>]) -> Result<(), String> {
    let n = matrix.len();
    if n == 0 {
        return Err("empty matrix".into());
    }
    for (i, row) in matrix.iter().enumerate() {
        if row.len() != n {
            return Err(format!("row {i} has length {}, expected {n}", row.len()));
        }
        for (j, v) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(format!("entry ({i}, {j}) = {v} outside [0, 1]"));
            }
            if (matrix[j][i] - v).abs() > 0.0 {
                return Err(format!("matrix not symmetric at ({i}, {j})"));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    Finite {
        lambda: Vec<Vec<f64>>,
        #[serde(default)]
        allow_self_weight: bool,
    },
    Graphon { m: usize, graphon: Graphon },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Explicit,
    Implicit,
}

/// Full description of a finite or graphon game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub mode: Mode,
    pub rho: f64,
    pub horizon: f64,
    pub steps: usize,
    pub agents: AgentSource,
    #[serde(default)]
    pub common_noise: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
}

impl GameSpec {
    /// Number of agents (finite) or types (graphon).
    pub fn population(&self) -> usize {
        match &self.mode {
            Mode::Finite { lambda, .. } => lambda.len(),
            Mode::Graphon { m, .. } => *m,
        }
    }

    pub fn allow_self_weight(&self) -> bool {
        matches!(self.mode, Mode::Finite { allow_self_weight: true, .. })
    }

    /// Parameters of agent `i` (finite) or type `i` (graphon), zero-based.
    pub fn agent(&self, i: usize) -> AgentParams {
        let n = self.population();
        match (&self.mode, &self.agents) {
            (_, AgentSource::List(list)) if list.len() == n => list[i].clone(),
            (_, AgentSource::List(list)) if list.len() == 1 => list[0].clone(),
            (Mode::Finite { .. }, src) => src.at_type((i + 1) as f64 / n as f64),
            (Mode::Graphon { .. }, src) => src.at_type(type_location(i, n)),
        }
    }

    /// `λⁿ_ij = λ_ij/(n−1)`; diagonal entries only count with self weights.
    pub fn lambda_n(&self, i: usize, j: usize) -> f64 {
        match &self.mode {
            Mode::Finite { lambda, allow_self_weight } => {
                let n = lambda.len();
                if n < 2 || (i == j && !allow_self_weight) {
                    0.0
                } else {
                    lambda[i][j] / (n - 1) as f64
                }
            }
            Mode::Graphon { .. } => 0.0,
        }
    }

    pub fn graphon(&self) -> Option<&Graphon> {
        match &self.mode {
            Mode::Graphon { graphon, .. } => Some(graphon),
            Mode::Finite { .. } => None,
        }
    }

    pub fn gamma_tilde(&self) -> f64 {
        (0..self.population()).map(|i| self.agent(i).gamma.abs()).fold(0.0, f64::max)
    }

    pub fn gamma_bar(&self) -> f64 {
        (0..self.population()).map(|i| self.agent(i).gamma).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Midpoint location `(2k−1)/(2m)` of type `k` (zero-based `i = k−1`).
pub fn type_location(i: usize, m: usize) -> f64 {
    (2 * i + 1) as f64 / (2 * m) as f64
}

/// `θ = Σᵀ(ΣΣᵀ)⁻¹μ` for `Σ = [σ, σ*]`.
pub fn compute_theta(
    sigma: &DMatrix<f64>,
    sigma_star: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<DVector<f64>, ModelError> {
    let big = stack_sigma(sigma, sigma_star)?;
    let inv = ellipticity_inverse(&big)?;
    if mu.len() != sigma.nrows() {
        return Err(ModelError::Dimension(format!("mu has length {}, expected {}", mu.len(), sigma.nrows())));
    }
    Ok(big.transpose() * (inv * mu))
}

/// `Σ = [σ, σ*]`, a d×(d+1) matrix.
pub fn stack_sigma(sigma: &DMatrix<f64>, sigma_star: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
    let d = sigma.nrows();
    if sigma.ncols() != d || sigma_star.len() != d {
        return Err(ModelError::Dimension(format!(
            "sigma is {}x{}, sigma_star has length {}",
            sigma.nrows(),
            sigma.ncols(),
            sigma_star.len()
        )));
    }
    let mut big = DMatrix::zeros(d, d + 1);
    big.view_mut((0, 0), (d, d)).copy_from(sigma);
    big.set_column(d, sigma_star);
    Ok(big)
}

/// Inverse of `ΣΣᵀ` after the eigenvalue and condition-number checks.
pub fn ellipticity_inverse(big: &DMatrix<f64>) -> Result<DMatrix<f64>, ModelError> {
    let gram = big * big.transpose();
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Ellipticity("non-finite volatility".into()));
    }
    let eig = gram.clone().symmetric_eigen();
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    if lo < ELLIPTICITY_EPS {
        return Err(ModelError::Ellipticity(format!("smallest eigenvalue of ΣΣᵀ is {lo:e} < {ELLIPTICITY_EPS:e}")));
    }
    if hi / lo > CONDITION_CAP {
        return Err(ModelError::Ellipticity(format!("condition number {:e} above cap {CONDITION_CAP:e}", hi / lo)));
    }
    gram.try_inverse().ok_or_else(|| ModelError::Ellipticity("singular ΣΣᵀ".into()))
}

/// Per-agent precomputed market quantities on a constant volatility.
#[derive(Clone, Debug)]
pub struct AgentModel {
    pub params: AgentParams,
    pub d: usize,
    /// `Σᵀ`, (d+1)×d.
    pub sigma_t: DMatrix<f64>,
    /// `Σᵀ(ΣΣᵀ)⁻¹`, maps μ to θ.
    pub theta_map: DMatrix<f64>,
    /// `(ΣΣᵀ)⁻¹Σ`, maps `Σᵀπ` back to π.
    pub recover: DMatrix<f64>,
    pub projector: TransformedProjector,
}

impl AgentModel {
    pub fn new(params: &AgentParams) -> Result<Self, ModelError> {
        let d = params.d();
        let rows: Vec<f64> = params.sigma.iter().flatten().copied().collect();
        if rows.len() != d * d {
            return Err(ModelError::Dimension("sigma must be square".into()));
        }
        if params.mu.dim() != d {
            return Err(ModelError::Dimension(format!("mu has dimension {}, expected {d}", params.mu.dim())));
        }
        let sigma = DMatrix::from_row_slice(d, d, &rows);
        let star = DVector::from_vec(params.sigma_star_vec());
        let big = stack_sigma(&sigma, &star)?;
        let inv = ellipticity_inverse(&big)?;
        let sigma_t = big.transpose();
        let theta_map = &sigma_t * &inv;
        let recover = &inv * &big;
        let projector = TransformedProjector::new(&sigma_t, &params.constraint)?;
        Ok(AgentModel { params: params.clone(), d, sigma_t, theta_map, recover, projector })
    }

    pub fn gamma(&self) -> f64 {
        self.params.gamma
    }

    /// θ ∈ ℝ^{d+1} at an own-lattice node.
    pub fn theta(&self, lat: &Lattice, t: usize, k: usize) -> Vec<f64> {
        let mu = DVector::from_vec(self.params.mu.eval(lat, t, k));
        (&self.theta_map * mu).iter().copied().collect()
    }

    /// `g = P((z + θ)/(1−γ))` for a stacked (d+1)-vector `z`.
    pub fn g(&self, z: &[f64], theta: &[f64]) -> Vec<f64> {
        let a = arg(z, theta, self.gamma());
        self.projector.apply(&a)
    }

    /// π recovered from `Σᵀπ = g`.
    pub fn strategy_from_g(&self, g: &[f64]) -> Vec<f64> {
        (&self.recover * DVector::from_column_slice(g)).iter().copied().collect()
    }

    /// `Σᵀπ` for a strategy π.
    pub fn exposure(&self, pi: &[f64]) -> Vec<f64> {
        (&self.sigma_t * DVector::from_column_slice(pi)).iter().copied().collect()
    }

    /// Single-agent part of the generator:
    /// `½|z|² + γ/(2(1−γ))|z+θ|² − γ(1−γ)/2 |(I−P)a|²`, `a = (z+θ)/(1−γ)`.
    pub fn own_generator(&self, z: &[f64], theta: &[f64], g: &[f64]) -> f64 {
        let gm = self.gamma();
        let a = arg(z, theta, gm);
        let zz: f64 = z.iter().map(|v| v * v).sum();
        let zt: f64 = z.iter().zip(theta).map(|(a, b)| (a + b) * (a + b)).sum();
        let pen: f64 = a.iter().zip(g).map(|(a, p)| (a - p) * (a - p)).sum();
        0.5 * zz + gm / (2.0 * (1.0 - gm)) * zt - gm * (1.0 - gm) / 2.0 * pen
    }

    /// Own lattice: d idiosyncratic factors, plus the common factor if asked.
    pub fn own_lattice(&self, owner: usize, steps: usize, horizon: f64, common: bool) -> Result<Lattice, ModelError> {
        let mut factors: Vec<FactorTag> =
            (0..self.d).map(|c| FactorTag::Idiosyncratic { owner, component: c }).collect();
        if common {
            factors.push(FactorTag::Common);
        }
        Ok(Lattice::new(steps, horizon, factors, !self.params.mu.needs_full_tree())?)
    }
}

/// `(z + θ)/(1−γ)`.
pub fn arg(z: &[f64], theta: &[f64], gamma: f64) -> Vec<f64> {
    z.iter().zip(theta).map(|(a, b)| (a + b) / (1.0 - gamma)).collect()
}

/// One violated invariant with its location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation { location: location.into(), message: message.into() });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_valid() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{}: {}", v.location, v.message)?;
        }
        Ok(())
    }
}

/// Structural checks on a specification; never fails, only reports.
pub fn validate_spec(spec: &GameSpec) -> ValidationReport {
    let mut r = ValidationReport::default();
    if !(0.0..=1.0).contains(&spec.rho) {
        r.push("rho", format!("interaction weight {} outside [0, 1]", spec.rho));
    }
    if !(spec.horizon.is_finite() && spec.horizon > 0.0) {
        r.push("horizon", "horizon must be positive");
    }
    if spec.steps == 0 {
        r.push("steps", "at least one step required");
    }
    match &spec.mode {
        Mode::Finite { lambda, allow_self_weight } => {
            let n = lambda.len();
            if n == 0 {
                r.push("mode.lambda", "no agents");
            }
            if let Err(e) = check_matrix(lambda) {
                if n > 0 {
                    r.push("mode.lambda", e);
                }
            }
            if !allow_self_weight {
                for (i, row) in lambda.iter().enumerate() {
                    if row.get(i).is_some_and(|v| *v != 0.0) {
                        r.push(format!("mode.lambda[{i}][{i}]"), "nonzero diagonal without allow_self_weight");
                    }
                }
            }
            if let AgentSource::List(list) = &spec.agents {
                if list.len() != n && list.len() != 1 {
                    r.push("agents", format!("{} agents listed for n = {n}", list.len()));
                }
            }
            if spec.common_noise {
                r.push("common_noise", "the finite game is only solved without common noise");
            }
        }
        Mode::Graphon { m, graphon } => {
            if *m == 0 {
                r.push("mode.m", "at least one type required");
            }
            if let Err(e) = graphon.validate() {
                r.push("mode.graphon", e.to_string());
            }
            if let AgentSource::List(list) = &spec.agents {
                if list.is_empty() {
                    r.push("agents", "empty agent list");
                }
            }
        }
    }
    let n = spec.population();
    let listed = match &spec.agents {
        AgentSource::List(l) if l.is_empty() => 0,
        _ => n,
    };
    for i in 0..listed {
        let a = spec.agent(i);
        let loc = format!("agents[{i}]");
        if a.gamma == 0.0 {
            r.push(format!("{loc}.gamma"), "gamma excluded value 0");
        } else if !(a.gamma.is_finite() && a.gamma < 1.0) {
            r.push(format!("{loc}.gamma"), format!("gamma {} must be finite and < 1", a.gamma));
        }
        if !(a.x0.is_finite() && a.x0 > 0.0) {
            r.push(format!("{loc}.x0"), format!("initial wealth {} must be positive", a.x0));
        }
        if !spec.common_noise && a.has_common_loading() {
            r.push(format!("{loc}.sigma_star"), "common loading given but common_noise is off");
        }
        match AgentModel::new(&a) {
            Ok(_) => {}
            Err(ModelError::Ellipticity(msg)) => r.push(format!("{loc}.sigma"), format!("ellipticity violation: {msg}")),
            Err(e) => r.push(loc.clone(), e.to_string()),
        }
        if let DriftModel::Piecewise { breaks, values } = &a.mu {
            if values.len() != breaks.len() + 1 {
                r.push(format!("{loc}.mu"), "piecewise drift needs one more value than breaks");
            }
        }
    }
    r
}

/// Step graphon with `G_n(i/n, j/n) = λ_ij`.
pub fn step_graphon_from_matrix(lambda: &[Vec<f64>]) -> Result<Graphon, ModelError> {
    check_matrix(lambda).map_err(ModelError::Graphon)?;
    Ok(Graphon::Step { matrix: lambda.to_vec() })
}

/// Step sample `G(i/n, j/n)` of a graphon, diagonal included.
pub fn sample_matrix(g: &Graphon, n: usize) -> Vec<Vec<f64>> {
    (1..=n)
        .map(|i| (1..=n).map(|j| g.eval(i as f64 / n as f64, j as f64 / n as f64)).collect())
        .collect()
}

/// `‖G − H‖₂` by tensor midpoint quadrature with `q` points per axis.
pub fn graphon_l2_distance(g: &Graphon, h: &Graphon, q: usize) -> Result<f64, ModelError> {
    if q == 0 {
        return Err(ModelError::Invalid("quadrature needs at least one point".into()));
    }
    g.validate()?;
    h.validate()?;
    let w = 1.0 / q as f64;
    let mut acc = 0.0;
    for a in 0..q {
        let u = (a as f64 + 0.5) * w;
        let mut row = 0.0;
        for b in 0..q {
            let v = (b as f64 + 0.5) * w;
            let e = g.eval(u, v) - h.eval(u, v);
            row += e * e;
        }
        acc += row;
    }
    Ok((acc * w * w).sqrt())
}

/// `(n‖G_n − G‖₂², max_i max_u ∫|G(i/n,v) − G(u,v)|² dv)` for a catalog graphon.
pub fn sampling_moduli(g: &Graphon, n: usize) -> Result<(f64, f64), ModelError> {
    if g.is_step() {
        return Err(ModelError::UnsupportedKind("moduli need an analytic graphon".into()));
    }
    if n == 0 {
        return Err(ModelError::Invalid("n must be positive".into()));
    }
    let gn = Graphon::Step { matrix: sample_matrix(g, n) };
    let q = n * 4000usize.div_ceil(n);
    let dist = graphon_l2_distance(g, &gn, q)?;
    let scaled = n as f64 * dist * dist;

    let qv = 4000;
    let sub = 32;
    let mut modulus: f64 = 0.0;
    for i in 1..=n {
        let ui = i as f64 / n as f64;
        for s in 1..=sub {
            let u = (i - 1) as f64 / n as f64 + s as f64 / (sub * n) as f64;
            let mut acc = 0.0;
            for b in 0..qv {
                let v = (b as f64 + 0.5) / qv as f64;
                let e = g.eval(ui, v) - g.eval(u, v);
                acc += e * e;
            }
            modulus = modulus.max(acc / qv as f64);
        }
    }
    Ok((scaled, modulus))
}
