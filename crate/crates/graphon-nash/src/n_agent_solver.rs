//! Backward solver for the finite game without common noise.
//!
//! Coefficients of agent `i` only depend on `i`'s own path, so the
//! transformed value process splits exactly as
//! `𝒴^i = U^i + Σ_{j≠i} K^{ij}`, where `U^i` lives on agent `i`'s lattice and
//! `K^{ij}` on agent `j`'s. The split holds node by node for the lattice
//! scheme because conditional means and representation coefficients are
//! additive over independent factors. Each piece is solved by backward
//! induction with the representation coefficients taken from the next step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{mean_and_coeffs, AdaptedProcess, Lattice, LatticeError};
use crate::model::{validate_spec, AgentModel, GameSpec, ModelError, Scheme, ValidationReport};
use crate::projection::ProjectionError;

/// Tolerance of the per-node Picard iterations.
pub const PICARD_TOL: f64 = 1e-12;
pub const PICARD_MAX_ITERS: usize = 100;
pub const PICARD_DAMPING: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("validation failed: {0}")]
    Validation(ValidationReport),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("{0}")]
    Unsupported(String),
    #[error("interaction weight {rho} is at or above the contraction bound {bound}")]
    ContractionBound { rho: f64, bound: f64 },
    #[error("no convergence in {module} at {location} after {iterations} iterations (contraction estimate {factor:.3e})")]
    NonConvergence { module: &'static str, location: String, iterations: usize, factor: f64 },
}

impl SolverError {
    /// Whether the root cause is an unsupported projection.
    pub fn is_unsupported_projection(&self) -> bool {
        matches!(
            self,
            SolverError::Projection(ProjectionError::Unsupported(_))
                | SolverError::Model(ModelError::Projection(ProjectionError::Unsupported(_)))
        )
    }
}

/// Per-node fixed-point statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    pub max_iterations: usize,
    pub max_residual: f64,
    pub max_contraction: f64,
}

impl PicardReport {
    fn merge(&mut self, iters: usize, residual: f64, contraction: f64) {
        self.max_iterations = self.max_iterations.max(iters);
        self.max_residual = self.max_residual.max(residual);
        self.max_contraction = self.max_contraction.max(contraction);
    }
}

/// Single-agent part of one agent's solution, on that agent's lattice.
#[derive(Clone, Debug)]
pub struct OwnSolution {
    pub model: AgentModel,
    pub lattice: Lattice,
    /// `U`, steps `0..=N`.
    pub y: AdaptedProcess,
    /// Coefficients of `U` on the own factors (the process `𝒵^{ii}`), steps `0..N`.
    pub z: AdaptedProcess,
    /// `Z^{ii}` stacked into ℝ^{k}, after removing the self-weight shift.
    pub z_raw: AdaptedProcess,
    /// `g = P((Z^{ii}+θ)/(1−γ))`, the exposure `Σᵀπ`.
    pub g: AdaptedProcess,
    pub pi: AdaptedProcess,
    pub theta: AdaptedProcess,
}

/// `K^{ij}` with coupling `c = ργ^iλⁿ_ij`, on agent `j`'s lattice.
#[derive(Clone, Debug)]
pub struct InteractionPart {
    pub c: f64,
    pub y: AdaptedProcess,
    pub z: AdaptedProcess,
}

#[derive(Clone, Debug)]
pub struct NAgentBsdeSolution {
    pub own: Vec<OwnSolution>,
    /// `interaction[i][j]` for `j ≠ i` with nonzero coupling.
    pub interaction: Vec<Vec<Option<InteractionPart>>>,
    /// `𝒴₀^i`.
    pub y0: Vec<f64>,
    /// `V₀^i`.
    pub values: Vec<f64>,
    pub scheme: Scheme,
    pub picard: PicardReport,
}

impl NAgentBsdeSolution {
    pub fn n(&self) -> usize {
        self.own.len()
    }

    /// `𝒴^i_t` at the joint node given by each agent's own node index.
    pub fn y_at(&self, i: usize, t: usize, nodes: &[usize]) -> f64 {
        let mut y = self.own[i].y.get(t, nodes[i])[0];
        for (j, part) in self.interaction[i].iter().enumerate() {
            if let Some(p) = part {
                y += p.y.get(t, nodes[j])[0];
            }
        }
        y
    }

    /// `𝒵^{ij}_t` (own factors of agent `j`) at agent `j`'s node.
    pub fn z_at(&self, i: usize, j: usize, t: usize, node_j: usize) -> Vec<f64> {
        if i == j {
            return self.own[i].z.get(t, node_j).to_vec();
        }
        match &self.interaction[i][j] {
            Some(p) => p.z.get(t, node_j).to_vec(),
            None => vec![0.0; self.own[j].model.d],
        }
    }

    /// Coupling `c_ij = ργ^iλⁿ_ij` used by the solution.
    pub fn coupling(&self, spec: &GameSpec, i: usize, j: usize) -> f64 {
        spec.rho * self.own[i].model.gamma() * spec.lambda_n(i, j)
    }
}

/// Solves `Z = 𝒵 − c·P((Z+θ)/(1−γ))` by Picard iteration; returns
/// `(Z, g, iterations, residual, contraction)`.
fn self_weight_fixed_point(
    model: &AgentModel,
    zcal: &[f64],
    theta: &[f64],
    c: f64,
) -> Result<(Vec<f64>, Vec<f64>, usize, f64, f64), SolverError> {
    let mut z = zcal.to_vec();
    let mut g = model.g(&z, theta);
    if c == 0.0 {
        return Ok((z, g, 0, 0.0, 0.0));
    }
    let mut prev_delta = f64::NAN;
    let mut contraction: f64 = 0.0;
    for it in 1..=200 {
        let next: Vec<f64> = zcal.iter().zip(&g).map(|(a, b)| a - c * b).collect();
        let delta = next.iter().zip(&z).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if prev_delta > 1e-9 {
            contraction = contraction.max(delta / prev_delta);
        }
        z = next;
        g = model.g(&z, theta);
        if delta <= 1e-15 * (1.0 + z.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            return Ok((z, g, it, delta, contraction));
        }
        prev_delta = delta;
    }
    Err(SolverError::NonConvergence {
        module: "n_agent_solver",
        location: "self-weight relation".into(),
        iterations: 200,
        factor: contraction,
    })
}

/// Drift of `X̂` per unit time at exposure `g`: `θᵀg − ½|g|²`.
pub fn wealth_drift(theta: &[f64], g: &[f64]) -> f64 {
    let tg: f64 = theta.iter().zip(g).map(|(a, b)| a * b).sum();
    let gg: f64 = g.iter().map(|v| v * v).sum();
    tg - 0.5 * gg
}

/// Per-node update `y = m + f·dt`, either directly or by Picard iteration on
/// `y`. The lattice generator does not depend on `y`, so the fixed point is
/// reached after one update.
fn node_update(scheme: Scheme, mean: f64, drift: impl Fn(f64) -> f64, dt: f64, rep: &mut PicardReport) -> Result<f64, SolverError> {
    match scheme {
        Scheme::Explicit => Ok(mean + drift(mean) * dt),
        Scheme::Implicit => {
            let mut y = mean;
            let mut prev = f64::NAN;
            let mut factor: f64 = 0.0;
            for it in 1..=PICARD_MAX_ITERS {
                let next = (1.0 - PICARD_DAMPING) * y + PICARD_DAMPING * (mean + drift(y) * dt);
                let res = (next - y).abs();
                if prev > 0.0 && res > 0.0 {
                    factor = factor.max(res / prev);
                }
                y = next;
                if res <= PICARD_TOL {
                    rep.merge(it, res, factor);
                    return Ok(y);
                }
                if factor >= 1.0 {
                    break;
                }
                prev = res;
            }
            Err(SolverError::NonConvergence {
                module: "n_agent_solver",
                location: "implicit node update".into(),
                iterations: PICARD_MAX_ITERS,
                factor,
            })
        }
    }
}

/// Solves the single-agent part on the agent's own lattice. `c_self` is the
/// self-weight coupling (zero in the main model); `shift(t)` is a
/// deterministic generator term added per unit time.
pub(crate) fn solve_own(
    model: &AgentModel,
    lattice: Lattice,
    scheme: Scheme,
    c_self: f64,
    shift: &dyn Fn(usize) -> f64,
    rep: &mut PicardReport,
) -> Result<OwnSolution, SolverError> {
    let n = lattice.steps();
    let dt = lattice.dt();
    let nf = lattice.n_factors();
    let k = model.d + 1;
    let mut y = AdaptedProcess::zeros(&lattice, 1, n);
    let mut z = AdaptedProcess::zeros(&lattice, nf, n - 1);
    let mut z_raw = AdaptedProcess::zeros(&lattice, k, n - 1);
    let mut g = AdaptedProcess::zeros(&lattice, k, n - 1);
    let mut pi = AdaptedProcess::zeros(&lattice, model.d, n - 1);
    let mut theta = AdaptedProcess::zeros(&lattice, k, n - 1);
    let mut zc = vec![0.0; nf];
    for t in (0..n).rev() {
        let next = y.step(t + 1).to_vec();
        for node in 0..lattice.nodes_at(t) {
            let mean = mean_and_coeffs(&lattice, &next, t, node, &mut zc);
            let th = model.theta(&lattice, t, node);
            let mut zs = vec![0.0; k];
            zs[..nf.min(k)].copy_from_slice(&zc[..nf.min(k)]);
            let (zr, gg, iters, res, fac) = self_weight_fixed_point(model, &zs, &th, c_self)?;
            if c_self != 0.0 {
                rep.merge(iters, res, fac);
            }
            let f = model.own_generator(&zr, &th, &gg) - c_self * wealth_drift(&th, &gg) + shift(t);
            let yv = node_update(scheme, mean, |_| f, dt, rep)?;
            y.set(t, node, &[yv]);
            z.set(t, node, &zc);
            z_raw.set(t, node, &zr);
            pi.set(t, node, &model.strategy_from_g(&gg));
            g.set(t, node, &gg);
            theta.set(t, node, &th);
        }
    }
    Ok(OwnSolution { model: model.clone(), lattice, y, z, z_raw, g, pi, theta })
}

/// Solves `K` on the source agent's lattice for coupling `c`.
fn solve_interaction(src: &OwnSolution, c: f64, scheme: Scheme, rep: &mut PicardReport) -> Result<InteractionPart, SolverError> {
    let lat = &src.lattice;
    let n = lat.steps();
    let dt = lat.dt();
    let nf = lat.n_factors();
    let mut y = AdaptedProcess::zeros(lat, 1, n);
    let mut z = AdaptedProcess::zeros(lat, nf, n - 1);
    let mut zc = vec![0.0; nf];
    for t in (0..n).rev() {
        let next = y.step(t + 1).to_vec();
        for node in 0..lat.nodes_at(t) {
            let mean = mean_and_coeffs(lat, &next, t, node, &mut zc);
            let gg = src.g.get(t, node);
            let th = src.theta.get(t, node);
            let mut q = 0.0;
            for (f, zf) in zc.iter().enumerate() {
                let e = zf - c * gg[f];
                q += e * e;
            }
            let f = 0.5 * q - c * wealth_drift(th, gg);
            let yv = node_update(scheme, mean, |_| f, dt, rep)?;
            y.set(t, node, &[yv]);
            z.set(t, node, &zc);
        }
    }
    Ok(InteractionPart { c, y, z })
}

/// Builds each agent's model and own lattice.
pub(crate) fn agent_models(spec: &GameSpec) -> Result<Vec<(AgentModel, Lattice)>, SolverError> {
    (0..spec.population())
        .map(|i| {
            let m = AgentModel::new(&spec.agent(i))?;
            let lat = m.own_lattice(i, spec.steps, spec.horizon, false)?;
            Ok((m, lat))
        })
        .collect()
}

/// Validates `spec`; a constraint set whose transformed projection is not
/// implemented is reported as such rather than as a plain violation.
pub fn check_spec(spec: &GameSpec) -> Result<(), SolverError> {
    let report = validate_spec(spec);
    if report.is_valid() {
        return Ok(());
    }
    let listed = match &spec.agents {
        crate::model::AgentSource::List(l) if l.is_empty() => 0,
        _ => spec.population(),
    };
    for i in 0..listed {
        if let Err(ModelError::Projection(e @ ProjectionError::Unsupported(_))) = AgentModel::new(&spec.agent(i)) {
            return Err(SolverError::Projection(e));
        }
    }
    Err(SolverError::Validation(report))
}

/// Solves the finite game without common noise.
pub fn solve_n_agent_bsde(spec: &GameSpec) -> Result<NAgentBsdeSolution, SolverError> {
    check_spec(spec)?;
    if spec.graphon().is_some() {
        return Err(SolverError::Unsupported("solve_n_agent_bsde needs a finite-mode specification".into()));
    }
    let n = spec.population();
    for i in 0..n {
        if spec.agent(i).has_common_loading() || spec.common_noise {
            return Err(SolverError::Unsupported("the finite game is solved without common noise".into()));
        }
    }
    let mut rep = PicardReport::default();
    let mut own = Vec::with_capacity(n);
    for (i, (model, lat)) in agent_models(spec)?.into_iter().enumerate() {
        let c_self = spec.rho * model.gamma() * spec.lambda_n(i, i);
        own.push(solve_own(&model, lat, spec.scheme, c_self, &|_| 0.0, &mut rep)?);
    }
    let mut interaction = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let c = spec.rho * own[i].model.gamma() * spec.lambda_n(i, j);
            if j == i || c == 0.0 {
                row.push(None);
            } else {
                row.push(Some(solve_interaction(&own[j], c, spec.scheme, &mut rep)?));
            }
        }
        interaction.push(row);
    }
    let y0: Vec<f64> = (0..n)
        .map(|i| {
            let mut y = own[i].y.get(0, 0)[0];
            for p in interaction[i].iter().flatten() {
                y += p.y.get(0, 0)[0];
            }
            y
        })
        .collect();
    let mut sol = NAgentBsdeSolution {
        own,
        interaction,
        y0,
        values: Vec::new(),
        scheme: spec.scheme,
        picard: rep,
    };
    sol.values = compute_values_n(&sol, spec);
    Ok(sol)
}

/// Nodewise strategies with the raw `Z^{ii}` and any nodes where the
/// recovered strategy leaves `A_i` by more than `1e-10`.
#[derive(Clone, Debug)]
pub struct RecoveredStrategies {
    pub pi: Vec<AdaptedProcess>,
    pub z_raw: Vec<AdaptedProcess>,
    pub outside: Vec<(usize, usize, usize)>,
}

pub fn recover_strategies_n(sol: &NAgentBsdeSolution) -> RecoveredStrategies {
    let mut outside = Vec::new();
    for (i, o) in sol.own.iter().enumerate() {
        for t in 0..o.lattice.steps() {
            for k in 0..o.lattice.nodes_at(t) {
                if !o.model.params.constraint.contains(o.pi.get(t, k), 1e-10) {
                    outside.push((i, t, k));
                }
            }
        }
    }
    RecoveredStrategies {
        pi: sol.own.iter().map(|o| o.pi.clone()).collect(),
        z_raw: sol.own.iter().map(|o| o.z_raw.clone()).collect(),
        outside,
    }
}

/// `Y₀^i = 𝒴₀^i − Σ_j c_ij log x^j`.
pub fn y0_untransformed(sol: &NAgentBsdeSolution, spec: &GameSpec) -> Vec<f64> {
    let n = sol.n();
    (0..n)
        .map(|i| {
            let mut y = sol.y0[i];
            for j in 0..n {
                let c = sol.coupling(spec, i, j);
                if c != 0.0 {
                    y -= c * sol.own[j].model.params.x0.ln();
                }
            }
            y
        })
        .collect()
}

/// `V₀^i = (1/γ)(x^i)^γ exp(Y₀^i)`.
pub fn compute_values_n(sol: &NAgentBsdeSolution, spec: &GameSpec) -> Vec<f64> {
    y0_untransformed(sol, spec)
        .iter()
        .zip(&sol.own)
        .map(|(y, o)| {
            let g = o.model.gamma();
            o.model.params.x0.powf(g) / g * y.exp()
        })
        .collect()
}

/// Generator of agent `i` evaluated on a full block `zblock[j] = 𝒵^{ij}`
/// (each in ℝ^d) with `thetas[j] = θ^j` at the agents' nodes.
pub fn generator_n(
    spec: &GameSpec,
    models: &[AgentModel],
    i: usize,
    zblock: &[Vec<f64>],
    diag: &[Vec<f64>],
    thetas: &[Vec<f64>],
) -> Result<f64, SolverError> {
    let n = models.len();
    let mut gs = Vec::with_capacity(n);
    let mut zraw_i = Vec::new();
    for j in 0..n {
        let k = models[j].d + 1;
        let mut zs = vec![0.0; k];
        zs[..diag[j].len()].copy_from_slice(&diag[j]);
        let cjj = spec.rho * models[j].gamma() * spec.lambda_n(j, j);
        let (zr, g, ..) = self_weight_fixed_point(&models[j], &zs, &thetas[j], cjj)?;
        if j == i {
            zraw_i = zr;
        }
        gs.push(g);
    }
    let mi = &models[i];
    let gm = mi.gamma();
    let mut f = 0.0;
    for j in 0..n {
        let c = spec.rho * gm * spec.lambda_n(i, j);
        let q: f64 = zblock[j].iter().enumerate().map(|(c_, z)| (z - c * gs[j][c_]).powi(2)).sum();
        f += 0.5 * q;
        if c != 0.0 {
            f -= c * wealth_drift(&thetas[j], &gs[j]);
        }
    }
    let a = crate::model::arg(&zraw_i, &thetas[i], gm);
    let zt: f64 = zraw_i.iter().zip(&thetas[i]).map(|(a, b)| (a + b).powi(2)).sum();
    let pen: f64 = a.iter().zip(&gs[i]).map(|(a, p)| (a - p).powi(2)).sum();
    f += gm / (2.0 * (1.0 - gm)) * zt - gm * (1.0 - gm) / 2.0 * pen;
    Ok(f)
}

