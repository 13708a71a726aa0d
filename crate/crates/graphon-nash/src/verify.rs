//! Equilibrium certificates and the finite-to-graphon comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphon_solver::{aggregate, solve_graphon_bsde_no_common, type_solution_at};
use crate::lattice::{AdaptedProcess, FactorTag, Lattice, LatticeError};
use crate::model::{sampling_moduli, sample_matrix, GameSpec, Graphon, Mode, ModelError};
use crate::n_agent_solver::{solve_n_agent_bsde, NAgentBsdeSolution, SolverError};
use crate::projection::{growth_certificate, project, ConstraintSet, MEMBERSHIP_TOL};

pub const MARTINGALE_TOL: f64 = 1e-11;
/// Deviation-gain tolerance `ε = C·(dt + spacing)`.
pub const NASH_EPS_CONSTANT: f64 = 0.0138;
pub const DEFAULT_GRID_POINTS: usize = 101;
/// Half-width of the default strategy box.
pub const GRID_BOX: f64 = 5.0;
/// Samples used for the growth constant in the convergence diagnostics.
pub const GROWTH_SAMPLES: usize = 2000;
/// Points per axis for the dense integrals of the convergence diagnostics.
pub const DENSE_POINTS: usize = 4000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("strategy grid has no point inside the constraint set")]
    EmptyGrid,
    #[error("{0}")]
    Invalid(String),
    #[error("convergence experiment failed at n = {n}: {source}")]
    AtN { n: usize, source: Box<VerifyError> },
}

/// Joint full tree over all agents' own factors and the per-agent index maps.
struct Joint<'a> {
    lat: Lattice,
    ranges: Vec<Vec<usize>>,
    own: Vec<&'a Lattice>,
}

impl<'a> Joint<'a> {
    fn new(sol: &'a NAgentBsdeSolution) -> Result<Self, VerifyError> {
        let first = &sol.own[0].lattice;
        let mut factors = Vec::new();
        let mut ranges = Vec::new();
        for (j, o) in sol.own.iter().enumerate() {
            let start = factors.len();
            for c in 0..o.model.d {
                factors.push(FactorTag::Idiosyncratic { owner: j, component: c });
            }
            ranges.push((start..factors.len()).collect());
        }
        let lat = Lattice::new(first.steps(), first.steps() as f64 * first.dt(), factors, false)?;
        Ok(Joint { lat, ranges, own: sol.own.iter().map(|o| &o.lattice).collect() })
    }

    fn own_node(&self, j: usize, t: usize, k: usize) -> usize {
        let own = self.own[j];
        if own.is_recombining() {
            let mut idx = 0;
            let mut scale = 1;
            for &f in &self.ranges[j] {
                idx += self.lat.up_count(t, k, f) * scale;
                scale *= t + 1;
            }
            idx
        } else {
            self.lat.key(t, k, &self.ranges[j])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub agent: usize,
    /// `R₀`, equal to `V₀` by construction.
    pub r0: f64,
    pub v0: f64,
    /// `max |E_t[R_{t+1}] − R_t|` along the equilibrium.
    pub max_residual: f64,
    pub residual_location: (usize, usize),
    pub perturbations: usize,
    /// Largest `E_t[R_{t+1}] − R_t` over perturbations and nodes.
    pub max_violation: f64,
    /// `(perturbation, step, node)` of the largest violation beyond tolerance.
    pub violation_location: Option<(usize, usize, usize)>,
    /// Nodes with `E_t[R_{t+1}] − R_t < −tol`, summed over perturbations.
    pub strict_nodes: usize,
    pub checked_nodes: usize,
    pub passed: bool,
}

/// Largest drift of `R` along one strategy of agent `i`, with its location,
/// the count of strictly decreasing nodes and the number of nodes checked.
struct Sweep {
    r0: f64,
    max_abs: f64,
    abs_loc: (usize, usize),
    max_drift: f64,
    drift_loc: (usize, usize),
    strict: usize,
    nodes: usize,
}

fn sweep_r(spec: &GameSpec, sol: &NAgentBsdeSolution, joint: &Joint, i: usize, pi_i: &AdaptedProcess) -> Sweep {
    let n = sol.n();
    let lat = &joint.lat;
    let steps = lat.steps();
    let dt = lat.dt();
    let sq = lat.sqrt_dt();
    let gm = sol.own[i].model.gamma();
    let c: Vec<f64> = (0..n).map(|j| sol.coupling(spec, i, j)).collect();
    let mut x: Vec<f64> = sol.own.iter().map(|o| o.model.params.x0.ln()).collect();
    let y0 = sol.y_at(i, 0, &vec![0; n]) - (0..n).map(|j| c[j] * x[j]).sum::<f64>();
    let r0 = (y0 + gm * x[i]).exp() / gm;
    let mut r = vec![r0];
    let mut xs = std::mem::take(&mut x);
    let mut out = Sweep { r0, max_abs: 0.0, abs_loc: (0, 0), max_drift: f64::NEG_INFINITY, drift_loc: (0, 0), strict: 0, nodes: 0 };
    let b = lat.branching();
    let nf = lat.n_factors();
    let mut ychild = vec![0.0; b];
    let mut xchild = vec![0.0; b * n];
    for t in 0..steps {
        let cnt = lat.nodes_at(t);
        let mut r_next = vec![0.0; lat.nodes_at(t + 1)];
        let mut x_next = vec![0.0; lat.nodes_at(t + 1) * n];
        let mut nodes = vec![0usize; n];
        let mut cnodes = vec![0usize; n];
        for k in 0..cnt {
            for (j, nd) in nodes.iter_mut().enumerate() {
                *nd = joint.own_node(j, t, k);
            }
            let xt = &xs[k * n..(k + 1) * n];
            let yt = sol.y_at(i, t, &nodes) - (0..n).map(|j| c[j] * xt[j]).sum::<f64>();
            let hs: Vec<Vec<f64>> = (0..n)
                .map(|j| {
                    let o = &sol.own[j];
                    let p = if j == i { pi_i.get(t, nodes[j]) } else { o.pi.get(t, nodes[j]) };
                    o.model.exposure(p)
                })
                .collect();
            let drifts: Vec<f64> = (0..n)
                .map(|j| {
                    let th = sol.own[j].theta.get(t, nodes[j]);
                    let h = &hs[j];
                    h.iter().zip(th).map(|(a, b)| a * b).sum::<f64>() - 0.5 * h.iter().map(|v| v * v).sum::<f64>()
                })
                .collect();
            for m in 0..b {
                let kc = lat.child(t, k, m);
                for (j, cn) in cnodes.iter_mut().enumerate() {
                    *cn = joint.own_node(j, t + 1, kc);
                }
                let mut ysum = sol.y_at(i, t + 1, &cnodes);
                for j in 0..n {
                    let mut v = xt[j] + drifts[j] * dt;
                    for (pos, &f) in joint.ranges[j].iter().enumerate() {
                        v += hs[j][pos] * Lattice::move_sign(m, f) * sq;
                    }
                    xchild[m * n + j] = v;
                    ysum -= c[j] * v;
                }
                ychild[m] = ysum;
            }
            // coefficients of Y_{t+1} on every joint factor, plus γ times own exposure
            let mut q = 0.0;
            for f in 0..nf {
                let mut zf = 0.0;
                for (m, yc) in ychild.iter().enumerate() {
                    zf += Lattice::move_sign(m, f) * yc;
                }
                zf /= b as f64 * sq;
                if let Some(pos) = joint.ranges[i].iter().position(|&g| g == f) {
                    zf += gm * hs[i][pos];
                }
                q += zf * zf;
            }
            let rt = r[k];
            let mut mean = 0.0;
            for m in 0..b {
                let kc = lat.child(t, k, m);
                let dl = (ychild[m] - yt) + gm * (xchild[m * n + i] - xt[i]) + 0.5 * q * dt;
                let rc = rt * (1.0 + dl);
                r_next[kc] = rc;
                mean += rc;
                x_next[kc * n..(kc + 1) * n].copy_from_slice(&xchild[m * n..(m + 1) * n]);
            }
            let drift = mean / b as f64 - rt;
            out.nodes += 1;
            if drift.abs() > out.max_abs {
                out.max_abs = drift.abs();
                out.abs_loc = (t, k);
            }
            if drift > out.max_drift {
                out.max_drift = drift;
                out.drift_loc = (t, k);
            }
            if drift < -MARTINGALE_TOL {
                out.strict += 1;
            }
        }
        r = r_next;
        xs = x_next;
    }
    out
}

/// Builds `R` on the joint tree of all agents for the equilibrium and for
/// each own-adapted perturbation of agent `agent`'s strategy.
///
/// `R_{t+1} = R_t(1 + ΔL)` with `ΔL = ΔY + γΔX̂ + ½|Z_Y + γΣᵀπ|²dt`, the
/// lattice analogue of `(1/γ)exp(Y + γX̂)`; its one-step drift is zero along
/// the equilibrium and has the sign of a supermartingale for any other
/// strategy.
pub fn check_martingale_optimality(
    spec: &GameSpec,
    sol: &NAgentBsdeSolution,
    agent: usize,
    perturbations: &[AdaptedProcess],
) -> Result<MartingaleReport, VerifyError> {
    if agent >= sol.n() {
        return Err(VerifyError::Invalid(format!("agent {agent} out of range")));
    }
    let joint = Joint::new(sol)?;
    let eq = sweep_r(spec, sol, &joint, agent, &sol.own[agent].pi);
    let mut report = MartingaleReport {
        agent,
        r0: eq.r0,
        v0: sol.values[agent],
        max_residual: eq.max_abs,
        residual_location: eq.abs_loc,
        perturbations: perturbations.len(),
        max_violation: f64::NEG_INFINITY,
        violation_location: None,
        strict_nodes: 0,
        checked_nodes: eq.nodes,
        passed: eq.max_abs <= MARTINGALE_TOL,
    };
    for (p, pi) in perturbations.iter().enumerate() {
        if pi.dim() != sol.own[agent].model.d || pi.len() < sol.own[agent].lattice.steps() {
            return Err(VerifyError::Invalid(format!("perturbation {p} has the wrong shape")));
        }
        let s = sweep_r(spec, sol, &joint, agent, pi);
        report.checked_nodes += s.nodes;
        report.strict_nodes += s.strict;
        if s.max_drift > report.max_violation {
            report.max_violation = s.max_drift;
            if s.max_drift > MARTINGALE_TOL {
                report.violation_location = Some((p, s.drift_loc.0, s.drift_loc.1));
                report.passed = false;
            }
        }
    }
    Ok(report)
}

/// Own-adapted random perturbations `P_A(π̃ + scale·U)`, `U` uniform in
/// `[−1, 1]^d` independently per node.
pub fn random_perturbations(sol: &NAgentBsdeSolution, agent: usize, count: usize, scale: f64, seed: u64) -> Vec<AdaptedProcess> {
    let own = &sol.own[agent];
    let set = &own.model.params.constraint;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            AdaptedProcess::from_fn(&own.lattice, own.model.d, own.lattice.steps() - 1, |t, k| {
                let x: Vec<f64> = own.pi.get(t, k).iter().map(|v| v + scale * rng.gen_range(-1.0..=1.0)).collect();
                project(set, &x)
            })
        })
        .collect()
}

/// `P_A(π + shift)` nodewise.
pub fn shifted_strategy(pi: &AdaptedProcess, lat: &Lattice, set: &ConstraintSet, shift: f64) -> AdaptedProcess {
    AdaptedProcess::from_fn(lat, pi.dim(), pi.len() - 1, |t, k| {
        let x: Vec<f64> = pi.get(t, k).iter().map(|v| v + shift).collect();
        project(set, &x)
    })
}

/// Candidate strategies, all inside the constraint set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyGrid {
    pub points: Vec<Vec<f64>>,
    pub spacing: f64,
    pub per_dim: usize,
}

impl StrategyGrid {
    /// Tensor grid with `per_dim` points on `[lower, upper]`, filtered by `set`.
    pub fn uniform(lower: &[f64], upper: &[f64], per_dim: usize, set: &ConstraintSet) -> Result<Self, VerifyError> {
        let d = lower.len();
        if per_dim == 0 || upper.len() != d {
            return Err(VerifyError::EmptyGrid);
        }
        let axis = |c: usize| -> Vec<f64> {
            if per_dim == 1 {
                vec![0.5 * (lower[c] + upper[c])]
            } else {
                (0..per_dim).map(|s| lower[c] + (upper[c] - lower[c]) * s as f64 / (per_dim - 1) as f64).collect()
            }
        };
        let axes: Vec<Vec<f64>> = (0..d).map(axis).collect();
        let spacing = if per_dim > 1 {
            (0..d).map(|c| (upper[c] - lower[c]) / (per_dim - 1) as f64).fold(0.0, f64::max)
        } else {
            0.0
        };
        let total = per_dim.pow(d as u32);
        let mut points = Vec::new();
        for mut idx in 0..total {
            let mut p = Vec::with_capacity(d);
            for ax in &axes {
                p.push(ax[idx % per_dim]);
                idx /= per_dim;
            }
            if set.contains(&p, MEMBERSHIP_TOL) {
                points.push(p);
            }
        }
        if points.is_empty() {
            return Err(VerifyError::EmptyGrid);
        }
        Ok(StrategyGrid { points, spacing, per_dim })
    }

    /// Default grid on the bounding box of `set ∩ [−5, 5]^d`.
    pub fn for_set(set: &ConstraintSet, d: usize, per_dim: usize) -> Result<Self, VerifyError> {
        let (lo, hi) = set.bounding_box(d);
        let lower: Vec<f64> = lo.iter().map(|v| v.max(-GRID_BOX)).collect();
        let upper: Vec<f64> = hi.iter().map(|v| v.min(GRID_BOX)).collect();
        if lower.iter().zip(&upper).any(|(a, b)| a > b) {
            return Err(VerifyError::EmptyGrid);
        }
        Self::uniform(&lower, &upper, per_dim, set)
    }

    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self, VerifyError> {
        if points.is_empty() {
            return Err(VerifyError::EmptyGrid);
        }
        Ok(StrategyGrid { points, spacing: 0.0, per_dim: 0 })
    }
}

#[derive(Clone, Debug)]
pub struct BestResponse {
    pub value: f64,
    pub argmax: AdaptedProcess,
}

/// `E[exp(−c(X̂_T − log x))]` for agent `j` playing `pi`.
fn others_factor(sol: &NAgentBsdeSolution, j: usize, pi: &AdaptedProcess, c: f64) -> f64 {
    let own = &sol.own[j];
    let lat = &own.lattice;
    let n = lat.steps();
    let mut w = vec![1.0; lat.nodes_at(n)];
    for t in (0..n).rev() {
        let mut cur = vec![0.0; lat.nodes_at(t)];
        for (k, slot) in cur.iter_mut().enumerate() {
            let h = own.model.exposure(pi.get(t, k));
            *slot = step_expectation(lat, t, k, &h, own.theta.get(t, k), -c, &w);
        }
        w = cur;
    }
    w[0]
}

/// `E_t[exp(κΔX̂) W_{t+1}]` at one node for exposure `h`.
#[inline]
fn step_expectation(lat: &Lattice, t: usize, k: usize, h: &[f64], theta: &[f64], kappa: f64, w: &[f64]) -> f64 {
    let dt = lat.dt();
    let sq = lat.sqrt_dt();
    let drift: f64 = h.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() - 0.5 * h.iter().map(|v| v * v).sum::<f64>();
    let nf = lat.n_factors();
    let b = lat.branching();
    let mut acc = 0.0;
    for m in 0..b {
        let mut dx = drift * dt;
        for (f, hf) in h.iter().enumerate().take(nf) {
            dx += hf * Lattice::move_sign(m, f) * sq;
        }
        acc += (kappa * dx).exp() * w[lat.child(t, k, m)];
    }
    acc / b as f64
}

/// Dynamic programme for agent `agent` against `profile` (one strategy per
/// agent on its own lattice). Candidates at each node are the grid points and,
/// when given, `include`'s value at that node. Returns the value and argmax.
///
/// Others' wealth is independent of the agent's own factors and the payoff
/// factorises, so own-adapted strategies are optimal and the programme runs on
/// the agent's own lattice.
pub fn best_response(
    spec: &GameSpec,
    sol: &NAgentBsdeSolution,
    profile: &[AdaptedProcess],
    agent: usize,
    grid: &StrategyGrid,
    include: Option<&AdaptedProcess>,
) -> Result<BestResponse, VerifyError> {
    if grid.points.is_empty() {
        return Err(VerifyError::EmptyGrid);
    }
    let i = agent;
    let n = sol.n();
    if profile.len() != n {
        return Err(VerifyError::Invalid(format!("profile has {} strategies for {n} agents", profile.len())));
    }
    let own = &sol.own[i];
    let gm = own.model.gamma();
    let kappa = gm - sol.coupling(spec, i, i);
    let lat = &own.lattice;
    let steps = lat.steps();
    let maximize = gm > 0.0;
    let grid_h: Vec<Vec<f64>> = grid.points.iter().map(|p| own.model.exposure(p)).collect();
    let mut argmax = AdaptedProcess::zeros(lat, own.model.d, steps - 1);
    let mut w = vec![1.0; lat.nodes_at(steps)];
    for t in (0..steps).rev() {
        let mut cur = vec![0.0; lat.nodes_at(t)];
        for (k, slot) in cur.iter_mut().enumerate() {
            let th = own.theta.get(t, k);
            let mut best = f64::NAN;
            let mut arg: &[f64] = &grid.points[0];
            for (p, h) in grid.points.iter().zip(&grid_h) {
                let v = step_expectation(lat, t, k, h, th, kappa, &w);
                if best.is_nan() || (maximize && v > best) || (!maximize && v < best) {
                    best = v;
                    arg = p;
                }
            }
            if let Some(inc) = include {
                let p = inc.get(t, k);
                let v = step_expectation(lat, t, k, &own.model.exposure(p), th, kappa, &w);
                if (maximize && v > best) || (!maximize && v < best) {
                    best = v;
                    arg = p;
                }
            }
            *slot = best;
            argmax.set(t, k, arg);
        }
        w = cur;
    }
    Ok(BestResponse { value: payoff(spec, sol, profile, i, w[0]), argmax })
}

fn payoff(spec: &GameSpec, sol: &NAgentBsdeSolution, profile: &[AdaptedProcess], i: usize, own_factor: f64) -> f64 {
    let n = sol.n();
    let gm = sol.own[i].model.gamma();
    let kappa = gm - sol.coupling(spec, i, i);
    let mut log_pre = kappa * sol.own[i].model.params.x0.ln();
    let mut prod = own_factor;
    for j in 0..n {
        if j == i {
            continue;
        }
        let c = sol.coupling(spec, i, j);
        if c != 0.0 {
            log_pre -= c * sol.own[j].model.params.x0.ln();
            prod *= others_factor(sol, j, &profile[j], c);
        }
    }
    log_pre.exp() * prod / gm
}

/// Value of agent `agent` playing `pi` against `profile`, by the same
/// programme with a single candidate per node.
pub fn evaluate_strategy(
    spec: &GameSpec,
    sol: &NAgentBsdeSolution,
    profile: &[AdaptedProcess],
    agent: usize,
    pi: &AdaptedProcess,
) -> Result<f64, VerifyError> {
    let own = &sol.own[agent];
    let gm = own.model.gamma();
    let kappa = gm - sol.coupling(spec, agent, agent);
    let lat = &own.lattice;
    let steps = lat.steps();
    let mut w = vec![1.0; lat.nodes_at(steps)];
    for t in (0..steps).rev() {
        let mut cur = vec![0.0; lat.nodes_at(t)];
        for (k, slot) in cur.iter_mut().enumerate() {
            *slot = step_expectation(lat, t, k, &own.model.exposure(pi.get(t, k)), own.theta.get(t, k), kappa, &w);
        }
        w = cur;
    }
    Ok(payoff(spec, sol, profile, agent, w[0]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub points: usize,
    /// Per-dimension bounds; the default box hull of the constraint set when absent.
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { points: DEFAULT_GRID_POINTS, lower: None, upper: None }
    }
}

impl GridConfig {
    pub fn grid_for(&self, set: &ConstraintSet, d: usize) -> Result<StrategyGrid, VerifyError> {
        match (self.lower, self.upper) {
            (Some(lo), Some(hi)) => StrategyGrid::uniform(&vec![lo; d], &vec![hi; d], self.points, set),
            _ => StrategyGrid::for_set(set, d, self.points),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashCertificate {
    /// Best-response value minus the value of the certified strategy.
    pub gains: Vec<f64>,
    pub values: Vec<f64>,
    pub best_values: Vec<f64>,
    pub grid_points: usize,
    pub spacing: f64,
    pub dt: f64,
    pub constant: f64,
    pub epsilon: f64,
    /// One-step martingale residual per agent when the joint tree fits.
    pub martingale_residuals: Option<Vec<f64>>,
    pub passed: bool,
}

impl NashCertificate {
    pub fn max_gain(&self) -> f64 {
        self.gains.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Certifies an arbitrary strategy profile on the solution's lattices.
pub fn certify_profile(
    spec: &GameSpec,
    sol: &NAgentBsdeSolution,
    profile: &[AdaptedProcess],
    grid: &GridConfig,
) -> Result<NashCertificate, VerifyError> {
    let n = sol.n();
    let dt = sol.own[0].lattice.dt();
    let mut gains = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut best_values = Vec::with_capacity(n);
    let mut spacing: f64 = 0.0;
    for i in 0..n {
        let g = grid.grid_for(&sol.own[i].model.params.constraint, sol.own[i].model.d)?;
        spacing = spacing.max(g.spacing);
        let br = best_response(spec, sol, profile, i, &g, Some(&profile[i]))?;
        let v = evaluate_strategy(spec, sol, profile, i, &profile[i])?;
        gains.push(br.value - v);
        values.push(v);
        best_values.push(br.value);
    }
    let epsilon = NASH_EPS_CONSTANT * (dt + spacing);
    let passed = gains.iter().all(|g| *g <= epsilon);
    Ok(NashCertificate {
        gains,
        values,
        best_values,
        grid_points: grid.points,
        spacing,
        dt,
        constant: NASH_EPS_CONSTANT,
        epsilon,
        martingale_residuals: None,
        passed,
    })
}

/// Certifies the solved equilibrium.
pub fn certify_nash(spec: &GameSpec, sol: &NAgentBsdeSolution, grid: &GridConfig) -> Result<NashCertificate, VerifyError> {
    let profile: Vec<AdaptedProcess> = sol.own.iter().map(|o| o.pi.clone()).collect();
    let mut cert = certify_profile(spec, sol, &profile, grid)?;
    if Joint::new(sol).is_ok() {
        let mut res = Vec::with_capacity(sol.n());
        for i in 0..sol.n() {
            res.push(check_martingale_optimality(spec, sol, i, &[])?.max_residual);
        }
        cert.martingale_residuals = Some(res);
    }
    Ok(cert)
}

/// `‖z‖²_BMO = sup over nodes of E[Σ_{s≥t}|z_s|² dt | node]`.
pub fn bmo_sq(lat: &Lattice, z: &AdaptedProcess) -> f64 {
    let steps = lat.steps().min(z.len());
    let dt = lat.dt();
    let mut next: Vec<f64> = vec![0.0; lat.nodes_at(steps)];
    let mut sup: f64 = 0.0;
    for t in (0..steps).rev() {
        let mut cur = vec![0.0; lat.nodes_at(t)];
        for (k, slot) in cur.iter_mut().enumerate() {
            let zz: f64 = z.get(t, k).iter().map(|v| v * v).sum();
            let mut mean = 0.0;
            for m in 0..lat.branching() {
                mean += next[lat.child(t, k, m)];
            }
            *slot = zz * dt + mean / lat.branching() as f64;
            sup = sup.max(*slot);
        }
        next = cur;
    }
    sup
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub max_strategy_gap: f64,
    pub max_value_gap: f64,
    /// Pathwise upper bounds on `max_i ‖√|Γ^{(1)}|‖²_BMO` and `max_i ‖√|Γ^{(2)}|‖²_BMO`.
    pub gamma1_bmo: f64,
    pub gamma2_bmo: f64,
    pub max_a: f64,
    /// `max_i (‖Δ𝒵^{ii}‖²_BMO + Σ_{j≠i} ‖Δ𝒵^{ij}‖²_BMO)`.
    pub delta_z_bmo_sq: f64,
    pub a_dominates: bool,
    pub scaled_distance: f64,
    pub modulus: f64,
    /// `max_i ∫|G_n(i/n, v) − G(i/n, v)| dv`.
    pub row_l1_gap: f64,
    /// `2n‖G_n − G‖²₂ + 2·modulus`.
    pub row_bound_linear: f64,
    /// Square root of the same quantity.
    pub row_bound_sqrt: f64,
    /// `max_i |Σ_{j≠i} λⁿ_ij log x^j − ∫ log x^v G(i/n, v) dv|`.
    pub wealth_gap: f64,
}

impl ConvergenceRow {
    pub const HEADER: [&'static str; 15] = [
        "n",
        "max_strategy_gap",
        "max_value_gap",
        "gamma1_bmo",
        "gamma2_bmo",
        "max_a",
        "delta_z_bmo_sq",
        "a_dominates",
        "scaled_distance",
        "modulus",
        "row_l1_gap",
        "row_bound_linear",
        "row_bound_sqrt",
        "wealth_gap",
        "contraction_ok",
    ];

    fn record(&self) -> Vec<String> {
        vec![
            self.n.to_string(),
            format!("{:e}", self.max_strategy_gap),
            format!("{:e}", self.max_value_gap),
            format!("{:e}", self.gamma1_bmo),
            format!("{:e}", self.gamma2_bmo),
            format!("{:e}", self.max_a),
            format!("{:e}", self.delta_z_bmo_sq),
            self.a_dominates.to_string(),
            format!("{:e}", self.scaled_distance),
            format!("{:e}", self.modulus),
            format!("{:e}", self.row_l1_gap),
            format!("{:e}", self.row_bound_linear),
            format!("{:e}", self.row_bound_sqrt),
            format!("{:e}", self.wealth_gap),
            "true".to_string(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub m: usize,
    pub rho: f64,
    pub rows: Vec<ConvergenceRow>,
    /// Measured `max_u ‖𝒵^u‖_BMO` of the graphon solution.
    pub graphon_bmo: f64,
    pub outer_iterations: usize,
}

impl ConvergenceReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(ConvergenceRow::HEADER)?;
        for r in &self.rows {
            w.write_record(r.record())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Column as a vector, by field accessor.
    pub fn column(&self, f: impl Fn(&ConvergenceRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }
}

/// Finite game with `λ_ij = G(i/n, j/n)` off the diagonal and type-`i/n`
/// agents, built from a graphon-mode specification.
pub fn finite_game_from_graphon(base: &GameSpec, n: usize) -> Result<GameSpec, VerifyError> {
    let g = base
        .graphon()
        .ok_or_else(|| VerifyError::Invalid("the experiment needs a graphon-mode base specification".into()))?;
    let mut lambda = sample_matrix(g, n);
    for (i, row) in lambda.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    let mut spec = base.clone();
    spec.mode = Mode::Finite { lambda, allow_self_weight: false };
    if let crate::model::AgentSource::List(list) = &base.agents {
        if list.len() != 1 {
            spec.agents = crate::model::AgentSource::List(
                (0..n).map(|i| base.agents.at_type((i + 1) as f64 / n as f64)).collect(),
            );
        }
    }
    Ok(spec)
}

fn dense_row_l1(g: &Graphon, n: usize) -> f64 {
    let gn = Graphon::Step { matrix: sample_matrix(g, n) };
    let q = n * DENSE_POINTS.div_ceil(n);
    let mut worst: f64 = 0.0;
    for i in 1..=n {
        let u = i as f64 / n as f64;
        let s: f64 = (0..q)
            .map(|b| {
                let v = (b as f64 + 0.5) / q as f64;
                (gn.eval(u, v) - g.eval(u, v)).abs()
            })
            .sum();
        worst = worst.max(s / q as f64);
    }
    worst
}

/// Runs the finite games for each `n` against one graphon solution at `m`
/// types and collects gaps and diagnostics.
pub fn convergence_experiment(base: &GameSpec, n_list: &[usize], m: usize) -> Result<ConvergenceReport, VerifyError> {
    let graphon = base
        .graphon()
        .cloned()
        .ok_or_else(|| VerifyError::Invalid("the experiment needs a graphon-mode base specification".into()))?;
    if base.common_noise {
        return Err(VerifyError::Invalid("the experiment runs without common noise".into()));
    }
    let mut gspec = base.clone();
    gspec.mode = Mode::Graphon { m, graphon: graphon.clone() };
    let gsol = solve_graphon_bsde_no_common(&gspec)?;
    let constraint = gspec.agent(0).constraint;
    let graphon_bmo = gsol
        .types
        .iter()
        .map(|o| bmo_sq(&o.lattice, &o.z).sqrt())
        .fold(0.0, f64::max);
    let t_horizon = base.horizon;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let wrap = |e: VerifyError| VerifyError::AtN { n, source: Box::new(e) };
        if n < 2 {
            return Err(wrap(VerifyError::Invalid("n must be at least 2".into())));
        }
        let spec = finite_game_from_graphon(&gspec, n).map_err(wrap)?;
        for i in 0..n {
            if spec.agent(i).constraint != constraint {
                return Err(wrap(VerifyError::Invalid("the constraint set must not depend on the type".into())));
            }
        }
        let sol = solve_n_agent_bsde(&spec).map_err(|e| wrap(e.into()))?;
        let mut types = Vec::with_capacity(n);
        for i in 0..n {
            types.push(type_solution_at(&gsol, &gspec, (i + 1) as f64 / n as f64).map_err(|e| wrap(e.into()))?);
        }
        let mut strategy_gap: f64 = 0.0;
        let mut value_gap: f64 = 0.0;
        for i in 0..n {
            let a = &sol.own[i];
            let b = &types[i].own;
            for t in 0..a.lattice.steps() {
                for k in 0..a.lattice.nodes_at(t) {
                    for (x, y) in a.pi.get(t, k).iter().zip(b.pi.get(t, k)) {
                        strategy_gap = strategy_gap.max((x - y).abs());
                    }
                }
            }
            value_gap = value_gap.max((sol.values[i] - types[i].value).abs());
        }

        // Γ bounds: per step, the sum over j≠i ranges over its extreme node values
        let steps = spec.steps;
        let dt = t_horizon / steps as f64;
        let mut ranges1 = vec![vec![(0.0, 0.0); steps]; n];
        let mut ranges2 = vec![vec![(0.0, 0.0); steps]; n];
        for j in 0..n {
            let o = &sol.own[j];
            for t in 0..steps {
                let (mut lo1, mut hi1, mut lo2, mut hi2) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
                for k in 0..o.lattice.nodes_at(t) {
                    let g = o.g.get(t, k);
                    let th = o.theta.get(t, k);
                    let v1: f64 = th.iter().zip(g).map(|(a, b)| a * b).sum();
                    let v2: f64 = g.iter().map(|v| v * v).sum();
                    lo1 = lo1.min(v1);
                    hi1 = hi1.max(v1);
                    lo2 = lo2.min(v2);
                    hi2 = hi2.max(v2);
                }
                ranges1[j][t] = (lo1, hi1);
                ranges2[j][t] = (lo2, hi2);
            }
        }
        let gamma_tilde = spec.gamma_tilde().max(gspec.gamma_tilde());
        let gamma_bar = spec.gamma_bar().max(gspec.gamma_bar());
        let mut theta_sup: f64 = 0.0;
        let mut c0: f64 = 0.0;
        for o in sol.own.iter().chain(gsol.types.iter()) {
            for t in 0..o.lattice.steps() {
                for k in 0..o.lattice.nodes_at(t) {
                    theta_sup = theta_sup.max(o.theta.get(t, k).iter().map(|v| v * v).sum::<f64>().sqrt());
                }
            }
            c0 = c0.max(growth_certificate(&o.model.params.constraint, &o.model.sigma_t, GROWTH_SAMPLES).map_err(|e| wrap(ModelError::from(e).into()))?.c0);
        }
        let tail = (graphon_bmo + t_horizon.sqrt() * theta_sup) / (1.0 - gamma_bar) + t_horizon.sqrt() * c0;
        let rho = spec.rho;
        let mut gamma1: f64 = 0.0;
        let mut gamma2: f64 = 0.0;
        let mut max_a: f64 = 0.0;
        let mut dz: f64 = 0.0;
        for i in 0..n {
            let u = (i + 1) as f64 / n as f64;
            let (mut s1, mut s2) = (0.0, 0.0);
            for t in 0..steps {
                let (c1, c2) = aggregate(&gsol.moments, &graphon, u, t, 0);
                let c2 = 2.0 * c2;
                let (mut lo1, mut hi1, mut lo2, mut hi2) = (0.0, 0.0, 0.0, 0.0);
                for j in 0..n {
                    let l = spec.lambda_n(i, j);
                    if j == i || l == 0.0 {
                        continue;
                    }
                    lo1 += l * ranges1[j][t].0;
                    hi1 += l * ranges1[j][t].1;
                    lo2 += l * ranges2[j][t].0;
                    hi2 += l * ranges2[j][t].1;
                }
                s1 += dt * (lo1 - c1).abs().max((hi1 - c1).abs());
                s2 += dt * (lo2 - c2).abs().max((hi2 - c2).abs());
            }
            gamma1 = gamma1.max(s1);
            gamma2 = gamma2.max(s2);
            let nm1 = (n - 1) as f64;
            let a2 = 2.0 * rho * gamma_tilde * s1
                + rho * gamma_tilde * s2
                + rho * rho * gamma_tilde * gamma_tilde / (nm1 * nm1) * tail * tail;
            max_a = max_a.max(a2.sqrt());

            let own = &sol.own[i];
            let diff = AdaptedProcess::from_fn(&own.lattice, own.z.dim(), own.lattice.steps() - 1, |t, k| {
                own.z.get(t, k).iter().zip(types[i].own.z.get(t, k)).map(|(a, b)| a - b).collect()
            });
            let mut total = bmo_sq(&own.lattice, &diff);
            for (j, part) in sol.interaction[i].iter().enumerate() {
                if let Some(p) = part {
                    total += bmo_sq(&sol.own[j].lattice, &p.z);
                }
            }
            dz = dz.max(total);
        }
        let (scaled, modulus) = sampling_moduli(&graphon, n).map_err(|e| wrap(e.into()))?;
        let row_l1 = dense_row_l1(&graphon, n);
        let linear = 2.0 * scaled + 2.0 * modulus;

        let mut wealth_gap: f64 = 0.0;
        let q = DENSE_POINTS;
        let log_x: Vec<f64> = (0..q).map(|b| gspec.agents.at_type((b as f64 + 0.5) / q as f64).x0.ln()).collect();
        for i in 0..n {
            let u = (i + 1) as f64 / n as f64;
            let discrete: f64 = (0..n)
                .filter(|j| *j != i)
                .map(|j| spec.lambda_n(i, j) * spec.agent(j).x0.ln())
                .sum();
            let integral: f64 = (0..q)
                .map(|b| log_x[b] * graphon.eval(u, (b as f64 + 0.5) / q as f64))
                .sum::<f64>()
                / q as f64;
            wealth_gap = wealth_gap.max((discrete - integral).abs());
        }
        rows.push(ConvergenceRow {
            n,
            max_strategy_gap: strategy_gap,
            max_value_gap: value_gap,
            gamma1_bmo: gamma1,
            gamma2_bmo: gamma2,
            max_a,
            delta_z_bmo_sq: dz,
            a_dominates: dz <= max_a * max_a,
            scaled_distance: scaled,
            modulus,
            row_l1_gap: row_l1,
            row_bound_linear: linear,
            row_bound_sqrt: linear.sqrt(),
            wealth_gap,
        });
    }
    Ok(ConvergenceReport { m, rho: base.rho, rows, graphon_bmo, outer_iterations: gsol.trace.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductBoundCase {
    /// `sup over nodes of E[Σ_{s≥t} E[f_s·g_s | ℱ*_s] dt | node]`.
    pub lhs: f64,
    pub f_norm: f64,
    pub g_norm: f64,
    pub holds: bool,
}

/// Checks the conditional product bound for two adapted processes on a full
/// tree whose common factors generate `ℱ*`.
pub fn conditional_product_check(lat: &Lattice, f: &AdaptedProcess, g: &AdaptedProcess) -> Result<ProductBoundCase, VerifyError> {
    if lat.is_recombining() {
        return Err(VerifyError::Invalid("the product bound is checked on full trees".into()));
    }
    if f.dim() != g.dim() {
        return Err(LatticeError::Dimension { expected: f.dim(), got: g.dim() }.into());
    }
    let steps = lat.steps().min(f.len()).min(g.len());
    let common = lat.common_factors();
    let dt = lat.dt();
    let mut next = vec![0.0; lat.nodes_at(steps)];
    let mut lhs = f64::NEG_INFINITY;
    for t in (0..steps).rev() {
        let nodes = lat.nodes_at(t);
        let keys = lat.key_count(t, &common);
        let mut sums = vec![0.0; keys];
        let mut counts = vec![0usize; keys];
        let mut key_of = vec![0usize; nodes];
        for k in 0..nodes {
            let key = lat.key(t, k, &common);
            key_of[k] = key;
            sums[key] += f.get(t, k).iter().zip(g.get(t, k)).map(|(a, b)| a * b).sum::<f64>();
            counts[key] += 1;
        }
        let mut cur = vec![0.0; nodes];
        for k in 0..nodes {
            let h = sums[key_of[k]] / counts[key_of[k]] as f64;
            let mut mean = 0.0;
            for m in 0..lat.branching() {
                mean += next[lat.child(t, k, m)];
            }
            cur[k] = h * dt + mean / lat.branching() as f64;
            lhs = lhs.max(cur[k]);
        }
        next = cur;
    }
    let f_norm = bmo_sq(lat, f).sqrt();
    let g_norm = bmo_sq(lat, g).sqrt();
    let rhs = f_norm * g_norm;
    Ok(ProductBoundCase { lhs, f_norm, g_norm, holds: lhs <= rhs * (1.0 + 1e-12) + 1e-15 })
}
