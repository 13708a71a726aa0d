//! Graphon game on `m` midpoint types.
//!
//! The mean-field coupling only enters through the aggregate field
//! `A(t[, common node], u) = Σ_v w·G(u, v)·E[θᵀg − ½|g|² | ℱ*]`, so the outer
//! iteration runs on that field; each pass solves `m` decoupled type BSDEs.
//! With common noise the types are additionally coupled through the
//! `g`-map, solved per step and common node.

use serde::{Deserialize, Serialize};

use crate::lattice::{max_tree_or, mean_and_coeffs, AdaptedProcess, FactorTag, Lattice};
use crate::model::{type_location, AgentModel, GameSpec, Graphon, Scheme};
use crate::n_agent_solver::{check_spec, solve_own, OwnSolution, PicardReport, SolverError};

pub const OUTER_TOL: f64 = 1e-10;
pub const OUTER_TOL_COMMON: f64 = 1e-9;
pub const OUTER_MAX_ITERS: usize = 200;
/// Non-contracting outer iterations tolerated before switching to damping ½.
pub const FALLBACK_AFTER: usize = 50;
pub const GMAP_TOL: f64 = 1e-13;
pub const GMAP_MAX_ITERS: usize = 200;
/// Deltas below this are rounding noise and ignored for the rate estimate.
pub const RATE_FLOOR: f64 = 1e-9;
/// Cap on `(d+1)·N` for the common-noise type lattices.
pub const COMMON_TREE_CAP: usize = 20;

/// Per-type expectations `E[θᵀg | ℱ*]`, `E[½|g|² | ℱ*]` and
/// `E[g_last | ℱ*]`, indexed `[type][step][common key]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeMoments {
    pub locations: Vec<f64>,
    pub e1: Vec<Vec<Vec<f64>>>,
    pub e2: Vec<Vec<Vec<f64>>>,
    pub e3: Vec<Vec<Vec<f64>>>,
}

impl TypeMoments {
    fn new(m: usize, steps: usize, keys: impl Fn(usize) -> usize) -> Self {
        let mk = || (0..m).map(|_| (0..steps).map(|t| vec![0.0; keys(t)]).collect()).collect();
        TypeMoments { locations: (0..m).map(|k| type_location(k, m)).collect(), e1: mk(), e2: mk(), e3: mk() }
    }

    pub fn steps(&self) -> usize {
        self.e1.first().map_or(0, |v| v.len())
    }
}

/// Midpoint quadrature of `G(u, ·)` against the type moments:
/// returns `(∫E[θᵀg]G(u,v)dv, ∫E[½|g|²]G(u,v)dv)` at step `t` and common key.
pub fn aggregate(moments: &TypeMoments, graphon: &Graphon, u: f64, t: usize, key: usize) -> (f64, f64) {
    let w = 1.0 / moments.locations.len() as f64;
    let mut a1 = 0.0;
    let mut a2 = 0.0;
    for (k, v) in moments.locations.iter().enumerate() {
        let gw = w * graphon.eval(u, *v);
        a1 += gw * moments.e1[k][t][key];
        a2 += gw * moments.e2[k][t][key];
    }
    (a1, a2)
}

/// Aggregates at every type location, `[step][common key][type]`, plus the
/// common-exposure average `C` used by the `g`-map.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateField {
    pub locations: Vec<f64>,
    pub a1: Vec<Vec<Vec<f64>>>,
    pub a2: Vec<Vec<Vec<f64>>>,
    pub c: Vec<Vec<Vec<f64>>>,
}

impl AggregateField {
    fn zeros(m: usize, steps: usize, keys: impl Fn(usize) -> usize) -> Self {
        let mk = || (0..steps).map(|t| vec![vec![0.0; m]; keys(t)]).collect::<Vec<_>>();
        AggregateField { locations: (0..m).map(|k| type_location(k, m)).collect(), a1: mk(), a2: mk(), c: mk() }
    }

    fn from_moments(moments: &TypeMoments, graphon: &Graphon) -> Self {
        let m = moments.locations.len();
        let w = 1.0 / m as f64;
        let steps = moments.steps();
        let mut out = AggregateField::zeros(m, steps, |t| moments.e1[0][t].len());
        for t in 0..steps {
            for key in 0..moments.e1[0][t].len() {
                for (a, u) in moments.locations.iter().enumerate() {
                    let (x1, x2) = aggregate(moments, graphon, *u, t, key);
                    out.a1[t][key][a] = x1;
                    out.a2[t][key][a] = x2;
                    out.c[t][key][a] = moments
                        .locations
                        .iter()
                        .enumerate()
                        .map(|(b, v)| w * graphon.eval(*u, *v) * moments.e3[b][t][key])
                        .sum();
                }
            }
        }
        out
    }

    /// Sup-norm distance over all three components.
    pub fn distance(&self, other: &AggregateField) -> f64 {
        let mut d: f64 = 0.0;
        for (x, y) in [(&self.a1, &other.a1), (&self.a2, &other.a2), (&self.c, &other.c)] {
            for (p, q) in x.iter().flatten().flatten().zip(y.iter().flatten().flatten()) {
                d = d.max((p - q).abs());
            }
        }
        d
    }

    fn blend(&self, next: &AggregateField, damping: f64) -> AggregateField {
        let mix = |x: &Vec<Vec<Vec<f64>>>, y: &Vec<Vec<Vec<f64>>>| {
            x.iter()
                .zip(y)
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(p, q)| p.iter().zip(q).map(|(s, r)| (1.0 - damping) * s + damping * r).collect())
                        .collect()
                })
                .collect()
        };
        AggregateField {
            locations: self.locations.clone(),
            a1: mix(&self.a1, &next.a1),
            a2: mix(&self.a2, &next.a2),
            c: mix(&self.c, &next.c),
        }
    }

    /// CSV with columns `step,common_node,type,component,value`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "common_node", "type", "component", "value"])?;
        for (t, keys) in self.a1.iter().enumerate() {
            for (key, row) in keys.iter().enumerate() {
                for k in 0..row.len() {
                    for (name, v) in [("a1", self.a1[t][key][k]), ("a2", self.a2[t][key][k]), ("c", self.c[t][key][k])] {
                        w.write_record(&[t.to_string(), key.to_string(), k.to_string(), name.to_string(), format!("{v:e}")])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GraphonBsdeSolution {
    pub locations: Vec<f64>,
    pub types: Vec<OwnSolution>,
    /// `𝒴₀^u`.
    pub y0: Vec<f64>,
    pub values: Vec<f64>,
    pub aggregate: AggregateField,
    pub moments: TypeMoments,
    /// Outer sup-norm deltas.
    pub trace: Vec<f64>,
    pub damping: f64,
    pub common_noise: bool,
    /// Largest measured `g`-map contraction rate (0 without common noise).
    pub gmap_rate: f64,
    pub picard: PicardReport,
}

impl GraphonBsdeSolution {
    /// Measured ratio of the last two outer deltas above the rounding floor.
    pub fn outer_rate(&self) -> f64 {
        rate_of(&self.trace)
    }
}

fn rate_of(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .filter(|w| w[0] >= RATE_FLOOR)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max)
}

/// `ργ^u Σ_v w·G(u, v) log x^v`.
fn wealth_shift(spec: &GameSpec, graphon: &Graphon, locations: &[f64], u: f64, gamma: f64) -> f64 {
    let w = 1.0 / locations.len() as f64;
    let s: f64 = locations
        .iter()
        .enumerate()
        .map(|(k, v)| w * graphon.eval(u, *v) * spec.agent(k).x0.ln())
        .sum();
    spec.rho * gamma * s
}

fn value_of(model: &AgentModel, y: f64) -> f64 {
    let g = model.gamma();
    model.params.x0.powf(g) / g * y.exp()
}

fn check_graphon_spec(spec: &GameSpec, common: bool) -> Result<Graphon, SolverError> {
    check_spec(spec)?;
    let g = spec
        .graphon()
        .cloned()
        .ok_or_else(|| SolverError::Unsupported("graphon solver needs a graphon-mode specification".into()))?;
    if !common && spec.common_noise {
        return Err(SolverError::Unsupported("common noise requested; use the common-noise solver".into()));
    }
    Ok(g)
}

/// No-common-noise moments of one type solution.
fn fill_moments(own: &OwnSolution, e1: &mut [Vec<f64>], e2: &mut [Vec<f64>]) {
    let lat = &own.lattice;
    for t in 0..lat.steps() {
        let (mut s1, mut s2) = (0.0, 0.0);
        for k in 0..lat.nodes_at(t) {
            let p = lat.node_prob(t, k);
            let g = own.g.get(t, k);
            let th = own.theta.get(t, k);
            let tg: f64 = th.iter().zip(g).map(|(a, b)| a * b).sum();
            let gg: f64 = g.iter().map(|v| v * v).sum();
            s1 += p * tg;
            s2 += p * 0.5 * gg;
        }
        e1[t][0] = s1;
        e2[t][0] = s2;
    }
}

/// Type solution against a deterministic generator shift: the own BSDE with
/// zero shift plus the time integral of the shift, which leaves `Z` and the
/// strategy untouched by the aggregate.
fn solve_shifted(
    model: &AgentModel,
    lat: Lattice,
    scheme: Scheme,
    shift: &dyn Fn(usize) -> f64,
    rep: &mut PicardReport,
) -> Result<OwnSolution, SolverError> {
    let mut own = solve_own(model, lat, scheme, 0.0, &|_| 0.0, rep)?;
    let dt = own.lattice.dt();
    let mut tail = 0.0;
    for t in (0..own.lattice.steps()).rev() {
        tail += shift(t) * dt;
        own.y.step_mut(t).iter_mut().for_each(|y| *y += tail);
    }
    Ok(own)
}

/// Outer Picard bookkeeping shared by both solvers.
struct Outer {
    trace: Vec<f64>,
    damping: f64,
    non_contracting: usize,
}

impl Outer {
    fn new() -> Self {
        Outer { trace: Vec::new(), damping: 1.0, non_contracting: 0 }
    }

    /// Records a delta; returns an error once the budget is spent.
    fn record(&mut self, delta: f64, iter: usize) -> Result<(), SolverError> {
        if let Some(prev) = self.trace.last() {
            if delta >= *prev && *prev > 0.0 {
                self.non_contracting += 1;
                if self.non_contracting >= FALLBACK_AFTER && self.damping == 1.0 {
                    self.damping = 0.5;
                    self.non_contracting = 0;
                }
            }
        }
        self.trace.push(delta);
        if iter + 1 >= OUTER_MAX_ITERS {
            return Err(SolverError::NonConvergence {
                module: "graphon_solver",
                location: "outer aggregate iteration".into(),
                iterations: OUTER_MAX_ITERS,
                factor: rate_of(&self.trace),
            });
        }
        Ok(())
    }
}

/// Solves the graphon game without common noise.
pub fn solve_graphon_bsde_no_common(spec: &GameSpec) -> Result<GraphonBsdeSolution, SolverError> {
    let graphon = check_graphon_spec(spec, false)?;
    let m = spec.population();
    let n = spec.steps;
    let mut models = Vec::with_capacity(m);
    for k in 0..m {
        let model = AgentModel::new(&spec.agent(k))?;
        if model.params.has_common_loading() {
            return Err(SolverError::Unsupported("common loading in the no-common-noise solver".into()));
        }
        let lat = model.own_lattice(k, n, spec.horizon, false)?;
        models.push((model, lat));
    }
    let locations: Vec<f64> = (0..m).map(|k| type_location(k, m)).collect();
    let mut agg = AggregateField::zeros(m, n, |_| 1);
    let mut outer = Outer::new();
    let mut rep = PicardReport::default();
    for iter in 0.. {
        let mut types = Vec::with_capacity(m);
        let mut moments = TypeMoments::new(m, n, |_| 1);
        for (k, (model, lat)) in models.iter().enumerate() {
            let c = spec.rho * model.gamma();
            let a = &agg;
            let shift = move |t: usize| -c * (a.a1[t][0][k] - a.a2[t][0][k]);
            let own = solve_shifted(model, lat.clone(), spec.scheme, &shift, &mut rep)?;
            fill_moments(&own, &mut moments.e1[k], &mut moments.e2[k]);
            types.push(own);
        }
        let next = AggregateField::from_moments(&moments, &graphon);
        let delta = agg.distance(&next);
        if delta <= OUTER_TOL {
            outer.trace.push(delta);
            return Ok(finish(spec, &graphon, locations, types, agg, moments, outer, false, 0.0, rep));
        }
        outer.record(delta, iter)?;
        agg = agg.blend(&next, outer.damping);
    }
    unreachable!()
}

#[allow(clippy::too_many_arguments)]
fn finish(
    spec: &GameSpec,
    graphon: &Graphon,
    locations: Vec<f64>,
    types: Vec<OwnSolution>,
    aggregate: AggregateField,
    moments: TypeMoments,
    outer: Outer,
    common_noise: bool,
    gmap_rate: f64,
    picard: PicardReport,
) -> GraphonBsdeSolution {
    let y0: Vec<f64> = types.iter().map(|o| o.y.get(0, 0)[0]).collect();
    let values = types
        .iter()
        .zip(&y0)
        .zip(&locations)
        .map(|((o, y), u)| value_of(&o.model, y - wealth_shift(spec, graphon, &locations, *u, o.model.gamma())))
        .collect();
    GraphonBsdeSolution {
        locations,
        types,
        y0,
        values,
        aggregate,
        moments,
        trace: outer.trace,
        damping: outer.damping,
        common_noise,
        gmap_rate,
        picard,
    }
}

/// Solution of a single type `u` against a converged no-common-noise
/// aggregate: the type's own BSDE, `𝒴₀^u` and `V₀^u`.
#[derive(Clone, Debug)]
pub struct TypeSolution {
    pub u: f64,
    pub own: OwnSolution,
    pub y0: f64,
    pub value: f64,
}

pub fn type_solution_at(sol: &GraphonBsdeSolution, spec: &GameSpec, u: f64) -> Result<TypeSolution, SolverError> {
    if sol.common_noise {
        return Err(SolverError::Unsupported("type evaluation needs a no-common-noise solution".into()));
    }
    let graphon = spec
        .graphon()
        .ok_or_else(|| SolverError::Unsupported("type evaluation needs a graphon-mode specification".into()))?;
    let model = AgentModel::new(&spec.agents.at_type(u))?;
    let lat = model.own_lattice(0, spec.steps, spec.horizon, false)?;
    let c = spec.rho * model.gamma();
    let agg: Vec<(f64, f64)> = (0..spec.steps).map(|t| aggregate(&sol.moments, graphon, u, t, 0)).collect();
    let shift = |t: usize| -c * (agg[t].0 - agg[t].1);
    let mut rep = PicardReport::default();
    let own = solve_shifted(&model, lat, spec.scheme, &shift, &mut rep)?;
    let y0 = own.y.get(0, 0)[0];
    let value = value_of(&model, y0 - wealth_shift(spec, graphon, &sol.locations, u, model.gamma()));
    Ok(TypeSolution { u, own, y0, value })
}

/// Largest change at any node when the solution is re-swept once against the
/// aggregate recomputed from its own strategies.
pub fn self_consistency_residual(sol: &GraphonBsdeSolution, spec: &GameSpec) -> Result<f64, SolverError> {
    let graphon = spec
        .graphon()
        .ok_or_else(|| SolverError::Unsupported("graphon-mode specification required".into()))?;
    let agg = AggregateField::from_moments(&sol.moments, graphon);
    let mut worst: f64 = 0.0;
    for (k, own) in sol.types.iter().enumerate() {
        let lat = &own.lattice;
        let gm = own.model.gamma();
        let mut z = vec![0.0; lat.n_factors()];
        for t in (0..lat.steps()).rev() {
            let next = own.y.step(t + 1);
            for node in 0..lat.nodes_at(t) {
                let mean = mean_and_coeffs(lat, next, t, node, &mut z);
                let th = own.theta.get(t, node);
                let key = if sol.common_noise { common_key(lat, t, node) } else { 0 };
                let mut zs = z.clone();
                zs.resize(own.model.d + 1, 0.0);
                if sol.common_noise {
                    let last = zs.len() - 1;
                    zs[last] -= spec.rho * gm * agg.c[t][key][k];
                }
                let g = own.model.g(&zs, th);
                let f = own.model.own_generator(&zs, th, &g) - spec.rho * gm * (agg.a1[t][key][k] - agg.a2[t][key][k]);
                let y = mean + f * lat.dt();
                worst = worst.max((y - own.y.get(t, node)[0]).abs());
            }
        }
    }
    Ok(worst)
}

fn common_key(lat: &Lattice, t: usize, k: usize) -> usize {
    lat.key(t, k, &[lat.n_factors() - 1])
}

/// Inputs of the `g`-map at one step and common node: for each type, the
/// nodes sharing that common node with their conditional probabilities.
#[derive(Clone, Debug)]
pub struct GMapProblem {
    pub rho: f64,
    /// `w·G(u_a, u_b)`.
    pub weights: Vec<Vec<f64>>,
    /// Stacked `(Z̃, Z̃*)` per type and node.
    pub ztilde: Vec<Vec<Vec<f64>>>,
    pub theta: Vec<Vec<Vec<f64>>>,
    pub prob: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct GMapSolution {
    /// `Z*` per type and node.
    pub z_star: Vec<Vec<f64>>,
    pub g: Vec<Vec<Vec<f64>>>,
    /// Conditional common exposure `C^u`.
    pub c: Vec<f64>,
    /// Successive sup-norm deltas.
    pub trace: Vec<f64>,
    pub rate: f64,
    pub residual: f64,
}

/// `(1−γ̄)/γ̃`: the `g`-map is refused at or above this interaction weight.
pub fn gmap_threshold(gamma_bar: f64, gamma_tilde: f64) -> f64 {
    (1.0 - gamma_bar) / gamma_tilde
}

/// Lipschitz bound `ργ̃/(1−γ̄)` of the `g`-map in the sup norm.
pub fn gmap_bound(rho: f64, gamma_bar: f64, gamma_tilde: f64) -> f64 {
    rho * gamma_tilde / (1.0 - gamma_bar)
}

fn gmap_eval(models: &[AgentModel], p: &GMapProblem, zs: &[Vec<f64>]) -> (Vec<Vec<Vec<f64>>>, Vec<f64>) {
    let m = models.len();
    let mut g = Vec::with_capacity(m);
    let mut mean_last = vec![0.0; m];
    for b in 0..m {
        let d = models[b].d;
        let mut gb = Vec::with_capacity(zs[b].len());
        for (node, zstar) in zs[b].iter().enumerate() {
            let mut z = p.ztilde[b][node].clone();
            z[d] = *zstar;
            let gv = models[b].g(&z, &p.theta[b][node]);
            mean_last[b] += p.prob[b][node] * gv[d];
            gb.push(gv);
        }
        g.push(gb);
    }
    let c = (0..m).map(|a| (0..m).map(|b| p.weights[a][b] * mean_last[b]).sum()).collect();
    (g, c)
}

/// Fixed point of `Z* = Z̃* − ργ^u C^u(Z*)` by Picard iteration.
pub fn g_fixed_point(models: &[AgentModel], p: &GMapProblem) -> Result<GMapSolution, SolverError> {
    let gamma_bar = models.iter().map(|m| m.gamma()).fold(f64::NEG_INFINITY, f64::max);
    let gamma_tilde = models.iter().map(|m| m.gamma().abs()).fold(0.0, f64::max);
    let bound = gmap_threshold(gamma_bar, gamma_tilde);
    if p.rho >= bound {
        return Err(SolverError::ContractionBound { rho: p.rho, bound });
    }
    let m = models.len();
    let mut zs: Vec<Vec<f64>> = (0..m).map(|b| p.ztilde[b].iter().map(|z| z[models[b].d]).collect()).collect();
    let mut trace = Vec::new();
    for _ in 0..GMAP_MAX_ITERS {
        let (_, c) = gmap_eval(models, p, &zs);
        let mut delta: f64 = 0.0;
        let next: Vec<Vec<f64>> = (0..m)
            .map(|a| {
                let shift = p.rho * models[a].gamma() * c[a];
                p.ztilde[a]
                    .iter()
                    .zip(&zs[a])
                    .map(|(zt, old)| {
                        let v = zt[models[a].d] - shift;
                        delta = delta.max((v - old).abs());
                        v
                    })
                    .collect()
            })
            .collect();
        zs = next;
        trace.push(delta);
        if delta <= GMAP_TOL {
            let (g, c) = gmap_eval(models, p, &zs);
            let mut residual: f64 = 0.0;
            for a in 0..m {
                let shift = p.rho * models[a].gamma() * c[a];
                for (zt, z) in p.ztilde[a].iter().zip(&zs[a]) {
                    residual = residual.max((zt[models[a].d] - shift - z).abs());
                }
            }
            return Ok(GMapSolution { z_star: zs, g, c, rate: rate_of(&trace), trace, residual });
        }
    }
    Err(SolverError::NonConvergence {
        module: "graphon_solver",
        location: "g-map".into(),
        iterations: GMAP_MAX_ITERS,
        factor: rate_of(&trace),
    })
}

/// Solves the graphon game with a common factor shared by all types.
pub fn solve_graphon_bsde_common_noise(spec: &GameSpec) -> Result<GraphonBsdeSolution, SolverError> {
    let graphon = check_graphon_spec(spec, true)?;
    if spec.scheme == Scheme::Implicit {
        return Err(SolverError::Unsupported("the common-noise solver uses the explicit scheme".into()));
    }
    let m = spec.population();
    let n = spec.steps;
    let cap = max_tree_or(COMMON_TREE_CAP);
    let mut models = Vec::with_capacity(m);
    let mut lats = Vec::with_capacity(m);
    for k in 0..m {
        let model = AgentModel::new(&spec.agent(k))?;
        let mut factors: Vec<FactorTag> =
            (0..model.d).map(|c| FactorTag::Idiosyncratic { owner: k, component: c }).collect();
        factors.push(FactorTag::Common);
        if factors.len() * n > cap {
            return Err(crate::lattice::LatticeError::TreeTooLarge(factors.len() * n, cap).into());
        }
        lats.push(Lattice::new(n, spec.horizon, factors, false)?);
        models.push(model);
    }
    let locations: Vec<f64> = (0..m).map(|k| type_location(k, m)).collect();
    let w = 1.0 / m as f64;
    let weights: Vec<Vec<f64>> =
        locations.iter().map(|u| locations.iter().map(|v| w * graphon.eval(*u, *v)).collect()).collect();
    let keys = |t: usize| 1usize << t;
    // node lists per type, step and common key
    let groups: Vec<Vec<Vec<Vec<usize>>>> = lats
        .iter()
        .map(|lat| {
            (0..n)
                .map(|t| {
                    let mut g = vec![Vec::new(); keys(t)];
                    for k in 0..lat.nodes_at(t) {
                        g[common_key(lat, t, k)].push(k);
                    }
                    g
                })
                .collect()
        })
        .collect();

    let mut agg = AggregateField::zeros(m, n, keys);
    let mut outer = Outer::new();
    let mut gmap_rate: f64 = 0.0;
    for iter in 0.. {
        let mut moments = TypeMoments::new(m, n, keys);
        let mut y: Vec<AdaptedProcess> = lats.iter().map(|l| AdaptedProcess::zeros(l, 1, n)).collect();
        let mut z: Vec<AdaptedProcess> = lats.iter().zip(&models).map(|(l, md)| AdaptedProcess::zeros(l, md.d + 1, n - 1)).collect();
        let mut z_raw = z.clone();
        let mut gp = z.clone();
        let mut th = z.clone();
        let mut pi: Vec<AdaptedProcess> = lats.iter().zip(&models).map(|(l, md)| AdaptedProcess::zeros(l, md.d, n - 1)).collect();
        for t in (0..n).rev() {
            let mut means: Vec<Vec<f64>> = Vec::with_capacity(m);
            for a in 0..m {
                let lat = &lats[a];
                let next = y[a].step(t + 1).to_vec();
                let mut zc = vec![0.0; lat.n_factors()];
                let mut mv = Vec::with_capacity(lat.nodes_at(t));
                for k in 0..lat.nodes_at(t) {
                    mv.push(mean_and_coeffs(lat, &next, t, k, &mut zc));
                    z[a].set(t, k, &zc);
                    th[a].set(t, k, &models[a].theta(lat, t, k));
                }
                means.push(mv);
            }
            for key in 0..keys(t) {
                let p = GMapProblem {
                    rho: spec.rho,
                    weights: weights.clone(),
                    ztilde: (0..m).map(|a| groups[a][t][key].iter().map(|k| z[a].get(t, *k).to_vec()).collect()).collect(),
                    theta: (0..m).map(|a| groups[a][t][key].iter().map(|k| th[a].get(t, *k).to_vec()).collect()).collect(),
                    prob: (0..m)
                        .map(|a| {
                            let c = groups[a][t][key].len() as f64;
                            vec![1.0 / c; groups[a][t][key].len()]
                        })
                        .collect(),
                };
                let sol = g_fixed_point(&models, &p)?;
                gmap_rate = gmap_rate.max(sol.rate);
                for a in 0..m {
                    let d = models[a].d;
                    let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
                    for (idx, k) in groups[a][t][key].iter().enumerate() {
                        let g = &sol.g[a][idx];
                        let thv = th[a].get(t, *k).to_vec();
                        let mut zr = p.ztilde[a][idx].clone();
                        zr[d] = sol.z_star[a][idx];
                        let pr = p.prob[a][idx];
                        s1 += pr * thv.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
                        s2 += pr * 0.5 * g.iter().map(|v| v * v).sum::<f64>();
                        s3 += pr * g[d];
                        let f = models[a].own_generator(&zr, &thv, g)
                            - spec.rho * models[a].gamma() * (agg.a1[t][key][a] - agg.a2[t][key][a]);
                        y[a].set(t, *k, &[means[a][*k] + f * lats[a].dt()]);
                        z_raw[a].set(t, *k, &zr);
                        gp[a].set(t, *k, g);
                        pi[a].set(t, *k, &models[a].strategy_from_g(g));
                    }
                    moments.e1[a][t][key] = s1;
                    moments.e2[a][t][key] = s2;
                    moments.e3[a][t][key] = s3;
                }
            }
        }
        let next = AggregateField::from_moments(&moments, &graphon);
        let delta = agg.distance(&next);
        if delta <= OUTER_TOL_COMMON {
            outer.trace.push(delta);
            let mut types = Vec::with_capacity(m);
            for (a, lat) in lats.into_iter().enumerate() {
                types.push(OwnSolution {
                    model: models[a].clone(),
                    lattice: lat,
                    y: y[a].clone(),
                    z: z[a].clone(),
                    z_raw: z_raw[a].clone(),
                    g: gp[a].clone(),
                    pi: pi[a].clone(),
                    theta: th[a].clone(),
                });
            }
            return Ok(finish(spec, &graphon, locations, types, agg, moments, outer, true, gmap_rate, PicardReport::default()));
        }
        outer.record(delta, iter)?;
        agg = agg.blend(&next, outer.damping);
    }
    unreachable!()
}
