//! Bernoulli lattice carrying all processes.
//!
//! Every factor moves by `±√dt` with probability ½ per step, independently.
//! Nodes are either full paths (bit-packed, `F` bits per step) or, in
//! recombining mode, vectors of per-factor up-counts.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on `F·N` for full path trees.
pub const DEFAULT_MAX_TREE: usize = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("full tree with F·N = {0} exceeds the cap {1} (set GE_MAX_TREE to override)")]
    TreeTooLarge(usize, usize),
    #[error("lattice needs at least one step and one factor")]
    Empty,
    #[error("process has {got} values at step {step}, expected {expected}")]
    Shape { step: usize, expected: usize, got: usize },
    #[error("step {0} is outside the process")]
    MissingStep(usize),
    #[error("process varies across factors outside its measurability tag at step {step}, node {node}")]
    Measurability { step: usize, node: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Cap on `F·N` for full trees, honouring `GE_MAX_TREE`.
pub fn max_tree() -> usize {
    max_tree_or(DEFAULT_MAX_TREE)
}

/// `GE_MAX_TREE` if set, otherwise `default`.
pub fn max_tree_or(default: usize) -> usize {
    std::env::var("GE_MAX_TREE")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(default)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorTag {
    Idiosyncratic { owner: usize, component: usize },
    Common,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    steps: usize,
    dt: f64,
    sqrt_dt: f64,
    factors: Vec<FactorTag>,
    recombining: bool,
}

impl Lattice {
    pub fn new(
        steps: usize,
        horizon: f64,
        factors: Vec<FactorTag>,
        recombining: bool,
    ) -> Result<Self, LatticeError> {
        if steps == 0 || factors.is_empty() {
            return Err(LatticeError::Empty);
        }
        let f = factors.len();
        if !recombining && f * steps > max_tree() {
            return Err(LatticeError::TreeTooLarge(f * steps, max_tree()));
        }
        let dt = horizon / steps as f64;
        Ok(Lattice { steps, dt, sqrt_dt: dt.sqrt(), factors, recombining })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }
    pub fn factors(&self) -> &[FactorTag] {
        &self.factors
    }
    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }
    pub fn is_recombining(&self) -> bool {
        self.recombining
    }
    /// Number of children of every node, `2^F`.
    pub fn branching(&self) -> usize {
        1 << self.factors.len()
    }

    /// Indices of the common factors.
    pub fn common_factors(&self) -> Vec<usize> {
        self.factors
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, FactorTag::Common))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn nodes_at(&self, t: usize) -> usize {
        let f = self.factors.len();
        if self.recombining {
            (t + 1).pow(f as u32)
        } else {
            1usize << (f * t)
        }
    }

    /// Sign (`±1`) of factor `f` in child move `m`.
    #[inline]
    pub fn move_sign(m: usize, f: usize) -> f64 {
        if (m >> f) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Index at step `t+1` of child `m` of node `k` at step `t`.
    #[inline]
    pub fn child(&self, t: usize, k: usize, m: usize) -> usize {
        if self.recombining {
            let f = self.factors.len();
            let (b0, b1) = (t + 1, t + 2);
            let mut rest = k;
            let mut out = 0;
            let mut scale = 1;
            for j in 0..f {
                let u = rest % b0 + ((m >> j) & 1);
                rest /= b0;
                out += u * scale;
                scale *= b1;
            }
            out
        } else {
            (k << self.factors.len()) | m
        }
    }

    /// Number of up-moves of factor `f` along the path to node `k` at step `t`.
    pub fn up_count(&self, t: usize, k: usize, f: usize) -> usize {
        if self.recombining {
            (k / (t + 1).pow(f as u32)) % (t + 1)
        } else {
            let nf = self.factors.len();
            (0..t).filter(|s| (k >> (nf * s + f)) & 1 == 1).count()
        }
    }

    /// Sign of the most recent move of factor `f`; `None` at `t = 0` or in
    /// recombining mode, where the path is not stored.
    pub fn last_move(&self, t: usize, k: usize, f: usize) -> Option<f64> {
        if t == 0 || self.recombining {
            return None;
        }
        Some(Self::move_sign(k, f))
    }

    /// Lattice Brownian value `W_t` of factor `f`.
    pub fn brownian(&self, t: usize, k: usize, f: usize) -> f64 {
        let u = self.up_count(t, k, f) as f64;
        (2.0 * u - t as f64) * self.sqrt_dt
    }

    /// Probability of reaching node `k` at step `t`.
    pub fn node_prob(&self, t: usize, k: usize) -> f64 {
        let f = self.factors.len();
        if self.recombining {
            (0..f)
                .map(|j| binomial(t, self.up_count(t, k, j)) * 0.5f64.powi(t as i32))
                .product()
        } else {
            0.5f64.powi((f * t) as i32)
        }
    }

    /// Index of the node's projection onto the factor subset `subset`.
    pub fn key(&self, t: usize, k: usize, subset: &[usize]) -> usize {
        let f = self.factors.len();
        if self.recombining {
            let mut out = 0;
            for (pos, &j) in subset.iter().enumerate() {
                out += self.up_count(t, k, j) * (t + 1).pow(pos as u32);
            }
            out
        } else {
            let mut out = 0;
            let w = subset.len();
            for s in 0..t {
                for (pos, &j) in subset.iter().enumerate() {
                    if (k >> (f * s + j)) & 1 == 1 {
                        out |= 1 << (w * s + pos);
                    }
                }
            }
            out
        }
    }

    /// Number of distinct keys for `subset` at step `t`.
    pub fn key_count(&self, t: usize, subset: &[usize]) -> usize {
        if self.recombining {
            (t + 1).pow(subset.len() as u32)
        } else {
            1 << (subset.len() * t)
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r *= (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// Which factors a process may depend on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Measurability {
    All,
    Factors(Vec<usize>),
}

/// Node-indexed random field: `values[t][k * dim + c]` for steps `0..=len-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedProcess {
    dim: usize,
    values: Vec<Vec<f64>>,
    tag: Measurability,
}

impl AdaptedProcess {
    /// Validated constructor; `values.len()` may be `N` or `N+1`.
    pub fn new(
        lat: &Lattice,
        dim: usize,
        values: Vec<Vec<f64>>,
        tag: Measurability,
    ) -> Result<Self, LatticeError> {
        for (t, v) in values.iter().enumerate() {
            let expected = lat.nodes_at(t) * dim;
            if v.len() != expected {
                return Err(LatticeError::Shape { step: t, expected, got: v.len() });
            }
        }
        if let Measurability::Factors(subset) = &tag {
            for (t, v) in values.iter().enumerate() {
                let mut seen: Vec<Option<usize>> = vec![None; lat.key_count(t, subset)];
                for k in 0..lat.nodes_at(t) {
                    let key = lat.key(t, k, subset);
                    match seen[key] {
                        None => seen[key] = Some(k),
                        Some(first) => {
                            if v[first * dim..(first + 1) * dim] != v[k * dim..(k + 1) * dim] {
                                return Err(LatticeError::Measurability { step: t, node: k });
                            }
                        }
                    }
                }
            }
        }
        Ok(AdaptedProcess { dim, values, tag })
    }

    /// Zero process over steps `0..=last`.
    pub fn zeros(lat: &Lattice, dim: usize, last: usize) -> Self {
        let values = (0..=last).map(|t| vec![0.0; lat.nodes_at(t) * dim]).collect();
        AdaptedProcess { dim, values, tag: Measurability::All }
    }

    /// Builds a process from a node function, without a tag check.
    pub fn from_fn(
        lat: &Lattice,
        dim: usize,
        last: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Self {
        let values = (0..=last)
            .map(|t| {
                let mut v = Vec::with_capacity(lat.nodes_at(t) * dim);
                for k in 0..lat.nodes_at(t) {
                    let x = f(t, k);
                    debug_assert_eq!(x.len(), dim);
                    v.extend_from_slice(&x);
                }
                v
            })
            .collect();
        AdaptedProcess { dim, values, tag: Measurability::All }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn tag(&self) -> &Measurability {
        &self.tag
    }
    /// Number of stored steps.
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    #[inline]
    pub fn get(&self, t: usize, k: usize) -> &[f64] {
        &self.values[t][k * self.dim..(k + 1) * self.dim]
    }
    #[inline]
    pub fn set(&mut self, t: usize, k: usize, v: &[f64]) {
        self.values[t][k * self.dim..(k + 1) * self.dim].copy_from_slice(v);
    }
    pub fn step(&self, t: usize) -> &[f64] {
        &self.values[t]
    }
    pub fn step_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.values[t]
    }

    /// Largest absolute entry over all nodes and components.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// CSV dump with columns `step,node_index,component,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "node_index", "component", "value"])?;
        for (t, v) in self.values.iter().enumerate() {
            for (idx, x) in v.iter().enumerate() {
                w.write_record(&[
                    t.to_string(),
                    (idx / self.dim).to_string(),
                    (idx % self.dim).to_string(),
                    format!("{x:e}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `E[proc_{t+1} | node (t, k)]`: equal-weight average over the children.
pub fn cond_expect(
    lat: &Lattice,
    proc: &AdaptedProcess,
    t: usize,
    k: usize,
) -> Result<Vec<f64>, LatticeError> {
    if t + 1 >= proc.len() {
        return Err(LatticeError::MissingStep(t + 1));
    }
    let dim = proc.dim();
    let b = lat.branching();
    let mut acc = vec![0.0; dim];
    for m in 0..b {
        let v = proc.get(t + 1, lat.child(t, k, m));
        for c in 0..dim {
            acc[c] += v[c];
        }
    }
    let w = 1.0 / b as f64;
    acc.iter_mut().for_each(|x| *x *= w);
    Ok(acc)
}

/// Martingale-representation coefficients `Z_f = E_t[proc·ξ_f]/√dt`, where
/// `ξ_f = ±√dt` is the increment of factor `f`. Returned as `[f][c]`.
pub fn martingale_coeffs(
    lat: &Lattice,
    proc: &AdaptedProcess,
    t: usize,
    k: usize,
) -> Result<Vec<f64>, LatticeError> {
    if t + 1 >= proc.len() {
        return Err(LatticeError::MissingStep(t + 1));
    }
    let dim = proc.dim();
    let nf = lat.n_factors();
    let b = lat.branching();
    let mut z = vec![0.0; nf * dim];
    for m in 0..b {
        let v = proc.get(t + 1, lat.child(t, k, m));
        for f in 0..nf {
            let s = Lattice::move_sign(m, f);
            for c in 0..dim {
                z[f * dim + c] += s * v[c];
            }
        }
    }
    let w = 1.0 / (b as f64 * lat.sqrt_dt);
    z.iter_mut().for_each(|x| *x *= w);
    Ok(z)
}

/// Scalar fast path: mean and per-factor coefficients of a scalar step slice.
#[inline]
pub(crate) fn mean_and_coeffs(lat: &Lattice, next: &[f64], t: usize, k: usize, z: &mut [f64]) -> f64 {
    let b = lat.branching();
    let nf = lat.n_factors();
    z.iter_mut().for_each(|x| *x = 0.0);
    let mut mean = 0.0;
    for m in 0..b {
        let v = next[lat.child(t, k, m)];
        mean += v;
        for (f, zf) in z.iter_mut().enumerate().take(nf) {
            *zf += Lattice::move_sign(m, f) * v;
        }
    }
    let w = 1.0 / b as f64;
    let wz = w / lat.sqrt_dt;
    z.iter_mut().for_each(|x| *x *= wz);
    mean * w
}

/// Log-wealth path together with the (full-tree) lattice it lives on.
#[derive(Clone, Debug)]
pub struct WealthPath {
    pub lattice: Lattice,
    pub log_wealth: AdaptedProcess,
}

/// Full-tree copy of a lattice and the map from its nodes to the original's.
pub fn full_tree_of(lat: &Lattice) -> Result<(Lattice, Box<dyn Fn(usize, usize) -> usize + '_>), LatticeError> {
    let full = Lattice::new(lat.steps, lat.steps as f64 * lat.dt, lat.factors.clone(), false)?;
    let map: Box<dyn Fn(usize, usize) -> usize + '_> = if lat.recombining {
        let full2 = full.clone();
        Box::new(move |t, k| {
            let mut idx = 0;
            let mut scale = 1;
            for f in 0..lat.n_factors() {
                idx += full2.up_count(t, k, f) * scale;
                scale *= t + 1;
            }
            idx
        })
    } else {
        Box::new(|_, k| k)
    };
    Ok((full, map))
}

/// Forward log-wealth `X̂` of agent `agent` under strategy `π` given on the
/// agent's own lattice `lat`. Wealth is path dependent, so recombining
/// lattices are lifted to the full tree first.
pub fn simulate_log_wealth(
    spec: &crate::model::GameSpec,
    lat: &Lattice,
    strategy: &AdaptedProcess,
    agent: usize,
) -> Result<WealthPath, crate::model::ModelError> {
    let model = crate::model::AgentModel::new(&spec.agent(agent))?;
    if strategy.dim() != model.d {
        return Err(LatticeError::Dimension { expected: model.d, got: strategy.dim() }.into());
    }
    if strategy.len() < lat.steps {
        return Err(LatticeError::MissingStep(strategy.len()).into());
    }
    let (full, map) = full_tree_of(lat)?;
    let n = full.steps();
    let dt = full.dt();
    let nf = full.n_factors().min(model.d + 1);
    let mut x = AdaptedProcess::zeros(&full, 1, n);
    x.set(0, 0, &[model.params.x0.ln()]);
    for t in 0..n {
        for k in 0..full.nodes_at(t) {
            let src = map(t, k);
            let h = model.exposure(strategy.get(t, src));
            let th = model.theta(lat, t, src);
            let drift: f64 = h.iter().zip(&th).map(|(a, b)| a * b).sum::<f64>() - 0.5 * h.iter().map(|v| v * v).sum::<f64>();
            let x0 = x.get(t, k)[0] + drift * dt;
            for m in 0..full.branching() {
                let mut v = x0;
                for (f, hf) in h.iter().enumerate().take(nf) {
                    v += hf * Lattice::move_sign(m, f) * full.sqrt_dt();
                }
                x.set(t + 1, full.child(t, k, m), &[v]);
            }
        }
    }
    Ok(WealthPath { lattice: full, log_wealth: x })
}
