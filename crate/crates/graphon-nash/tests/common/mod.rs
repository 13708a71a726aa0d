#![allow(dead_code)]

use graphon_nash::model::{AgentSource, DriftFamily, DriftModel, Lin, LinVec, Mode, Scheme, TypeFamily};
use graphon_nash::{AgentParams, ConstraintSet, GameSpec, Graphon};

pub fn scalar_agent(gamma: f64, x0: f64, sigma: f64, mu: DriftModel, constraint: ConstraintSet) -> AgentParams {
    AgentParams { gamma, x0, mu, sigma: vec![vec![sigma]], sigma_star: None, constraint }
}

pub fn constant(v: f64) -> DriftModel {
    DriftModel::Constant { value: vec![v] }
}

pub fn last_move(base: f64, amp: f64) -> DriftModel {
    DriftModel::LastMove { base: vec![base], amp: vec![amp] }
}

pub fn finite(agents: Vec<AgentParams>, lambda: Vec<Vec<f64>>, rho: f64, steps: usize, self_weight: bool) -> GameSpec {
    GameSpec {
        mode: Mode::Finite { lambda, allow_self_weight: self_weight },
        rho,
        horizon: 1.0,
        steps,
        agents: AgentSource::List(agents),
        common_noise: false,
        seed: 7,
        scheme: Scheme::Explicit,
    }
}

/// Unit weights off the diagonal and `diag` on it (normalised by `n−1` in the game).
pub fn mean_field_lambda(n: usize, diag: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { diag } else { 1.0 }).collect())
        .collect()
}

pub fn lin(a: f64, b: f64) -> Lin {
    Lin { a, b }
}

pub fn linv(a: f64, b: f64) -> LinVec {
    LinVec { a: vec![a], b: vec![b] }
}

pub fn family(gamma: Lin, x0: Lin, mu: DriftFamily, sigma: f64, constraint: ConstraintSet) -> AgentSource {
    AgentSource::Family(TypeFamily { gamma, x0, mu, sigma: vec![vec![sigma]], sigma_star: None, constraint })
}

pub fn graphon_spec(agents: AgentSource, graphon: Graphon, m: usize, rho: f64, steps: usize) -> GameSpec {
    GameSpec {
        mode: Mode::Graphon { m, graphon },
        rho,
        horizon: 1.0,
        steps,
        agents,
        common_noise: false,
        seed: 11,
        scheme: Scheme::Explicit,
    }
}

/// Projection of `g` onto `σA` for a scalar agent.
fn clamp(x: f64, sigma: f64, set: &ConstraintSet) -> f64 {
    sigma * clamp_pi(x / sigma, set)
}

fn clamp_pi(x: f64, set: &ConstraintSet) -> f64 {
    match set {
        ConstraintSet::FullSpace => x,
        ConstraintSet::NonNegativeOrthant => x.max(0.0),
        ConstraintSet::Box { lower, upper } => x.clamp(lower[0], upper[0]),
        _ => panic!("oracle handles intervals only"),
    }
}

/// Brute-force coupled BSDE for scalar agents on the joint full tree, with
/// agent `j`'s factor at bit position `j` of every move. Drifts are
/// `LastMove` or `Constant`. Returns `𝒴[t][node][i]` and
/// `𝒵[t][node][i][j]`.
pub struct JointOracle {
    pub y: Vec<Vec<Vec<f64>>>,
    pub z: Vec<Vec<Vec<Vec<f64>>>>,
    pub n: usize,
}

fn theta_at(a: &AgentParams, last: Option<f64>) -> f64 {
    let s = a.sigma[0][0];
    match &a.mu {
        DriftModel::Constant { value } => value[0] / s,
        DriftModel::LastMove { base, amp } => (base[0] + amp[0] * last.unwrap_or(0.0)) / s,
        _ => panic!("oracle handles constant and last-move drifts"),
    }
}

pub fn joint_oracle(spec: &GameSpec) -> JointOracle {
    let n = spec.population();
    let agents: Vec<AgentParams> = (0..n).map(|i| spec.agent(i)).collect();
    let steps = spec.steps;
    let dt = spec.horizon / steps as f64;
    let sq = dt.sqrt();
    let b = 1usize << n;
    let lam = |i: usize, j: usize| spec.lambda_n(i, j);
    let sign = |m: usize, j: usize| if (m >> j) & 1 == 1 { 1.0 } else { -1.0 };
    let mut y: Vec<Vec<Vec<f64>>> = vec![Vec::new(); steps + 1];
    let mut z: Vec<Vec<Vec<Vec<f64>>>> = vec![Vec::new(); steps];
    y[steps] = vec![vec![0.0; n]; b.pow(steps as u32)];
    for t in (0..steps).rev() {
        let count = b.pow(t as u32);
        let mut yt = vec![vec![0.0; n]; count];
        let mut zt = vec![vec![vec![0.0; n]; n]; count];
        for k in 0..count {
            // the last move at t is the low block of k
            let last: Vec<Option<f64>> = (0..n).map(|j| if t == 0 { None } else { Some(sign(k % b, j)) }).collect();
            let theta: Vec<f64> = (0..n).map(|j| theta_at(&agents[j], last[j])).collect();
            let mut zz = vec![vec![0.0; n]; n];
            let mut mean = vec![0.0; n];
            for m in 0..b {
                let child = &y[t + 1][k * b + m];
                for i in 0..n {
                    mean[i] += child[i] / b as f64;
                    for j in 0..n {
                        zz[i][j] += sign(m, j) * child[i] / (b as f64 * sq);
                    }
                }
            }
            // self-weight fixed point per agent
            let mut g = vec![0.0; n];
            let mut zdiag = vec![0.0; n];
            for j in 0..n {
                let gm = agents[j].gamma;
                let c = spec.rho * gm * lam(j, j);
                let mut zj = zz[j][j];
                let mut gj = clamp((zj + theta[j]) / (1.0 - gm), agents[j].sigma[0][0], &agents[j].constraint);
                for _ in 0..500 {
                    let next = zz[j][j] - c * gj;
                    let done = (next - zj).abs() <= 1e-16 * (1.0 + next.abs());
                    zj = next;
                    gj = clamp((zj + theta[j]) / (1.0 - gm), agents[j].sigma[0][0], &agents[j].constraint);
                    if done {
                        break;
                    }
                }
                g[j] = gj;
                zdiag[j] = zj;
            }
            for i in 0..n {
                let gm = agents[i].gamma;
                let mut f = 0.0;
                for j in 0..n {
                    let c = spec.rho * gm * lam(i, j);
                    f += 0.5 * (zz[i][j] - c * g[j]).powi(2);
                    f -= c * (theta[j] * g[j] - 0.5 * g[j] * g[j]);
                }
                let a = (zdiag[i] + theta[i]) / (1.0 - gm);
                f += gm / (2.0 * (1.0 - gm)) * (zdiag[i] + theta[i]).powi(2) - gm * (1.0 - gm) / 2.0 * (a - g[i]).powi(2);
                yt[k][i] = mean[i] + f * dt;
            }
            zt[k] = zz;
        }
        y[t] = yt;
        z[t] = zt;
    }
    JointOracle { y, z, n }
}

impl JointOracle {
    /// Own full-tree node of agent `j` inside joint node `k` at step `t`.
    pub fn own_node(&self, t: usize, k: usize, j: usize) -> usize {
        let b = 1usize << self.n;
        let mut idx = 0;
        let mut rest = k;
        let mut moves = Vec::with_capacity(t);
        for _ in 0..t {
            moves.push((rest % b >> j) & 1);
            rest /= b;
        }
        for bit in moves.iter().rev() {
            idx = (idx << 1) | bit;
        }
        idx
    }
}

/// Midpoint rule on `[0, 1]` with `q` cells.
pub fn midpoint(q: usize, f: impl Fn(f64) -> f64) -> f64 {
    (0..q).map(|b| f((b as f64 + 0.5) / q as f64)).sum::<f64>() / q as f64
}
