//! Analytic equilibria for deterministic coefficients and the single-agent
//! benchmark.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClosedFormError {
    #[error("denominator {0:e} is numerically zero")]
    ZeroDenominator(f64),
    #[error("theta path and piece lengths differ")]
    Shape,
}

const DENOM_TOL: f64 = 1e-12;

/// Deterministic equilibrium exposures `σπ` per agent and their values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormEquilibrium {
    pub n_agent_exposure: Vec<Vec<f64>>,
    pub graphon_exposure: Vec<Vec<f64>>,
    pub gap_bound: Vec<f64>,
}

/// `σπ = θ/(1 − γ + ργλⁿ_ii)`.
pub fn prop_n_agent_strategy(theta: &[f64], gamma: f64, rho: f64, lambda_self_n: f64) -> Result<Vec<f64>, ClosedFormError> {
    let den = 1.0 - gamma + rho * gamma * lambda_self_n;
    if den.abs() <= DENOM_TOL {
        return Err(ClosedFormError::ZeroDenominator(den));
    }
    Ok(theta.iter().map(|t| t / den).collect())
}

/// `σπ = θ/(1 − γ)`.
pub fn prop_graphon_strategy(theta: &[f64], gamma: f64) -> Result<Vec<f64>, ClosedFormError> {
    prop_n_agent_strategy(theta, gamma, 0.0, 0.0)
}

/// `ργ̃λⁿ_ii|θ| / |(1−γ)(1−γ+ργλⁿ_ii)|`.
pub fn prop_gap_bound(
    theta: &[f64],
    gamma: f64,
    gamma_tilde: f64,
    rho: f64,
    lambda_self_n: f64,
) -> Result<f64, ClosedFormError> {
    let den = ((1.0 - gamma) * (1.0 - gamma + rho * gamma * lambda_self_n)).abs();
    if den <= DENOM_TOL {
        return Err(ClosedFormError::ZeroDenominator(den));
    }
    let norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
    Ok(rho * gamma_tilde * lambda_self_n * norm / den)
}

/// Benchmark `(Y₀, V₀)` for `ρ = 0` with θ piecewise constant: `durations[p]`
/// is the length of piece `p` and `theta[p]` its value.
pub fn merton_benchmark(theta: &[Vec<f64>], durations: &[f64], gamma: f64, x0: f64) -> Result<(f64, f64), ClosedFormError> {
    if theta.len() != durations.len() {
        return Err(ClosedFormError::Shape);
    }
    let mut y0 = 0.0;
    for (th, dur) in theta.iter().zip(durations) {
        let n2: f64 = th.iter().map(|t| t * t).sum();
        y0 += gamma * n2 / (2.0 * (1.0 - gamma)) * dur;
    }
    Ok((y0, x0.powf(gamma) / gamma * y0.exp()))
}
