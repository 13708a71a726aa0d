//! Lattice solvers and certification tools for relative-performance CRRA
//! portfolio games, in the finite-agent and the graphon formulation.
//!
//! All processes live on a Bernoulli lattice with increments `±√dt`, so
//! conditional expectations and martingale-representation coefficients are
//! exact finite averages. The modules are layered bottom-up:
//!
//! * [`model`]: game specifications, coefficient validation, graphons.
//! * [`projection`]: constraint sets and projections onto `ΣᵀA`.
//! * [`lattice`]: the probability carrier and adapted processes.
//! * [`closed_form`]: analytic equilibria used as ground truth.
//! * [`n_agent_solver`]: backward solver for the finite game.
//! * [`graphon_solver`]: aggregate fixed point and the common-noise solver.
//! * [`verify`]: martingale-optimality, best responses, convergence study.
//! * [`io`]: CSV and JSON emission helpers.

pub mod closed_form;
pub mod graphon_solver;
pub mod io;
pub mod lattice;
pub mod model;
pub mod n_agent_solver;
pub mod projection;
pub mod verify;

pub use lattice::{AdaptedProcess, Lattice};
pub use model::{AgentParams, GameSpec, Graphon};
pub use projection::ConstraintSet;
