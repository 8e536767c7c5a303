//! Finite-horizon optimal switching with arbitrarily many modes, solved by
//! control randomization and constrained backward SDEs.
//!
//! The controller of a diffusion picks a piecewise-constant mode process and
//! pays a cost at every switch. Instead of solving a system of reflected
//! equations (one per mode), the mode process is replaced by an exogenous
//! Poisson-driven one and the optimization moves to intensity controls `ν`
//! acting through a Doléans-Dade change of measure. The value is then the
//! initial datum `Y₀` of a single scalar BSDE whose jump field `U` is
//! constrained by the switching cost, solved here by penalization and
//! backward least-squares regression over simulated scenarios.
//!
//! Module map:
//! - [`modespace`]: the mode set `A`, its intensity measure `λ`, metric,
//!   sampling, quadrature and nearest-point projection.
//! - [`problem`]: switching-problem instances (path-dependent coefficients),
//!   assumption validation, and a small benchmark catalog.
//! - [`simulate`]: Brownian grids, marked point processes, mode paths, and
//!   Euler-Maruyama state paths.
//! - [`strategy`]: feedback switching policies and Monte Carlo evaluation of
//!   the primal reward, plus truncation/projection of policies.
//! - [`girsanov`]: intensity controls, Doléans-Dade weights, and the
//!   randomized (dual) reward.
//! - [`bsde`]: the penalized and reflected backward regression solvers and
//!   the ε-optimal intensity control extracted from their surfaces.
//! - [`oracle`]: a dynamic-programming ground truth for Markovian
//!   finite-mode instances.
//! - [`cli`]: config parsing, experiment orchestration and report emission.

pub mod bsde;
pub mod cli;
pub mod config;
pub mod girsanov;
pub mod modespace;
pub mod oracle;
pub mod problem;
pub mod simulate;
pub mod strategy;
pub mod stream;

pub use modespace::{Mode, ModeSpace};
pub use problem::SwitchingProblem;
