//! Optimal transport of probability densities under stochastic control.
//!
//! A controlled diffusion `dX = (f(X) + G(X) u) dt + √(2ε) dW` on a box is
//! lifted to the linear Fokker-Planck equation for its density. Writing the
//! control as a flux `v = ρ u` turns the ergodic control problem into a
//! convex program in `(ρ, v)`, whose dual is a dynamic-programming recursion
//! over value functions. This crate discretizes both sides on a tensor grid:
//!
//! * [`operators`] assembles a positivity- and mass-preserving upwind
//!   finite-volume scheme and its semi-implicit time stepping;
//! * [`dp`] runs the dual recursion (finite horizon and ergodic);
//! * [`fpk`] propagates densities under the resulting feedback and
//!   measures the exponential decay to the stationary density;
//! * [`analysis`] checks the Lyapunov and Bakry-Emery certificates that
//!   guarantee existence of an ergodic optimum and exponential convergence;
//! * [`sde`] simulates sample paths under the tabulated feedback;
//! * [`io`] reads and writes the grid-field files consumed by plotting tools.
//!
//! ```
//! use otdp::model::{load_example, ExampleId};
//! use otdp::grid::Grid;
//! use otdp::operators::DiscreteSystem;
//!
//! let problem = load_example(ExampleId::Lqg1d);
//! let grid = Grid::uniform(&problem.domain, 41).unwrap();
//! let system = DiscreteSystem::build(&problem, &grid, 0.05).unwrap();
//! let (ra, rb) = system.conservation_residuals();
//! assert!(ra < 1e-10 && rb < 1e-10);
//! ```

pub mod analysis;
pub mod conjugate;
pub mod dp;
pub mod expr;
pub mod fpk;
pub mod grid;
pub mod io;
pub mod model;
pub mod operators;
pub mod sde;
pub mod sparse;

pub use dp::{solve_ergodic, solve_finite_horizon, ErgodicOptions, ErgodicSolution};
pub use grid::Grid;
pub use model::{load_example, ExampleId, ProblemSpec};
pub use operators::DiscreteSystem;

/// Everything that can go wrong between reading a configuration and writing results.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("point {0:?} lies outside the domain")]
    OutOfDomain(Vec<f64>),
    #[error("operator assembly failed: {0}")]
    Assembly(String),
    #[error("time step too large for a positive explicit control update; largest admissible step is {max_step:e}")]
    StepTooLarge { max_step: f64 },
    #[error("negative mass {value:e} at node {node}")]
    PositivityViolation { node: usize, value: f64 },
    #[error("linear solve failed: {0}")]
    LinearSolve(String),
    #[error("no convergence after {iterations} iterations (last update {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("expression evaluation failed: {0}")]
    Eval(#[from] expr::EvalError),
    #[error("incompatible data: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/problems.md")]
    pub struct Problems;
    #[doc = include_str!("../../../book/src/discretization.md")]
    pub struct Discretization;
    #[doc = include_str!("../../../book/src/dynamic-programming.md")]
    pub struct DynamicProgramming;
    #[doc = include_str!("../../../book/src/densities.md")]
    pub struct Densities;
    #[doc = include_str!("../../../book/src/certificates.md")]
    pub struct Certificates;
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub struct Simulation;
    #[doc = include_str!("../../../book/src/file-formats.md")]
    pub struct FileFormats;
}
