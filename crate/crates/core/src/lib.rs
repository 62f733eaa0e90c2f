//! Monte Carlo and finite-difference solvers for parabolic Robin boundary
//! problems on the nonnegative orthant.
//!
//! The probabilistic side simulates reflected Brownian paths through the
//! explicit Skorokhod map, accumulates boundary local times and evaluates
//! Feynman–Kac functionals. Two routes to the solution are provided: the
//! direct representation with correlated drivers, and a decomposition
//! `u = φ + ψ` where `φ` solves a problem without cross-derivative terms
//! (independent drivers, factorizable expectations) and `ψ` carries the
//! cross terms as a source with homogeneous Robin data.
//!
//! A two-dimensional Crank–Nicolson ADI solver serves as an independent
//! oracle, and [`harness`] wires everything to configuration files and the
//! command line.

pub mod densities;
pub mod estimators;
pub mod expr;
pub mod fd_oracle;
pub mod harness;
pub mod model;
pub mod normal;
pub mod paths;
pub mod quad;
pub mod rng;
pub mod stats;

pub use estimators::{EstimateResult, QueryPoint};
pub use expr::Expr;
pub use model::{ModelParams, ProblemSpec};
