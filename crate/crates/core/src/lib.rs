//! Stochastic convex Bolza problems on finite scenario trees.
//!
//! The crate covers the whole pipeline for discrete-time stochastic control
//! problems of Bolza type whose randomness lives on a finite probability
//! space:
//!
//! * [`probspace`]: scenario trees, filtrations as partition chains, adapted
//!   processes and conditional expectations.
//! * [`convexcalc`]: quadratic-plus-polyhedral convex functions, their
//!   conjugates, subgradients, proximal maps and inf-projections.
//! * [`qp`]: the Douglas–Rachford splitting engine used by every solve.
//! * [`bolza`]: primal and dual Bolza problems, value functions and duality
//!   reports.
//! * [`characteristics`]: Hamiltonians, Euler–Lagrange residuals,
//!   transversality and subgradient propagation.
//! * [`lcontrol`]: linear-convex and linear-quadratic control on top of the
//!   Bolza layer.
//! * [`oracleverify`]: brute-force oracles and randomized duality fuzzing.
//! * [`cli`]: the `stochbolza` command line front-end.

pub mod bolza;
pub mod characteristics;
pub mod cli;
pub mod convexcalc;
pub mod exec;
pub mod extreal;
pub mod io;
pub mod lcontrol;
pub mod linalg;
pub mod oracleverify;
pub mod probspace;
pub mod qp;



pub use bolza::{BolzaProblem, DualBolzaProblem, SolveConfig, SolveReport, SolveStatus};
pub use convexcalc::{LiftedConvex, SetDescriptor, StructuredConvex};
pub use exec::Exec;
pub use extreal::ExtReal;
pub use probspace::{Process, Schedule, ScenarioTree};
