//! Learned domain decomposition for `-div(a grad u) = 0`.
//!
//! A resolution-invariant neural operator trained on a canonical square acts
//! as the local solver inside an overlapping Schwarz iteration. An exact
//! finite-volume solver generates the training data and serves as the
//! reference local solver.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boundary;
pub mod error;
pub mod fd_solver;
pub mod grid;
pub mod microstructure;
pub mod operator;
pub mod rng;
pub mod schwarz;
pub mod training;

pub use boundary::{BoundaryLoop, BoundaryTrace, FourierBoundaryParams};
pub use error::{Error, Result};
pub use grid::{GridFunction, GridSpec};
pub use microstructure::{CoefficientField, MicrostructureKind, MicrostructureRecipe};
pub use operator::{OperatorConfig, OperatorParams};
pub use schwarz::{DomainShape, LocalSolver, OracleSolver, SubdomainLayout, SubdomainWindow, SurrogateSolver};
pub use training::{Dataset, Sample, Target, TrainConfig};
