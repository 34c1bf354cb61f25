//! Spatial data assimilation with Gaussian Markov random field priors and
//! re-weighted Gaussian message passing.
//!
//! The prior is the finite-difference discretization of the Matérn SPDE
//! `(kappa^2 - Laplacian)^(alpha/2) f = W` on a rectangular lattice, which gives
//! a sparse precision matrix. Point observations are folded into the node
//! potentials, and posterior means come from damped, re-weighted message
//! passing, optionally warm-started across a coarse-to-fine hierarchy.
//!
//! A 3D-Var baseline, a dense exact oracle, a synthetic data generator, and a
//! domain-decomposed executor live alongside the core solver.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod graph;
pub mod grid;
pub mod io;
pub mod mp;
pub mod multigrid;
pub mod operator;
pub mod oracle;
pub mod parallel;
pub mod solve;
pub mod var3d;

pub use error::{Error, Result};
pub use graph::{FactorGraph, Observation, ObservationSet};
pub use grid::{Boundary, GridSpec};
pub use mp::{Marginals, Message, MessageStore, RunOutcome, Status, SweepEngine};
pub use multigrid::{GmrfPrior, LevelPlan, MultigridOutcome};
pub use operator::{Hyperparams, SparseOperator};
pub use oracle::Field;
pub use parallel::{Partition, PartitionedOutcome, Traffic};
pub use solve::{Method, PartitionSpec, Solution, SolveOptions, SolveStatus};
pub use var3d::{GradientTest, LbfgsOptions, LbfgsStatus, VarProblem};
