//! Model identification for l1 and nuclear-norm regularized least squares.
//!
//! The crate bundles exact proximal and stratum machinery for both norms,
//! deterministic and stochastic proximal-gradient solvers (forward-backward,
//! Prox-SGD, SAGA), the population dual certificate that bounds the
//! identifiable model from above, and an experiment harness that checks the
//! resulting `M_w0 <= M_w <= J*(M*_eta0)` sandwich on random instances.

pub mod certificate;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod problem;
pub mod regularizer;
pub mod rng;
pub mod solver;
pub mod strata;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use regularizer::{Regularizer, StratumTolerance, SubdiffDescriptor};
pub use strata::{Side, Stratum, StratumValue};
