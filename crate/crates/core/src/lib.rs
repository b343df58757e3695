//! Numerical laboratory for ergodic stochastic control via adjoint BSDEs.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod control;
pub mod ebsde;
pub mod ergodicity;
pub mod error;
pub mod hamiltonian;
pub mod linalg;
pub mod model;
pub mod runner;
pub mod rng;
pub mod simulate;
pub mod smp;
pub mod stats;

pub use control::ControlLaw;
pub use error::{Error, Result};
pub use model::ControlledDiffusion;
