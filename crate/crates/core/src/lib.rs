//! Kepler-Heisenberg dynamics and periodic orbit search.
//!
//! The crate simulates a particle moving on the Heisenberg group under the
//! sub-Riemannian kinetic energy and the Folland potential, and finds
//! periodic orbits with k-fold rotational symmetry by minimizing a
//! discretized action and polishing the result with a shooting method.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod group;
pub mod lbfgs;
pub mod loopspace;
pub mod minimizer;
pub mod numfmt;
pub mod shooting;

pub use error::{Error, Result};
pub use group::{GroupPoint, PhasePoint, PotentialParams};
