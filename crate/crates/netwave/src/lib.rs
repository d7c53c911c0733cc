//! Certified reduced-basis solver for damped wave equations on pipe networks.
//!
//! The crate builds a mixed finite-element truth discretization of the damped
//! wave system on a directed graph, integrates it with implicit Euler, trains
//! compatible reduced spaces with a greedy loop driven by rigorous a
//! posteriori error bounds, and certifies reduced trajectories online.

pub mod certify;
pub mod error;
pub mod fem;
pub mod greedy;
pub mod persist;
pub mod forcing;
pub mod integrate;
pub mod network;
pub mod reduce;
pub mod system;

pub use error::{Error, Result};
