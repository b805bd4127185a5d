//! Distance-based multi-agent relative state estimation.
//!
//! Sensor coordinates of every agent are estimated from noisy inter-sensor
//! ranges, rigid-body calibration and attitude readings, then converted back
//! to poses. Two block coordinate descent solvers are provided: a convex
//! edge-based semidefinite relaxation that needs no initial guess, and a
//! low-rank bi-convex local search used for refinement and tracking.

pub mod bm;
pub mod error;
pub mod esdp;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod partition;
pub mod recover;
pub mod schedule;
pub mod scenario;

pub use error::{Error, Result};
