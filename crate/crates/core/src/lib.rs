//! Selective mean-field control of opinion dynamics with transient leaders.
//!
//! Agents carry a position `x` and a probability vector `λ` over a finite set
//! of labels (followers and one or more leader populations). The crate
//! integrates the controlled particle system, the mean-field continuity
//! equation on a finite-volume grid, a one-step MPC controller for both, and
//! the transport-metric diagnostics that compare them.

pub mod audit;
pub mod error;
pub mod experiments;
pub mod fv;
pub mod grid;
pub mod model;
pub mod mpc;
pub mod particle;
pub mod state;
pub mod transport;

pub use error::{Error, Result};
