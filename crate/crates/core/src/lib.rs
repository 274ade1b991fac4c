//! Controlling the separation between an active swimmer and its passive
//! target in chaotic flows.
//!
//! The crate is layered bottom-up:
//!
//! - [`flows`]: Batchelor–Kraichnan gradient sampling, the ABC field, and
//!   Euler–Maruyama integration of the separation and tangent dynamics.
//! - [`theory`]: finite-time Lyapunov statistics, stationary separation
//!   densities, the optimal proportional gain, and the closed-form value of
//!   proportional control that serves as the "physicist" baseline.
//! - [`neural`]: a small dense network with exact reverse-mode gradients and
//!   an adaptive-moment optimizer.
//! - [`agents`]: prescribed control, the physicist-baselined actor, A2C,
//!   PPO, and the hybrid switch.
//! - [`training`]: rollouts, returns, training loops and experiment suites.
//! - [`rng`]: counter-based random streams with deterministic fan-out.

pub mod agents;
pub mod error;
pub mod flows;
pub mod neural;
pub mod rng;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
