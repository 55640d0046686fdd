//! Learning rigid-spacecraft attitude dynamics from closed-loop simulation data.
//!
//! The crate provides, bottom to top:
//!
//! - [`math`] — small fixed-size vector/matrix/quaternion types.
//! - [`dynamics`] — reaction-wheel-coupled rigid-body equations of motion with
//!   an RK4 integrator; the ground-truth physics for everything above it.
//! - [`sim`] / [`dataset`] — a closed-loop maneuver simulator driven by an MRP
//!   feedback law, and extraction of (state, torque) → Δω training windows.
//! - [`autodiff`] / [`optim`] — a dense-tensor reverse-mode tape sized for the
//!   small networks used here, and an adaptive-moment optimizer.
//! - [`flow`] — the invertible coupling-stack regressor with optional
//!   self-attention output heads.
//! - [`training`] — hybrid data-driven + physics-residual training with
//!   dual-weighted loss balancing.
//! - [`mpc`] — a shooting-based nonlinear predictive attitude controller that
//!   uses the learned model (or the exact dynamics) as its predictor.
//! - [`evaluation`] — regression/control metrics, noise-robustness Monte
//!   Carlo, and a paired signed-rank significance test.

pub mod autodiff;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod math;
pub mod mpc;
pub mod optim;
pub mod sim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
