//! Optimal control of the stochastic FitzHugh–Nagumo system with recovery
//! variable: controlled SPDE simulation, the dual backward equation, and the
//! feedback characterization `u* = (∂h)⁻¹(B*p)` inside an Ekeland-regularized
//! outer loop.

pub mod adjoint;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod forward;
pub mod grid;
pub mod harness;
pub mod io;
pub mod noise;
pub mod scenario;
pub mod verify;

pub use error::{Error, Result};
