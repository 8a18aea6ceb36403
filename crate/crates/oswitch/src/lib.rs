//! Solver and validation harness for infinite-horizon optimal multi-modes
//! switching problems.
//!
//! The value functions v¹..vᵐ of an m-mode switching problem solve a
//! system of variational inequalities with interconnected obstacles:
//!
//! ```text
//! min{ vⁱ - max_{j≠i}(vʲ - g_ij),  r vⁱ - L vⁱ - f_i(x, v¹..vᵐ, σᵀ∇vⁱ) } = 0
//! ```
//!
//! This crate localizes the system to a box, discretizes L by a monotone
//! finite-difference scheme, and solves by the monotone outer iteration
//! that rebuilds each mode's single-obstacle problem against the previous
//! sweep's values, with penalized and policy-iteration inner solvers.
//! Solutions are cross-checked three ways: discrete complementarity
//! residuals, ordering/envelope/refinement suites, and Monte Carlo
//! simulation of the induced switching strategies.

pub mod cli;
pub mod config;
pub mod expr;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod qvi;
pub mod rng;
pub mod sde;
pub mod strategy;
pub mod verify;
