//! Low-rank Riemannian optimization toolkit.
//!
//! This crate implements trust-region minimization on the manifold of
//! fixed-rank matrices, with an exact inverse for projected Sylvester-type
//! model Hessians used as a trust-region preconditioner. On top of the
//! solver sit four benchmark energies (a Lyapunov equation, a semilinear
//! elliptic equation, and the variational implicit time steps of an
//! Allen-Cahn and a Fisher-KPP equation) and the low-rank time integrators
//! that chain those steps together.
//!
//! Module map:
//! - [`kernels`]: banded operators, factored (low-rank) matrices, Hadamard
//!   algebra, shifted banded solves.
//! - [`manifold`]: points and tangent vectors of the fixed-rank manifold,
//!   metric, projection, retraction.
//! - [`precond`]: the saddle-point based inverse of `ξ ↦ P_X(c(Bξ + ξC))`.
//! - [`rtr`]: Riemannian trust region with truncated CG inner solves.
//! - [`problems`]: the four benchmark energies as [`rtr::RtrProblem`]s.
//! - [`integrators`]: dense reference integrators and the rank-adaptive
//!   low-rank schemes built from repeated trust-region solves.

// `!(x > 0.0)` guards reject NaN together with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod integrators;
pub mod kernels;
pub mod manifold;
pub mod precond;
pub mod problems;
pub mod rtr;

pub use error::{Error, Result};
