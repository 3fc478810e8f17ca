//! Small-noise density expansions for projected hypoelliptic diffusions.
//!
//! Given a diffusion
//!
//! ```text
//!   dX = b(eps, X) dt + eps sum_{i=1..m} sigma_i(X) dW_i,   X(0) = x0 + eps x0_hat,
//! ```
//!
//! with b(eps, .) = sigma_0 + O(eps), and a coordinate projection P onto l of
//! the d state coordinates, the density of P X(T) at a point `a` admits the
//! small-noise expansion
//!
//! ```text
//!   f(eps) = exp(-c1/eps^2) exp(c2/eps) eps^{-l} (c0 + O(eps)),
//! ```
//!
//! provided the energy-minimizing controls steering the limiting ODE from x0
//! to the fiber {P x = a} are non-degenerate. This crate computes the leading
//! exponents c1 and c2 by solving the associated Hamiltonian boundary value
//! problem, certifies the non-degeneracy assumptions behind the expansion, and
//! cross-checks the prediction against direct Monte Carlo simulation.
//!
//! Module map:
//! - [`model`]: the vector-field systems (builtin catalogue + polynomial DSL);
//! - [`hamiltonian`]: the Hamiltonian flow, variational equations, energies;
//! - [`bvp`]: multi-start shooting for the two-point boundary value problem;
//! - [`nondegeneracy`]: Malliavin covariance, non-focality, Hessian oracle,
//!   Hormander bracket diagnostics;
//! - [`expansion`]: assembly of c1 and c2, plus the short-time specialization;
//! - [`montecarlo`]: Euler scheme, kernel density estimates, exponent
//!   recovery for validation.

pub mod bvp;
pub mod error;
pub mod expansion;
pub mod hamiltonian;
pub mod model;
pub mod montecarlo;
pub mod nondegeneracy;
pub mod numeric;
pub mod poly;
pub mod tolerances;

pub use error::{Error, Result};
pub use model::{ModelConfig, VectorFieldSystem};

// The public API passes nalgebra types; re-export the matching version.
pub use nalgebra;
