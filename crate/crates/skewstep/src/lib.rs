//! Fixed-step simulation of deterministic fast-slow skew-product systems
//! and quantification of the statistical bias that time discretization
//! leaves in the slow variables.
//!
//! A skew-product system couples a slow scalar variable to a fast chaotic
//! driver,
//!
//! ```text
//! dx/dt = (1/eps)  h(x) f0(y) + f(x, y)
//! dy/dt = (1/eps^2) g(y)
//! ```
//!
//! and in the limit of infinite time-scale separation the slow variable is
//! described by a homogenized SDE whose drift is an ergodic average and
//! whose diffusion is a Green-Kubo integral. Discretizing with a fixed-step
//! one-step method changes that limit: the Euler map homogenizes to an SDE
//! with an extra drift term, so ensembles converge to a density with the
//! wrong mean. Second-order methods shrink the effect, and the second-order
//! Taylor method removes the drift bias entirely.
//!
//! The crate provides the pieces needed to observe and quantify all of
//! this end to end:
//!
//! - [`dynamics`] — the skew-product system abstraction and the concrete
//!   Rossler-driven square-root (CIR-type) slow system,
//! - [`integrators`] — Euler, Heun and second-order Taylor steppers plus
//!   the multiple-time-stepping driver (K fast substeps per slow step),
//! - [`modified_eqs`] — truncated backward-error (modified) vector fields
//!   and elevated-order convergence checks,
//! - [`homogenization`] — ergodic averages, autocorrelations, continuous
//!   and discrete Green-Kubo estimators, and the homogenized CIR
//!   parameter maps,
//! - [`cir`] — the exact CIR transition density (scaled noncentral
//!   chi-squared), its moments, and an Euler-Maruyama oracle sampler,
//! - [`ensemble`] — seeded trajectory ensembles, histogram densities and
//!   density-comparison reports,
//! - [`cli`] — declarative experiment configs and the command
//!   implementations behind the `skewstep` binary.
//!
//!Every major capability has a runnable example under `examples/`;
//! start with `cargo run --release --example ensemble_bias`.

pub mod cir;
pub mod cli;
pub mod dynamics;
pub mod ensemble;
pub mod homogenization;
pub mod integrators;
pub mod modified_eqs;
pub mod quad;
pub mod rng;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid configuration or parameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// A trajectory step failed (e.g. positivity rejection).
    #[error("step {index} failed: {reason}")]
    Step { index: usize, reason: String },
    /// A statistical estimator rejected its input or output.
    #[error("estimator rejected: {0}")]
    Estimator(String),
    /// Filesystem failure while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
