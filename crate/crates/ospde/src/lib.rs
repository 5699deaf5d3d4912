//! Numerical solver and verification harness for the obstacle problem of
//! quasilinear stochastic PDEs.
//!
//! The equation solved backward in time on a truncated grid is
//!
//! ```text
//! du + [ 1/2 Δu + f(t,x,u,∇u) + div g(t,x,u,∇u) ] dt + h(t,x,u,∇u)·dB = 0,
//! u(T,·) = Φ,   u ≥ v,
//! ```
//!
//! where the obstacle constraint `u ≥ v` is approximated by penalization:
//! the level-`n` equation carries an extra drift `n (u - v)⁻` and produces a
//! discrete measure `νⁿ = n (u - v)⁻ dt dx` supported where the constraint
//! bites. The crate is organized around that scheme:
//!
//! - [`problem`]: grids, fields, discrete norms, coefficient registry,
//!   problem instances and hypothesis validation.
//! - [`kernel`]: heat-semigroup, resolvent and exponential-averaging
//!   primitives shared by the solver and the verification suite.
//! - [`noise`]: backward driving noise, forward Brownian path batches and
//!   the three discrete stochastic-integral conventions.
//! - [`solver`]: the backward Euler penalized stepper, penalization sweeps,
//!   measure extraction and the projected-SOR obstacle oracle.
//! - [`verify`]: Monte Carlo / analytic checks of the probabilistic
//!   identities satisfied by the solution pair (u, ν).

pub mod kernel;
pub mod noise;
pub mod problem;
pub mod solver;
pub mod verify;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Input outside an operation's domain (nonpositive time, negative rate, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An empirical Lipschitz ratio exceeded the declared constant.
    #[error("hypothesis violation for coefficient {coefficient}: empirical ratio {ratio} exceeds declared bound {declared}")]
    HypothesisViolation {
        coefficient: String,
        ratio: f64,
        declared: f64,
    },

    /// The obstacle exceeds the terminal condition somewhere at t = T.
    #[error("obstacle above terminal condition at {} node(s), first indices {nodes:?}", nodes.len())]
    ObstacleAboveTerminal { nodes: Vec<usize> },

    /// Mismatched array lengths in an integral or combination routine.
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    /// Shape mismatch between fields.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Numerical failure (NaN, solve breakdown) during time stepping.
    #[error("numerical failure at time index {time_index}: {message}")]
    Numerical { time_index: usize, message: String },

    /// Projected SOR failed to reach the residual tolerance.
    #[error("PSOR did not converge within {max_iterations} iterations; last residuals {residual_history:?}")]
    PsorNonConvergence {
        max_iterations: usize,
        residual_history: Vec<f64>,
    },

    /// Invalid configuration of a problem instance.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
