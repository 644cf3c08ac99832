//! Weak-form estimation of parameters in ODE systems.
//!
//! This crate implements WENDy (Weak-form Estimation of Nonlinear Dynamics):
//! direct, forward-solver-free estimation of the parameter vector `w` in
//! systems of the form
//!
//! ```text
//! du/dt = Theta(u) W,        Theta(u) = [f_1(u) ... f_J(u)]
//! ```
//!
//! from noisy state observations on a uniform time grid. The strong form is
//! converted to its weak form against a basis of compactly supported C-infinity
//! test functions, which removes the data derivative. The resulting linear
//! system has noise in both the design matrix and the response
//! (errors-in-variables), so the ordinary least squares solution is refined by
//! iteratively reweighted least squares with a first-order residual covariance.
//!
//! The main pieces:
//!
//! - [`testfn`] — test-function construction: bump functions, data-driven
//!   minimum-radius selection via an aliased-Fourier integration-error
//!   estimate, and the SVD-orthonormalized multiscale basis.
//! - [`weakform`] — assembly of the weak-form linear system `(G, b)` with
//!   trapezoidal quadrature.
//! - [`wendy`] — the estimators: weak-form OLS and the IRLS refinement, noise
//!   variance estimation, stopping criteria, and parameter covariance.
//! - [`integrate`] — adaptive Dormand-Prince 5(4) and TR-BDF2 integrators for
//!   data generation and the forward-solver baseline.
//! - [`models`] — benchmark model catalog (logistic growth, Lotka-Volterra,
//!   FitzHugh-Nagumo, Hindmarsh-Rose, protein transduction).
//! - [`bench`] — experiment harness: error metrics, Levenberg-Marquardt
//!   forward-solver nonlinear least squares, and noise/resolution sweeps.
//!
//! See the `examples/` directory for runnable end-to-end workflows, and the
//! `wendy` binary for the command-line interface.

pub mod bench;
pub mod cli;
pub mod config;
pub mod integrate;
pub mod models;
pub mod stats;
pub mod testfn;
pub mod types;
pub mod weakform;
pub mod wendy;

pub use types::{
    Dataset, EquationMask, EstimationResult, Feature, FeatureLibrary, ParameterVector, StopReason,
    TimeGrid, WendyError,
};
