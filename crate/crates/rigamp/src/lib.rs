//! Multi-layer generalized approximate message passing for rotationally
//! invariant design matrices, with its state-evolution predictor.
//!
//! The library covers the full inference pipeline for a synthetic L-layer
//! observation model `g^l = A_l x^l`, `x^{l+1} = q^l(g^l, eps)`:
//!
//! - [`ensemble`] — sampling of rotationally invariant designs `A = O^T Λ Q`
//!   (Haar factors, configurable spectra) and synthetic problem instances;
//! - [`cumulants`] — spectral moments of `A Aᵀ` (Hutchinson estimates, exact
//!   and closed-form variants) and their conversion to rectangular free
//!   cumulants via a truncated polynomial recursion;
//! - [`denoise`] — Bayes-optimal scalar denoisers and their closed-form
//!   partial derivatives (conditional-Gaussian reductions, the ReLU joint
//!   posterior, prior posteriors, the linear-Gaussian output channel);
//! - [`se`] — the deterministic state-evolution recursion that predicts the
//!   joint statistics of the iterates layer by layer;
//! - [`amp`] — the message-passing engine itself, with memory (Onsager)
//!   coefficients derived from the free cumulants;
//! - [`experiment`] — configuration, multi-trial orchestration and CSV
//!   serialization used by the `rigamp` binary.
//!
//! All randomness flows through explicitly seeded ChaCha streams
//! ([`rng::Streams`]), so every run is reproducible bit for bit regardless
//! of worker count.

pub mod amp;
pub mod cumulants;
pub mod denoise;
pub mod ensemble;
pub mod experiment;
pub mod rng;
pub mod se;
pub(crate) mod smallmat;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped so the CLI can map them onto exit codes: invalid
/// input (dimensions, parameters, configuration) versus numerical failures
/// encountered mid-run.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("spectrum mismatch: {0}")]
    SpecMismatch(String),
    #[error("degenerate model: {0}")]
    DegenerateModel(String),
    #[error("degenerate channel at layer {layer}, iteration {iter}: {detail}")]
    DegenerateChannel {
        layer: usize,
        iter: usize,
        detail: String,
    },
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),
    #[error("non-finite value in {what} at iteration {iter}, layer {layer}")]
    NonFinite {
        what: String,
        iter: usize,
        layer: usize,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True when the error reflects bad user input rather than a numerical
    /// failure; the CLI exits with 1 for the former and 2 for the latter.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidDimension(_)
                | Error::InvalidParameter(_)
                | Error::SpecMismatch(_)
                | Error::Config(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
