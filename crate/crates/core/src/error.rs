//! Error type shared by every module of the workbench.

use thiserror::Error;

/// Failures reported by lattice construction, kernel builds, series algebra and checks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
    #[error("lattice or point-set mismatch: {0}")]
    Mismatch(String),
    #[error("unstable time step: omega*dt = {0:.6} must stay below 2")]
    Unstable(f64),
    #[error("the massless zero mode has no normalisable two-point function")]
    MasslessZeroMode,
    #[error("inverse temperature must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("imaginary offset {u} outside [0, {beta}]")]
    OffsetOutOfRange { u: f64, beta: f64 },
    #[error("truncation orders differ: {0}")]
    OrderMismatch(String),
    #[error("interaction must start at first order in the coupling")]
    NotPerturbative,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("resolution too coarse: {0}")]
    Resolution(String),
    #[error("frequency squared is not positive at t = {0}")]
    NonPositiveFrequency(f64),
    #[error("quadrature failed: {0}")]
    Quadrature(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
