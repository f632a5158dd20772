//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MixedRayError {
    /// A point or parameter lies outside the domain an operation supports.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical computation degenerated (singular metric, NaN, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A geodesic exhausted its step budget without reaching a stop surface.
    #[error("trapped ray: {0}")]
    TrappedRay(String),

    /// A pairing such as <vartheta, zeta> fell below its admissibility floor.
    #[error("degenerate pairing: {0}")]
    DegeneratePairing(String),

    /// An iterative solver ran out of iterations.
    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    /// Config file problem; carries the offending line and key when known.
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl MixedRayError {
    pub fn domain(msg: impl Into<String>) -> Self {
        MixedRayError::Domain(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        MixedRayError::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, MixedRayError>;
