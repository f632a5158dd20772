//! Transverse and mixed geodesic ray transforms on Riemannian charts with
//! convex boundary.
//!
//! The crate covers the full desk-scale pipeline: chart geometry and
//! geodesics ([`chart`]), tensor fields and the solenoidal-gauge derivative
//! operators ([`fields`]), the forward transforms ([`transforms`]), the
//! exponentially weighted normal operator and its dense discretization
//! ([`normal`]), symbol-level ellipticity and gauge-identity verification
//! ([`symbols`]), the gauge Laplacian with solenoidal/potential projections
//! ([`gauge`]), and regularized local inversion with a layer-stripping sweep
//! ([`invert`]). The [`config`] and [`runner`] modules drive experiments
//! from plain-text config files.

pub mod chart;
pub mod config;
pub mod error;
pub mod fields;
pub mod gauge;
pub mod grid;
pub mod invert;
pub mod io;
pub mod linalg;
pub mod cutoff;
pub mod normal;
pub mod runner;
pub mod symbols;
pub mod transforms;

pub use error::{MixedRayError, Result};

/// Tool version embedded in every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
