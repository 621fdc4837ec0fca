//! Certified H-infinity state-feedback synthesis.
//!
//! The crate turns control requirements (structured JSON or free text) into
//! state-feedback gains `u = Kx` backed by bounded-real-lemma LMI certificates,
//! checks them by Monte Carlo simulation and frequency analysis, and adapts
//! the specification between iterations with a monotone gamma-floor guardrail.
//!
//! Module map:
//!
//! - [`model`]: plant and specification types, plant files, Tustin conversion.
//! - [`analysis`]: eigenvalues, matrix exponential, H-infinity norm, margins, CARE.
//! - [`sdp`]: barrier-method LMI solver with bisection on gamma.
//! - [`synthesis`]: LMI assembly and certificate construction.
//! - [`verify`]: Monte Carlo statistics, frequency checks, violation severity.
//! - [`specint`]: requirement text to specification JSON.
//! - [`adapt`]: specification refinement and the gamma-floor guardrail.
//! - [`llm`]: chat-completion client with a deterministic null backend.
//! - [`pipeline`]: the iterative design loop, baselines and metrics.
//! - [`codegen`]: controller source emission and certificate manifests.
//! - [`bench`]: synthetic suites, benchmark rows and aggregate reports.

// `!(x >= lo)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod analysis;
pub mod bench;
pub mod codegen;
pub mod llm;
pub mod model;
pub mod pipeline;
pub mod sdp;
pub mod serde_ext;
pub mod specint;
pub mod synthesis;
pub mod verify;

pub use model::{PlantModel, Priority, SpecEntry, SpecSet, TimeDomain};

/// Crate version recorded in generated manifests and reports.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
