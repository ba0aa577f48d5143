//! Least-privilege inference for small decoder-only transformers.
//!
//! Selected linear maps are re-parameterized as nested low-rank factors whose
//! active prefix rank is the per-request privilege. Around that enforcement
//! primitive sit allocation policies, a multi-privilege trainer, and the
//! evaluation tooling (frontiers, sensitivity maps, capability suppression
//! search and probe audits).

pub mod checkpoint;
pub mod deployment;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod frontier;
pub mod io;
pub mod nested;
pub mod probe;
pub mod sensitivity;
pub mod suppressor;
pub mod taskgen;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
