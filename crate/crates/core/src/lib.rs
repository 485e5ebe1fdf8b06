//! Two-stage smart contract vulnerability detection: several auditor agents
//! propose candidate vulnerabilities with reasoning, a single critic scores
//! them on correctness, severity and profitability, and the top-k survive.
//!
//! The crate also carries the baseline selection strategies, a trial-based
//! benchmark runner and hit-rate evaluation.

pub mod critique;
pub mod error;
pub mod evaluate;
pub mod extract;
pub mod generate;
pub mod ingest;
pub mod llm;
pub mod par;
pub mod prompts;
pub mod strategies;
pub mod types;

pub use error::PipelineError;
pub use types::*;
