//! Agentic retrieval-augmented pipeline for closed-form dermatology visual
//! question answering.
//!
//! Data flows dataset -> agents (with knowledge retrieval) -> decision ->
//! aggregation -> evaluation. Model services sit behind the traits in
//! [`backends`]; deterministic mocks make every stage reproducible.

pub mod agents;
pub mod aggregation;
pub mod backends;
pub mod config;
pub mod dataset;
pub mod decision;
pub mod error;
pub mod evaluation;
pub mod knowledge;
pub mod pipeline;
pub mod synthetic;
pub mod templates;
pub mod text;

pub use error::{Error, Result};
