//! Prompt optimization for NL2SQL.
//!
//! The crate optimizes a static NL2SQL prompt (an instruction plus an
//! ordered exemplar set) against a BIRD-style corpus. Candidates are scored
//! by execution accuracy on SQLite and, optionally, by the latency of the
//! SQL they make the model produce.
//!
//! Modules, bottom-up:
//!
//! - [`dataset`]: corpus ingestion, schema rendering, splitting and sampling.
//! - [`llmclient`]: chat-completion client with scripted and replay backends.
//! - [`sqlharness`]: SQL execution, result comparison, latency measurement
//!   and prompt scoring.
//! - [`smbo`]: trial bookkeeping and integer suggestion (random / TPE).
//! - [`prompts`]: prompt templates, rendering and proposal parsing.
//! - [`optimizers`]: RES, ORES, joint instruction/exemplar search and IPO.
//! - [`benchgen`]: multi-variant benchmark augmentation.
//! - [`report`]: accuracy, cost and latency tables.

pub mod benchgen;
pub mod dataset;
pub mod fixtures;
pub mod llmclient;
pub mod optimizers;
pub mod prompts;
pub mod report;
pub mod rng;
pub mod smbo;
pub mod sqlharness;

pub use dataset::{Corpus, Difficulty, Exemplar, SchemaDescriptor, Split};
pub use llmclient::{CompletionRequest, CompletionResult, LlmClient};
pub use optimizers::{ObjectiveSpec, OptimizationConfig, OptimizationOutcome};
pub use prompts::Prompt;
pub use smbo::{Study, Trial};
pub use sqlharness::{EvalReport, LatencyStats, ResultTable};
