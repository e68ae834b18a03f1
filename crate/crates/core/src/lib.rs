//! Multimodal entity linking with cooperating language-model agents.
//!
//! A mention's text and image are fused into one description, candidates
//! are pulled from a knowledge graph and refined in a bounded judge loop,
//! and a cloze-style prompt selects the final entity.

pub mod adapter;
pub mod agent;
pub mod clozer;
pub mod config;
pub mod error;
pub mod eval;
pub mod fuser;
pub mod http;
pub mod kg;
pub mod model;
pub mod orchestrator;
pub mod registry;
pub mod similarity;

pub use config::MeloConfig;
pub use error::{Error, LineError, Result};
pub use eval::{accuracy, ingest, run_eval, EvalReport};
pub use model::{Candidate, CandidateSet, DatasetRecord, Entity, LinkOutcome, LinkResult, Mention, Qid, RoundTrace, Stage, Verdict};
pub use orchestrator::{Pipeline, PipelineConfig, UpdateDecision, UpdatePolicy};
