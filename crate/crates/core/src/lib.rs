//! Localize the first hallucinated token in LLM-generated code and train
//! predictors that forecast it from generation-time signals.
//!
//! The pipeline: [`corpus`] loads generations and canonical solutions,
//! [`normalize`] alpha-renames user-defined identifiers, [`localize`]
//! compares a generation with every canonical solution and maps the first
//! differing character back to an LLM token, [`syntax`] types each token,
//! [`features`] turns the per-step signals into rows, [`predict`] trains
//! per-token and per-sample predictors, and [`harness`] evaluates them.

pub mod corpus;
pub mod demo;
pub mod features;
pub mod harness;
pub mod localize;
pub mod normalize;
pub mod predict;
pub mod syntax;
pub mod synthetic;

pub use corpus::{CanonicalPool, GenerationRecord, Language, LogProbStep, Task};
pub use features::{FeatureMatrix, FeatureMode, TokenAnnotation};
pub use localize::HallucinationLabel;
pub use normalize::NormalizedProgram;
pub use predict::{ModelKind, PredictorModel, TrainConfig};
pub use syntax::TokenType;

/// Toolkit version, reported by the CLI.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
