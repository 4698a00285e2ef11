//! Toolkit for story-completion prompting over dual-factor annotated posts.
//!
//! The pipeline: load annotated posts ([`corpus`]), turn them into
//! prompt/completion fine-tune records and N-shot prompts ([`prompt`]),
//! drive a completion backend or an offline mock ([`backend`]), decode
//! generated completions back into labels and textual cues ([`parser`]),
//! and score both classification and explanation quality ([`metrics`],
//! [`stats`]). [`losslab`] verifies the combined training objective on a
//! tiny trainable model.

pub mod backend;
pub mod cli;
pub mod corpus;
pub mod losslab;
pub mod metrics;
pub mod parser;
pub mod prompt;
pub mod report;
pub mod stats;

pub use corpus::{ContingencyTable, DatasetSplit, Post};
pub use parser::ParsedCompletion;
pub use prompt::{FineTuneRecord, PromptTemplate, StoryCompletion};
