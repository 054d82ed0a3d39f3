//! Align an LLM's multiple-choice answers to individual survey respondents by
//! conditioning prompts on demographics, ideology and retrieved past
//! opinions, and evaluate every persona variant offline or against a live
//! backend.

pub mod agreement;
pub mod eval;
pub mod hashing;
pub mod ingest;
pub mod llm;
pub mod memory;
pub mod prompt;
pub mod runner;
pub mod survey;
pub mod template;

#[cfg(test)]
pub(crate) mod testutil;
