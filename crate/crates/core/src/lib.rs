//! Construction, deduplication and retrieval of frame-grounded sociocultural
//! norm bases.
//!
//! The flow is: dialogues (real, or generated from a [`frames::SocioculturalFrame`])
//! are given a frame, a chat model extracts candidate norm statements, a second
//! pass verifies them, and a similarity pool drops near duplicates. The
//! resulting [`normbase::NormBase`] serves norms of the top-k most similar
//! dialogues to downstream predictors ([`rag`]) and the [`evaluation`] metrics.

pub mod config;
pub mod corpus;
pub mod embeddings;
pub mod evaluation;
pub mod frames;
mod http;
pub mod llm;
pub mod normbase;
pub mod normpool;
pub mod pipeline;
pub mod prompts;
pub mod rag;

pub use http::Backoff;
