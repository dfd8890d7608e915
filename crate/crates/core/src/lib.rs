//! Conversational machine reading with a shared encoder and duplex decoders.
//!
//! The encoder reads a rule document, user question, scenario and dialogue
//! history (each with a fine-grained prefix). Two decoders share it: an
//! entailment reasoning decoder that tracks the fulfillment state of every
//! rule EDU (training only) and an answer decoder that generates either a
//! decision word or a follow-up question.

pub mod answer;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod entail;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
