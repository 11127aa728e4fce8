//! Prompt-supervised out-of-distribution detection over precomputed embeddings.

pub mod adapter;
mod binio;
pub mod cli;
pub mod config;
pub mod detect;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod pipeline;
pub mod prompts;
pub mod store;
pub mod vig;

pub use error::{Error, Result};
