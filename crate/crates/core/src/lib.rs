//! Question-based retrieval-augmented generation.
//!
//! Queries are matched against questions generated offline from the
//! knowledge base, and matched questions are mapped back to content through
//! an answerability matrix.

pub mod builder;
pub mod cli;
pub mod clients;
pub mod eval;
pub mod kb;
pub mod pipeline;
pub mod prompts;
pub mod retrieve;
pub mod synthetic;
pub mod vector;
