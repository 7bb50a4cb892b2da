//! Dense passage retrieval over spoken archives.
//!
//! A frame-level student bi-encoder is trained to retrieve passages directly
//! from acoustic features, distilled from a frozen teacher that reads
//! error-channel transcripts. The crate covers the whole desk-scale
//! pipeline: synthetic corpus generation, training with in-batch negatives
//! and distillation, exact inner-product retrieval, score ensembling and
//! evaluation, all behind the `sounder` CLI.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matfile;
pub mod numerics;
pub mod retrieval;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
