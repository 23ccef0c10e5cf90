//! Budgeted re-ranking with online relevance estimation.

pub mod baselines;
pub mod config;
pub mod corpus_io;
pub mod dense;
pub mod engine;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod features;
pub mod graph;
pub mod lexical;
pub mod rankers;
pub mod scheduler;
pub mod synth;
pub mod text;

pub use error::{OreError, Result};
