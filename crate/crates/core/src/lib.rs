//! A treebank-recognition engine: statistical decision-tree models are
//! trained from a bracketed treebank and new sentences are parsed bottom-up
//! by feature-value assignment, searched with a stack decoder and trained
//! with forward-backward estimation over derivation lattices.

pub mod bct;
pub mod cli;
pub mod error;
pub mod eval;
pub mod features;
pub mod info_theory;
pub mod models;
pub mod parser;
pub mod sdt;
pub mod training;
pub mod treebank;

pub use error::{Error, Result};
