//! Workbench for explanation-regularized text classification: a minimal
//! autodiff engine, a toy attention classifier whose rationales can be
//! aligned to human token masks, synthetic corpora with planted rationales,
//! and an evaluation harness covering unseen-distribution, contrast-set and
//! functional tests with significance reporting.

pub mod criteria;
pub mod data;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod extract;
pub mod lexicon;
pub mod model;
pub mod report;
pub mod runner;
pub mod selection;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
