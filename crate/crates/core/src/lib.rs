//! Language representation learning as mutual information maximization.
//!
//! One InfoNCE loss, instantiated as Skip-gram, masked LM with negative
//! sampling, permutation LM via attention masks, a span-level DIM objective
//! and next-sentence prediction, on top of a small define-by-run autodiff
//! core and a word-level text pipeline.

pub mod encoders;
pub mod error;
pub mod harness;
pub mod masking;
pub mod numeric;
pub mod objectives;
pub mod par;
pub mod text;
pub mod training;

pub use error::{Error, Result};
