//! Speculative decoding with draft trees on toy Markov models, and draft
//! training that targets tree-level acceptance.

pub mod error;
pub mod io;
pub mod lab;
pub mod lm;
pub mod reward;
pub mod train;
pub mod tree;
pub mod verify;

pub use error::{Error, Result};
