//! Desk-scale language-model laboratory.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod embed;
pub mod error;
pub mod grammar;
pub mod lm;
pub mod model;
pub mod ngram;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{ErrorCategory, LmError, Result};
pub use lm::{LanguageModel, UniformModel};
pub use tensor::{Tape, Tensor, Var};
