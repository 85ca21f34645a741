pub mod cli;
pub mod config;
pub mod ctc;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod models;
pub mod synthdata;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
