pub mod cli;
pub mod collab;
pub mod config;
pub mod digest;
pub mod eval;
pub mod error;
pub mod gateway;
pub mod infer;
pub mod parallel;
pub mod refine;
pub mod retrieve;
pub mod store;
pub mod synth;
pub mod template;

pub use error::{Error, Result};
