//! Graph walking with a recurrent policy/value network and tree search.

pub mod config;
pub mod env;
pub mod error;
pub mod infer;
pub mod mcts;
pub mod model;
pub mod nn;
pub mod run;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
