pub mod autodiff;
pub mod cli;
pub mod detection;
mod error;
pub mod eval;
pub mod fsutil;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod planted;
pub mod pruning;
pub mod seed;
pub mod tasks;
pub mod taskvec;

pub use error::{Error, Result};
