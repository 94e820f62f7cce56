pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod cmfr;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evaluate;
pub mod export;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod mpfa;
pub mod numeric;
pub mod params;
pub mod prompts;
pub mod scoring;
pub mod sp;
pub mod training;

pub use error::{AfrError, Result};
