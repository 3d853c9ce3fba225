pub mod canonical_paths;
pub mod chains;
pub mod combinatorics;
pub mod coupling;
pub mod error;
pub mod exact_analysis;
pub mod experiment;
pub mod landscape;
pub mod posterior;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
