//! Bus travel-time estimation from stop, segment and location embeddings.

pub mod error;
pub mod eval;
pub mod exec;
pub mod featurizer;
pub mod geo;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod shingler;
pub mod spatial_grid;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
