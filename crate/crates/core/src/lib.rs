//! Table structure recognition by pairwise cell-relation classification.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod pairing;
pub mod recovery;
pub mod synth;
pub mod table;
pub mod train;

pub use error::{Error, Result};
