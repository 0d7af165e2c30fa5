//! CE-RS-SBCIT: a hybrid CNN–Transformer image classifier with residual and
//! spatial auxiliary streams, channel-enhancement fusion and a spatial
//! attention gate, together with the data, training and evaluation code
//! needed to run it.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradsuite;
mod error;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
