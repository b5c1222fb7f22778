//! Row-wise lane-marker detection: synthetic data generation, an
//! encoder-decoder network with horizontal reduction modules, training,
//! decoding, and standard lane-benchmark metrics.

pub mod backbone;
pub mod datagen;
pub mod decode;
pub mod encoding;
pub mod error;
pub mod heads;
pub mod hrm;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod trainer;
pub mod util;
pub mod viz;

pub use error::{Error, Result};
