mod binio;
pub mod channel;
pub mod covariance;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod networks;
pub mod pilot;
pub mod precoding;
pub mod rng;
pub mod training;
pub mod vq;

pub use error::{Error, Result};
