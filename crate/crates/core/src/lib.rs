//! Event-camera pre-training artifacts: binned event histograms,
//! pseudo-grayscale intensity targets, tube masks and masked-reconstruction
//! losses, with a synthetic event simulator to check them against and a toy
//! recurrent masked autoencoder that consumes them.

pub mod error;
pub mod event;
pub mod intensity;
pub mod io;
pub mod masking;
pub mod metrics;
pub mod simulator;
pub mod toy;

pub use error::{Error, Result};
pub use event::{Event, Polarity, SegmentConfig, SensorGeometry};
