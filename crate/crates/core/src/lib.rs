//! Shared building blocks for under-display-camera video restoration.
//!
//! This crate holds everything that is not a neural network: the clip
//! container ([`FrameStack`]), frame file I/O, the run configuration schema,
//! deterministic random streams, projective geometry and warping, the
//! flare/haze soft masks, and the full-reference quality metrics.

pub mod config;
pub mod error;
pub mod frame;
pub mod geometry;
pub mod io;
pub mod manifest;
pub mod masks;
pub mod metrics;
pub mod resample;
pub mod rng;

pub use config::RunConfig;
pub use error::{CoreError, Result};
pub use frame::{Colorspace, FrameStack};
pub use geometry::{FlowField, Homography};
pub use manifest::Manifest;
pub use masks::MaskPair;
