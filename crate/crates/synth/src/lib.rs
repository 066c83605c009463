//! Degraded-video synthesis: point-spread functions that evolve with camera
//! motion, the forward degradation model, procedural source scenes and the
//! on-disk dataset generator.

mod degrade;
mod error;
mod fft;
mod motion;
mod psf;
mod scene;
mod dataset;

pub use dataset::{generate_dataset, sources_from_config, ClipSource};
pub use degrade::{degrade_frame, display_reference, synthesize_clip, DegradeParams, SynthClip};
pub use error::{Result, SynthError};
pub use motion::{sample_motion, MotionScript, MotionStep};
pub use psf::{load_psf, make_synthetic_psf, psf_transform, save_psf, Psf};
pub use scene::{apply_motion, render_clip, Scene};
