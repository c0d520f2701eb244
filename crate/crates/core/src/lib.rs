//! Abductive text-video alignment and object-centric masked latent video
//! diffusion on a procedurally generated accident corpus.

pub mod checkpoint;
pub mod clip;
pub mod codec;
pub mod config;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod oavd;
pub mod pipeline;
pub mod rng;
pub mod scenario;
pub mod schedule;
pub mod store;
pub mod unet;
pub mod video;

pub use error::{Error, Result};
pub use video::{reverse_clip, VideoClip};
