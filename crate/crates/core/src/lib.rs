//! Streaming multi-channel CTC speech recognition with context-sensitive
//! chunking, a mask-based MVDR front-end and simulated future context.

pub mod asr;
pub mod beamformer;
pub mod chunking;
pub mod cuside;
pub mod error;
pub mod neural;
pub mod scene;
pub mod signal;
pub mod streamer;
pub mod verify;

pub use error::{Error, Result};
