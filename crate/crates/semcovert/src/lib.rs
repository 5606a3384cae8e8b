//! Semantic-level covert video transmission over simulated noisy channels.
//!
//! A secret video's latent representation is folded into the latents of an
//! innocuous cover video before transmission. Receivers with only the public
//! decoder reconstruct the cover; receivers holding the extractor weights
//! additionally recover the secret. Which chunks carry payload is decided by
//! a keyed random schedule that is never transmitted.

pub mod adversary;
pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod fvd;
pub mod hiding;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod scheduler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
