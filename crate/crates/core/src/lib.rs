//! Emotion-conditioned symbolic music autoencoder with per-element latent
//! slices, a two-level decoder, a code prior and element transfer.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod event_stream;
pub mod generate;
pub mod gradcheck;
pub mod med;
pub mod midi;
pub mod model;
pub mod prior;
pub mod sampling;
pub mod score;
pub mod synth;
pub mod tokenizer;
pub mod train;
pub mod vocab;
pub mod vq;

pub use error::{MuserError, Result};
