//! Cross-utterance context conditioning for sequence-to-spectrogram
//! synthesis.

pub mod cli;
pub mod corpus;
pub mod cu_encoder;
pub mod features;
pub mod nn;
pub mod taco_lite;
pub mod tape;
pub mod text_context;
