//! Desk-scale Tacotron2-style spectrogram predictor: conv + BiLSTM phoneme
//! encoder, location-sensitive attention decoder over the fused CU inputs,
//! pre-net/post-net, stop tokens, and the training and inference loops.

mod checkpoint;
mod data;
mod gradcheck;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{build_training_set, prepare_context, TrainingUtterance, UtteranceContext};
pub use gradcheck::{gradient_check, jitter_params, GradCheckReport};
pub use model::{ForwardOutputs, Model, SynthesisResult};
pub use train::{
    free_running_mse, teacher_forced_loss, train, TraceRow, TrainConfig, TrainingSet,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cu_encoder::AttentionDims;

#[derive(Debug, Error)]
pub enum TacoError {
    #[error("unknown phoneme id {0}")]
    UnknownPhoneme(usize),
    #[error("empty phoneme sequence")]
    EmptySequence,
    #[error("context mode mismatch: model is {model:?}, input is {input}")]
    ContextMismatch { model: CuMode, input: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    CuEncoder(#[from] crate::cu_encoder::CuEncoderError),
    #[error("non-finite loss at step {step}; training aborted")]
    Divergence { step: u64 },
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("utterance has no target spectrogram")]
    MissingTarget,
    #[error("{0}")]
    TextContext(#[from] crate::text_context::TextContextError),
    #[error("{0}")]
    Corpus(#[from] crate::corpus::CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CuMode {
    None,
    Cse,
    Pse,
}

impl std::str::FromStr for CuMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(CuMode::None),
            "cse" => Ok(CuMode::Cse),
            "pse" => Ok(CuMode::Pse),
            other => Err(format!("unknown cu mode {other:?}")),
        }
    }
}

/// Model hyperparameters. `paper_scale` mirrors the reference system;
/// `toy` is the CI-sized variant trained by the synthetic experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub inventory_size: usize,
    pub phoneme_embed_dim: usize,
    pub encoder_conv_layers: usize,
    pub encoder_kernel: usize,
    /// d_f: encoder output width; even (BiLSTM halves it per direction).
    pub encoder_dim: usize,
    pub encoder_dropout: f64,
    pub prenet_dim: usize,
    pub prenet_dropout: f64,
    pub attention_rnn_dim: usize,
    pub decoder_rnn_dim: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub postnet_layers: usize,
    pub mel_bins: usize,
    /// Mel frames emitted per decoder step.
    pub reduction: usize,
    pub stop_threshold: f64,
    pub dropout_at_inference: bool,
    pub cu_mode: CuMode,
    /// L: neighbor sentences on each side.
    pub context_width: usize,
    /// d_e: sentence embedding width.
    pub embed_dim: usize,
    pub cu_attention: AttentionDims,
    /// Decoder input width after fusion (512 at paper scale).
    pub fused_dim: usize,
}

impl ModelConfig {
    pub fn paper_scale(cu_mode: CuMode, inventory_size: usize) -> Self {
        Self {
            inventory_size,
            phoneme_embed_dim: 256,
            encoder_conv_layers: 3,
            encoder_kernel: 5,
            encoder_dim: 512,
            encoder_dropout: 0.5,
            prenet_dim: 256,
            prenet_dropout: 0.5,
            attention_rnn_dim: 1024,
            decoder_rnn_dim: 1024,
            attention_dim: 128,
            location_filters: 32,
            location_kernel: 31,
            postnet_channels: 512,
            postnet_kernel: 5,
            postnet_layers: 5,
            mel_bins: 80,
            reduction: 2,
            stop_threshold: 0.5,
            dropout_at_inference: false,
            cu_mode,
            context_width: 2,
            embed_dim: 768,
            cu_attention: AttentionDims {
                heads: 8,
                query_dim: 512,
                embed_dim: 768,
                key_dim: 64,
                value_dim: 64,
                context_dim: 256,
                max_pairs: 8,
            },
            fused_dim: 512,
        }
    }

    /// CI-sized model: same schema, small widths, 32-d stub embeddings.
    pub fn toy(cu_mode: CuMode, inventory_size: usize) -> Self {
        Self {
            inventory_size,
            phoneme_embed_dim: 32,
            encoder_conv_layers: 3,
            encoder_kernel: 5,
            encoder_dim: 32,
            encoder_dropout: 0.0,
            prenet_dim: 32,
            prenet_dropout: 0.5,
            attention_rnn_dim: 48,
            decoder_rnn_dim: 48,
            attention_dim: 32,
            location_filters: 8,
            location_kernel: 7,
            postnet_channels: 32,
            postnet_kernel: 5,
            postnet_layers: 5,
            mel_bins: 80,
            reduction: 2,
            stop_threshold: 0.5,
            dropout_at_inference: false,
            cu_mode,
            context_width: 1,
            embed_dim: 32,
            cu_attention: AttentionDims {
                heads: 2,
                query_dim: 32,
                embed_dim: 32,
                key_dim: 16,
                value_dim: 16,
                context_dim: 32,
                max_pairs: 8,
            },
            fused_dim: 32,
        }
    }

    /// Width of the decoder memory rows (the fused inputs D, or F when no
    /// CU context is used).
    pub fn memory_dim(&self) -> usize {
        match self.cu_mode {
            CuMode::None => self.encoder_dim,
            _ => self.fused_dim,
        }
    }

    pub fn validate(&self) -> Result<(), TacoError> {
        if self.encoder_dim % 2 != 0 {
            return Err(TacoError::Config("encoder_dim must be even".into()));
        }
        if self.reduction < 1 {
            return Err(TacoError::Config("reduction must be >= 1".into()));
        }
        if self.encoder_kernel % 2 == 0 || self.location_kernel % 2 == 0
            || self.postnet_kernel % 2 == 0
        {
            return Err(TacoError::Config("conv kernels must be odd".into()));
        }
        if self.cu_mode == CuMode::Pse {
            if self.cu_attention.query_dim != self.encoder_dim {
                return Err(TacoError::Config(
                    "cu_attention.query_dim must equal encoder_dim".into(),
                ));
            }
            if self.cu_attention.embed_dim != self.embed_dim {
                return Err(TacoError::Config(
                    "cu_attention.embed_dim must equal embed_dim".into(),
                ));
            }
            if 2 * self.context_width > self.cu_attention.max_pairs {
                return Err(TacoError::Config(
                    "2L exceeds the sentence-index table capacity".into(),
                ));
            }
        }
        if self.inventory_size == 0 {
            return Err(TacoError::Config("inventory_size must be > 0".into()));
        }
        Ok(())
    }
}
