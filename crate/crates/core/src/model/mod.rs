//! Dual cross-modal Transformer: embeddings, two unimodal encoders, two
//! cross-modal encoders and the reconstruction heads.
//!
//! Batches are packed: the rows of all examples are concatenated and
//! attention runs per example block, so no compute is spent on padding.

mod params;
mod session;

pub use params::{init_task_tensor, GroupSet, ParamGroup, ParamStore, CHECKPOINT_VERSION};
pub use session::{positions, Session, TextInput};

use serde::{Deserialize, Serialize};

use crate::audio::FEATURE_DIM;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Audio,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Text => Modality::Audio,
            Modality::Audio => Modality::Text,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the text translation emits as its continuous state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextState {
    /// Expected token embedding under the softmax of the tied logits.
    ExpectedEmbedding,
    /// Final hidden state of the cross encoder.
    HiddenState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_heads: usize,
    pub n_uni_layers: usize,
    pub n_cross_layers: usize,
    pub vocab_size: usize,
    pub audio_feature_dim: usize,
    pub max_text_len: usize,
    pub max_audio_len: usize,
    pub ffn_multiplier: usize,
    pub text_state: TextState,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d: 64,
            n_heads: 4,
            n_uni_layers: 2,
            n_cross_layers: 2,
            vocab_size: 64,
            audio_feature_dim: FEATURE_DIM,
            max_text_len: 16,
            max_audio_len: 64,
            ffn_multiplier: 4,
            text_state: TextState::ExpectedEmbedding,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// Paper-scale sizes (RoBERTa vocabulary, 768 hidden, 12 heads, 3+3 layers).
    pub fn paper() -> Self {
        Self {
            d: 768,
            n_heads: 12,
            n_uni_layers: 3,
            n_cross_layers: 3,
            vocab_size: 50_265,
            max_text_len: 256,
            max_audio_len: 1000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d", self.d),
            ("n_heads", self.n_heads),
            ("n_uni_layers", self.n_uni_layers),
            ("n_cross_layers", self.n_cross_layers),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("max_audio_len", self.max_audio_len),
            ("ffn_multiplier", self.ffn_multiplier),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d = {} is not divisible by model.n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if self.audio_feature_dim != FEATURE_DIM {
            return Err(Error::Config(format!(
                "model.audio_feature_dim must be {FEATURE_DIM}, got {}",
                self.audio_feature_dim
            )));
        }
        if self.vocab_size <= crate::vocab::NUM_SPECIAL {
            return Err(Error::Config("model.vocab_size leaves no room for regular tokens".into()));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config("model.layer_norm_eps must be positive and init_std nonnegative".into()));
        }
        Ok(())
    }

    pub fn max_len(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.max_text_len,
            Modality::Audio => self.max_audio_len,
        }
    }

    /// Width of one translation row: `d` for text, 160 for audio.
    pub fn state_width(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.d,
            Modality::Audio => self.audio_feature_dim,
        }
    }
}
