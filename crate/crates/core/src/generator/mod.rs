//! Persona-conditioned encoder-decoder with coherence-aware cross-attention,
//! response-type prompts and dynamic weighted aggregation.

mod decode;
mod model;
mod train;
mod vocab;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::CoherenceError;
use crate::graphbuild::GraphError;
use crate::nn::checkpoint::CheckpointError;

pub use decode::{
    generate, generate_batch, load_generator, read_generations, write_generations, GenerationOutput,
    GenerationRequest, Generator,
};
pub use model::{dynamic_weighted_aggregation, DecoderInput, DwaParams, GeneratorModel, StepTrace};
pub use train::{
    build_examples, mean_token_loss, run_generator_training, write_loss_csv, Conditioner, EpochLog, GeneratorOutcome,
    TrainingExample, GENERATOR_STAGE,
};
pub use vocab::{
    build_encoder_input, build_prompt, prompt_template, relation_token, teacher_forcing, Vocabulary, BOS, EOS, PAD,
    PER, PROMPT, QRY, RSP, UNK,
};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}; last good checkpoint kept at {checkpoint:?}")]
    Diverged { epoch: usize, checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Coherence(#[from] CoherenceError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("bad checkpoint metadata: {0}")]
    Meta(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which conditioning channels carry the predicted response types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Relation tokens in the prompt.
    Sp,
    /// Learnable relation embeddings added to the coherence query.
    Emb,
    #[default]
    SpEmb,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Sp, Variant::Emb, Variant::SpEmb];

    pub fn uses_prompt_tokens(self) -> bool {
        matches!(self, Variant::Sp | Variant::SpEmb)
    }

    pub fn uses_embeddings(self) -> bool {
        matches!(self, Variant::Emb | Variant::SpEmb)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sp => "sp",
            Variant::Emb => "emb",
            Variant::SpEmb => "sp_emb",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = GeneratorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['+', '-'], "_").as_str() {
            "sp" => Ok(Variant::Sp),
            "emb" => Ok(Variant::Emb),
            "sp_emb" => Ok(Variant::SpEmb),
            other => Err(GeneratorError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Beam { width: usize },
    Sample { temperature: f64, seed: u64 },
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeMode::Greedy => f.write_str("greedy"),
            DecodeMode::Beam { width } => write!(f, "beam:{width}"),
            DecodeMode::Sample { temperature, seed } => write!(f, "sample:{temperature}:{seed}"),
        }
    }
}

impl FromStr for DecodeMode {
    type Err = GeneratorError;

    /// `greedy`, `beam:<width>` or `sample:<temperature>:<seed>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GeneratorError::Config(format!("bad decode mode {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let mode = match parts.as_slice() {
            ["greedy"] => DecodeMode::Greedy,
            ["beam", w] => DecodeMode::Beam {
                width: w.parse().map_err(|_| bad())?,
            },
            ["sample", t, seed] => DecodeMode::Sample {
                temperature: t.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        match mode {
            DecodeMode::Beam { width: 0 } => Err(bad()),
            DecodeMode::Sample { temperature, .. } if !(temperature > 0.0 && temperature.is_finite()) => Err(bad()),
            m => Ok(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Encoder input length including markers.
    pub max_source_len: usize,
    /// Prompt length including `[PROMPT]`.
    pub max_prompt_len: usize,
    /// Response tokens, excluding `[EOS]`.
    pub max_response_len: usize,
    pub variant: Variant,
    pub tau: f64,
    pub decode: DecodeMode,
    /// Epochs of plain response modelling before coherence attention is
    /// attached.
    pub persona_epochs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            encoder_layers: 1,
            decoder_layers: 1,
            max_source_len: 160,
            max_prompt_len: 24,
            max_response_len: 32,
            variant: Variant::SpEmb,
            tau: 0.2,
            decode: DecodeMode::Greedy,
            persona_epochs: 20,
            epochs: 150,
            lr: 1e-3,
            batch_size: 8,
            clip_norm: 5.0,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let fail = |m: &str| Err(GeneratorError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.tau) {
            return fail("tau must lie in [0, 1]");
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail("d_model must be a positive multiple of heads");
        }
        if self.ffn_dim == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("ffn_dim and layer counts must be positive");
        }
        if self.max_source_len < 6 || self.max_prompt_len < 1 || self.max_response_len == 0 {
            return fail("length limits too small");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return fail("lr, batch_size and clip_norm must be positive");
        }
        if let DecodeMode::Beam { width: 0 } = self.decode {
            return fail("beam width must be positive");
        }
        Ok(())
    }

    /// Length of the decoder position table.
    pub fn max_target_len(&self) -> usize {
        self.max_prompt_len + self.max_response_len + 3
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_modes_parse() {
        assert_eq!("greedy".parse::<DecodeMode>().unwrap(), DecodeMode::Greedy);
        assert_eq!("beam:4".parse::<DecodeMode>().unwrap(), DecodeMode::Beam { width: 4 });
        assert_eq!(
            "sample:0.9:7".parse::<DecodeMode>().unwrap(),
            DecodeMode::Sample { temperature: 0.9, seed: 7 }
        );
        for bad in ["beam:0", "sample:0:1", "nucleus", "beam"] {
            assert!(bad.parse::<DecodeMode>().is_err(), "{bad}");
        }
        for m in ["greedy", "beam:3", "sample:0.5:9"] {
            assert_eq!(m.parse::<DecodeMode>().unwrap().to_string(), m);
        }
    }

    #[test]
    fn variants_parse_and_validate_tau() {
        assert_eq!("sp+emb".parse::<Variant>().unwrap(), Variant::SpEmb);
        assert_eq!("emb".parse::<Variant>().unwrap(), Variant::Emb);
        assert!("soft".parse::<Variant>().is_err());
        let mut cfg = GeneratorConfig::default();
        cfg.validate().unwrap();
        cfg.tau = 1.5;
        assert!(cfg.validate().is_err());
    }
}
