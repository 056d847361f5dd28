//! The toy vision-language model.
//!
//! A patch transformer encodes the image, a single linear projector maps
//! its tokens into the language model's embedding space, and a causal
//! decoder reads `[visual tokens ; text tokens]`. LoRA adapters sit on
//! attention projections of the vision encoder.

pub mod autograd;
mod checkpoint;
mod sequence;
pub mod tensor;
mod tokenizer;
mod vlm;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointIndex};
pub use sequence::{
    caption_segments, conversation_segments, prompt_segments, text_segments, vqa_segments, AssembledSequence,
    Segment, SegmentKind, SegmentSpan, SequenceLayout,
};
pub use tensor::Matrix;
pub use tokenizer::{ByteTokenizer, ANS, BOS, EOS, IMAGE, PAD};
pub use vlm::{DecodeConfig, Forward, Generation, LoraAdapter, Projector, ToyVlm, VisualTokens};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite activation in {layer}")]
    NonFinite { layer: String },
    #[error("sequence of {len} positions exceeds max_seq_len {max}")]
    Overflow { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_vision: usize,
    pub n_vision_layers: usize,
    pub d_lm: usize,
    pub n_lm_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Attention projections of every vision block that receive adapters.
    pub lora_targets: Vec<String>,
    pub projector_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            d_vision: 64,
            n_vision_layers: 2,
            d_lm: 64,
            n_lm_layers: 2,
            n_heads: 4,
            vocab_size: 512,
            max_seq_len: 256,
            mlp_ratio: 4,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_targets: vec!["q".into(), "v".into()],
            projector_bias: true,
        }
    }
}

impl ModelConfig {
    /// A miniature configuration for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            d_vision: 8,
            n_vision_layers: 1,
            d_lm: 8,
            n_lm_layers: 1,
            n_heads: 2,
            vocab_size: 264,
            max_seq_len: 32,
            mlp_ratio: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            lora_targets: vec!["q".into(), "v".into()],
            projector_bias: true,
        }
    }

    pub fn n_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        crate::corpus::CHANNELS * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.d_vision % self.n_heads != 0 || self.d_lm % self.n_heads != 0 {
            return fail(format!(
                "widths {}/{} not divisible by n_heads {}",
                self.d_vision, self.d_lm, self.n_heads
            ));
        }
        if self.vocab_size < tokenizer::N_RESERVED {
            return fail(format!(
                "vocab_size {} below the {} byte and special ids",
                self.vocab_size,
                tokenizer::N_RESERVED
            ));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_vision {
            return fail(format!("lora_rank {} outside 1..={}", self.lora_rank, self.d_vision));
        }
        for t in &self.lora_targets {
            if !matches!(t.as_str(), "q" | "k" | "v" | "o") {
                return fail(format!("unknown lora target `{t}`"));
            }
        }
        if self.max_seq_len <= self.n_patches() {
            return fail(format!(
                "max_seq_len {} leaves no room after {} visual tokens",
                self.max_seq_len,
                self.n_patches()
            ));
        }
        Ok(())
    }
}

/// Coarse parameter groups the freeze schedule operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    #[serde(rename = "vision.base")]
    VisionBase,
    #[serde(rename = "vision.lora")]
    VisionLora,
    #[serde(rename = "projector")]
    Projector,
    #[serde(rename = "lm")]
    Lm,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::VisionBase,
        ParamGroup::VisionLora,
        ParamGroup::Projector,
        ParamGroup::Lm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::VisionBase => "vision.base",
            ParamGroup::VisionLora => "vision.lora",
            ParamGroup::Projector => "projector",
            ParamGroup::Lm => "lm",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown parameter group `{s}`")))
    }
}

pub type GroupSet = BTreeSet<ParamGroup>;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub group: ParamGroup,
    pub value: Matrix,
}

/// Named parameters in deterministic (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) {
        self.entries.insert(name.into(), Param { group, value });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names_in(&self, group: ParamGroup) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Concatenated little-endian bytes of every tensor in `group`, in name
    /// order. Two groups are bit-identical iff these bytes are equal.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in &self.entries {
            if p.group == group {
                out.extend_from_slice(name.as_bytes());
                out.extend_from_slice(&p.value.to_le_bytes());
            }
        }
        out
    }
}
