use serde::{Deserialize, Serialize};

use crate::bytedata::VOCAB_SIZE;
use crate::downsamplers::{DownsamplerConfig, PosEmbedding, Variant};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for ModelDims {
    /// Desk preset: 2+2 layers, d 128, 4 heads, ffn 256.
    fn default() -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            model_dim: 128,
            heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
        }
    }
}

impl ModelDims {
    /// Transformer Base sizes.
    pub fn base() -> Self {
        Self {
            encoder_layers: 6,
            decoder_layers: 6,
            model_dim: 512,
            heads: 8,
            ffn_dim: 2048,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Linear map from each (δ = 1) decoder state to character logits.
    Direct,
    /// Character-level LSTM over block states and previous characters.
    TwoStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub encoder: DownsamplerConfig,
    pub decoder: DownsamplerConfig,
    pub head: HeadKind,
    pub tie_embeddings: bool,
    /// Permits a non-causal decoder downsampler (leak demonstrations only).
    pub allow_non_causal_decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_decoder(ModelDims::default(), 1, Variant::Removal)
    }
}

impl ModelConfig {
    /// Encoder: conv-position GBST, orders 1..=4. Decoder: `variant` with
    /// sinusoidal positions. Both sides use the same δ.
    pub fn with_decoder(dims: ModelDims, delta: usize, variant: Variant) -> Self {
        let d = dims.model_dim;
        let pos = if variant == Variant::NonCausal {
            PosEmbedding::Conv
        } else {
            PosEmbedding::Sinusoidal
        };
        Self {
            encoder: DownsamplerConfig::encoder(delta, Variant::NonCausal, PosEmbedding::Conv, d),
            decoder: DownsamplerConfig::new(delta, variant, pos, d),
            head: if delta > 1 { HeadKind::TwoStep } else { HeadKind::Direct },
            tie_embeddings: false,
            allow_non_causal_decoder: variant == Variant::NonCausal,
            dims,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.model_dim == 0 || d.heads == 0 || d.model_dim % d.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                d.model_dim, d.heads
            )));
        }
        if d.ffn_dim == 0 || !(0.0..1.0).contains(&d.dropout) {
            return Err(Error::Config("ffn_dim must be >= 1 and dropout in [0, 1)".into()));
        }
        for (side, c) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            c.validate()?;
            if c.model_dim != d.model_dim {
                return Err(Error::Config(format!(
                    "{side} downsampler dim {} differs from model_dim {}",
                    c.model_dim, d.model_dim
                )));
            }
            if c.vocab_size != VOCAB_SIZE {
                return Err(Error::Config(format!("{side} vocab_size must be {VOCAB_SIZE}")));
            }
        }
        if self.decoder.delta > 1 && self.head != HeadKind::TwoStep {
            return Err(Error::Config("decoder delta > 1 requires the two_step head".into()));
        }
        if !self.decoder.variant.is_causal() && !self.allow_non_causal_decoder {
            return Err(Error::Config(
                "non_causal decoder downsampler leaks future characters; set allow_non_causal_decoder to use it".into(),
            ));
        }
        Ok(())
    }

    pub fn pad_multiplier(&self) -> usize {
        self.decoder.variant.pad_multiplier()
    }

    pub fn label(&self) -> String {
        let head = match self.head {
            HeadKind::Direct => "direct",
            HeadKind::TwoStep => "two_step",
        };
        format!("{}+{}", self.decoder.label(), head)
    }
}
