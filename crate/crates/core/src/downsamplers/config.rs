use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bytedata::VOCAB_SIZE;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NonCausal,
    Padding,
    Removal,
    Masking,
    Lee,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::NonCausal,
        Variant::Padding,
        Variant::Removal,
        Variant::Masking,
        Variant::Lee,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NonCausal => "non_causal",
            Variant::Padding => "padding",
            Variant::Removal => "removal",
            Variant::Masking => "masking",
            Variant::Lee => "lee",
        }
    }

    /// Whether the layer is safe as an autoregressive decoder downsampler
    /// (together with its context padding).
    pub fn is_causal(self) -> bool {
        !matches!(self, Variant::NonCausal)
    }

    /// BOS padding of the decoder context, in units of δ.
    pub fn pad_multiplier(self) -> usize {
        match self {
            Variant::Padding => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s || (s == "non-causal" && *v == Variant::NonCausal))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbedding {
    Conv,
    Sinusoidal,
}

impl PosEmbedding {
    pub fn as_str(self) -> &'static str {
        match self {
            PosEmbedding::Conv => "conv",
            PosEmbedding::Sinusoidal => "sinusoidal",
        }
    }
}

impl fmt::Display for PosEmbedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosEmbedding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(PosEmbedding::Conv),
            "sin" | "sinusoidal" => Ok(PosEmbedding::Sinusoidal),
            _ => Err(Error::Config(format!("unknown positional embedding {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownsamplerConfig {
    pub delta: usize,
    /// Explicit n-gram orders; `None` means `1..=min(4, δ)`.
    pub orders: Option<Vec<usize>>,
    pub variant: Variant,
    pub pos_embedding: PosEmbedding,
    pub model_dim: usize,
    pub vocab_size: usize,
    /// Width of the positional convolution; `None` means `2δ − 1`.
    pub conv_kernel: Option<usize>,
    pub lee_kernel_widths: Vec<usize>,
}

impl Default for DownsamplerConfig {
    fn default() -> Self {
        Self {
            delta: 4,
            orders: None,
            variant: Variant::NonCausal,
            pos_embedding: PosEmbedding::Conv,
            model_dim: 64,
            vocab_size: VOCAB_SIZE,
            conv_kernel: None,
            lee_kernel_widths: vec![1, 2, 3, 4],
        }
    }
}

/// Decoder-side default orders `1..=min(4, δ)`.
pub fn default_orders(delta: usize) -> Vec<usize> {
    (1..=delta.clamp(1, 4)).collect()
}

/// Orders kept by `variant`: removal keeps only orders dividing δ, so no
/// window straddles a block boundary.
pub fn kept_orders(delta: usize, variant: Variant) -> Vec<usize> {
    filter_orders(default_orders(delta), delta, variant)
}

fn filter_orders(orders: Vec<usize>, delta: usize, variant: Variant) -> Vec<usize> {
    match variant {
        Variant::Removal => orders.into_iter().filter(|n| delta % n == 0).collect(),
        _ => orders,
    }
}

impl DownsamplerConfig {
    pub fn new(delta: usize, variant: Variant, pos_embedding: PosEmbedding, model_dim: usize) -> Self {
        Self {
            delta,
            variant,
            pos_embedding,
            model_dim,
            ..Self::default()
        }
    }

    /// Encoder-side configuration: orders `1..=4` regardless of δ.
    pub fn encoder(delta: usize, variant: Variant, pos_embedding: PosEmbedding, model_dim: usize) -> Self {
        Self {
            orders: Some(vec![1, 2, 3, 4]),
            ..Self::new(delta, variant, pos_embedding, model_dim)
        }
    }

    pub fn resolved_orders(&self) -> Vec<usize> {
        let base = self.orders.clone().unwrap_or_else(|| default_orders(self.delta));
        filter_orders(base, self.delta, self.variant)
    }

    pub fn resolved_conv_kernel(&self) -> usize {
        self.conv_kernel.unwrap_or(2 * self.delta.max(1) - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 {
            return Err(Error::Config("delta must be >= 1".into()));
        }
        if self.model_dim == 0 {
            return Err(Error::Config("model_dim must be >= 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be >= 1".into()));
        }
        if let Some(orders) = &self.orders {
            if orders.is_empty() || orders.contains(&0) {
                return Err(Error::Config("orders must be non-empty and >= 1".into()));
            }
        }
        if self.variant != Variant::Lee && self.resolved_orders().is_empty() {
            return Err(Error::Config(format!(
                "no n-gram order survives {} at delta {}",
                self.variant, self.delta
            )));
        }
        if self.variant.is_causal() && self.pos_embedding != PosEmbedding::Sinusoidal {
            return Err(Error::Config(format!(
                "variant {} requires sinusoidal positions",
                self.variant
            )));
        }
        if self.pos_embedding == PosEmbedding::Conv && self.resolved_conv_kernel() == 0 {
            return Err(Error::Config("conv_kernel must be >= 1".into()));
        }
        if self.variant == Variant::Lee {
            let w = &self.lee_kernel_widths;
            if w.is_empty() || w.contains(&0) {
                return Err(Error::Config("lee_kernel_widths must be non-empty and >= 1".into()));
            }
            if self.model_dim < w.len() {
                return Err(Error::Config(format!(
                    "model_dim {} too small for {} convolution widths",
                    self.model_dim,
                    w.len()
                )));
            }
        }
        Ok(())
    }

    /// Stable one-line description, e.g. `non_causal/conv/d4`.
    pub fn label(&self) -> String {
        format!("{}/{}/d{}", self.variant, self.pos_embedding, self.delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn removal_orders() {
        assert_eq!(kept_orders(4, Variant::Removal), vec![1, 2, 4]);
        assert_eq!(kept_orders(3, Variant::Removal), vec![1, 3]);
        assert_eq!(kept_orders(2, Variant::Removal), vec![1, 2]);
        assert_eq!(kept_orders(4, Variant::Masking), vec![1, 2, 3, 4]);
        assert_eq!(kept_orders(1, Variant::NonCausal), vec![1]);
        assert_eq!(kept_orders(8, Variant::NonCausal), vec![1, 2, 3, 4]);
    }

    #[test]
    fn encoder_orders_ignore_delta() {
        let c = DownsamplerConfig::encoder(2, Variant::NonCausal, PosEmbedding::Conv, 8);
        assert_eq!(c.resolved_orders(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn causal_variants_need_sinusoidal() {
        let bad = DownsamplerConfig::new(4, Variant::Removal, PosEmbedding::Conv, 8);
        assert!(bad.validate().is_err());
        let ok = DownsamplerConfig::new(4, Variant::Removal, PosEmbedding::Sinusoidal, 8);
        assert!(ok.validate().is_ok());
        assert!(DownsamplerConfig { delta: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("sin".parse::<PosEmbedding>().unwrap(), PosEmbedding::Sinusoidal);
        assert!("bogus".parse::<Variant>().is_err());
    }
}
