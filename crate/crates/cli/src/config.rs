use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gbstlab_core::bytedata::ToyTask;
use gbstlab_core::downsamplers::{DownsamplerConfig, PosEmbedding, Variant};
use gbstlab_core::leakaudit::AuditSettings;
use gbstlab_core::numcore::TrainHyper;
use gbstlab_core::seq2seq::{ModelConfig, ModelDims};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// The whole configuration document. Every section has defaults, so `{}` is
/// a valid config; unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Probe training and evaluation settings for `leak-test`.
    pub probe: AuditSettings,
    /// The single cell probed by `leak-test` and `oracle` without `--grid`.
    pub cell: CellSection,
    pub grid: GridSection,
    pub model: ModelConfig,
    pub train: TrainHyper,
    pub data: DataSection,
    pub translate: TranslateSection,
    pub evaluate: EvaluateSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            probe: AuditSettings::default(),
            cell: CellSection::default(),
            grid: GridSection::default(),
            model: ModelConfig::default(),
            train: TrainHyper::desk(),
            data: DataSection::default(),
            translate: TranslateSection::default(),
            evaluate: EvaluateSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellSection {
    pub downsampler: DownsamplerConfig,
    /// BOS padding in units of δ; defaults to the variant's own.
    pub pad_multiplier: Option<usize>,
}

impl Default for CellSection {
    fn default() -> Self {
        Self {
            downsampler: DownsamplerConfig::new(4, Variant::NonCausal, PosEmbedding::Sinusoidal, 128),
            pad_multiplier: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub deltas: Vec<usize>,
    pub model_dim: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            deltas: vec![2, 3, 4],
            model_dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyData {
    pub task: ToyTask,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab: usize,
    /// Pairs held out for validation, taken from the end.
    pub valid_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub valid_src: Option<PathBuf>,
    pub valid_tgt: Option<PathBuf>,
    /// Training pairs with longer sources are dropped.
    pub max_src_chars: Option<usize>,
    /// Generated corpus used instead of files.
    pub toy: Option<ToyData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslateSection {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub max_len: usize,
    pub batch_size: usize,
}

impl Default for TranslateSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            input: None,
            max_len: 512,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub hypotheses: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub max_n: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            hypotheses: None,
            references: None,
            max_n: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub deltas: Vec<usize>,
    /// Characters per source and target sentence.
    pub char_len: usize,
    pub sentences: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub generations: usize,
    pub dims: ModelDims,
    /// Also time a two-step head at δ = 1.
    pub two_step_baseline: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            deltas: vec![1, 2, 4],
            char_len: 128,
            sentences: 64,
            batch_size: 16,
            steps: 10,
            generations: 2,
            dims: ModelDims::default(),
            two_step_baseline: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Switches every training section to the full-scale settings
    /// (lr 1e-4 probe; lr 2e-4, warmup 4000, batch 128, smoothing 0.1,
    /// patience 10 translation; Transformer Base dimensions).
    pub fn apply_paper_preset(&mut self) {
        self.probe.hyper = TrainHyper::leak_probe();
        self.train = TrainHyper::translation();
        let d = ModelDims::base();
        self.model.encoder.model_dim = d.model_dim;
        self.model.decoder.model_dim = d.model_dim;
        self.model.dims = d;
    }

    pub fn validate(&self) -> Result<()> {
        self.probe.hyper.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        if self.grid.deltas.iter().any(|&d| d == 0) {
            bail!("grid deltas must be >= 1");
        }
        if self.bench.deltas.iter().any(|&d| d == 0) || self.bench.char_len == 0 {
            bail!("bench deltas and char_len must be >= 1");
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON encoding, hex.
    pub fn digest(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 1}}"#).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.seed = 1;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn paper_preset() {
        let mut c = RunConfig::default();
        c.apply_paper_preset();
        assert_eq!(c.probe.hyper.learning_rate, 1e-4);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.patience, Some(10));
        c.validate().unwrap();
    }
}
