//! Leak auditing: the trainable random-sequence probe, the perturbation
//! reachability oracle, exact binomial significance, and report emission.

pub mod binom;
pub mod oracle;
pub mod probe;
pub mod report;

use serde::{Deserialize, Serialize};

pub use binom::binom_pvalue;
pub use oracle::{reachability_oracle, ReachabilitySet, DEFAULT_ORACLE_SEEDS};
pub use probe::{eval_probe, train_probe, ProbeModel};
pub use report::{cell_label, to_markdown, to_tsv, LeakReport, PositionStat, Verdict, LEAK_P, NO_LEAK_P};

use crate::bytedata::ProbeSpec;
use crate::downsamplers::{DownsamplerConfig, PosEmbedding, Variant};
use crate::error::Result;
use crate::numcore::TrainHyper;

/// One probe setup: a downsampler and the BOS padding of its input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditCell {
    pub config: DownsamplerConfig,
    pub pad_multiplier: usize,
}

impl AuditCell {
    pub fn new(config: DownsamplerConfig) -> Self {
        let pad_multiplier = config.variant.pad_multiplier();
        Self { config, pad_multiplier }
    }

    pub fn label(&self) -> String {
        cell_label(&self.config, self.pad_multiplier)
    }

    pub fn spec(&self, settings: &AuditSettings) -> ProbeSpec {
        ProbeSpec {
            seq_len: settings.seq_len,
            probe_vocab: settings.probe_vocab,
            delta: self.config.delta,
            pad_multiplier: self.pad_multiplier,
            seed: settings.seed,
        }
    }
}

/// The cells of the standard grid for each δ: non-causal GBST with
/// sinusoidal and conv positions, the four causal variants, and padding with
/// only δ BOS tokens as a negative control.
pub fn standard_grid(deltas: &[usize], model_dim: usize) -> Vec<AuditCell> {
    let sin = PosEmbedding::Sinusoidal;
    let mut cells = Vec::new();
    for &delta in deltas {
        let cfg = |v, p| DownsamplerConfig::new(delta, v, p, model_dim);
        cells.push(AuditCell::new(cfg(Variant::NonCausal, sin)));
        cells.push(AuditCell::new(cfg(Variant::NonCausal, PosEmbedding::Conv)));
        cells.push(AuditCell::new(cfg(Variant::Removal, sin)));
        cells.push(AuditCell::new(cfg(Variant::Masking, sin)));
        cells.push(AuditCell::new(cfg(Variant::Padding, sin)));
        cells.push(AuditCell {
            config: cfg(Variant::Padding, sin),
            pad_multiplier: 1,
        });
        cells.push(AuditCell::new(cfg(Variant::Lee, sin)));
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Disagreement {
    /// The probe is not at chance where the oracle finds no path.
    ProbeFlagsUnreachable { pos: usize, p_value: f64 },
    /// The oracle finds a path but the probe stays at chance.
    ReachableAtChance { pos: usize, p_value: f64 },
    /// A conv-position leak copies the character exactly, yet the probe
    /// did not recover it.
    WeakConvLeak { pos: usize, accuracy: f64 },
}

/// Compares probe verdicts with oracle reachability.
pub fn disagreements(report: &LeakReport, oracle: &ReachabilitySet) -> Vec<Disagreement> {
    let mut out = Vec::new();
    for (stat, &reach) in report.positions.iter().zip(&oracle.reachable) {
        let (pos, p_value) = (stat.pos, stat.p_value);
        if !reach && stat.verdict != Verdict::NoLeak {
            out.push(Disagreement::ProbeFlagsUnreachable { pos, p_value });
        }
        if reach && stat.verdict == Verdict::NoLeak {
            out.push(Disagreement::ReachableAtChance { pos, p_value });
        }
        if reach
            && report.pos_embedding == PosEmbedding::Conv
            && !(stat.accuracy > 0.9 && stat.verdict == Verdict::Leak)
        {
            out.push(Disagreement::WeakConvLeak {
                pos,
                accuracy: stat.accuracy,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: AuditCell,
    pub report: LeakReport,
    pub oracle: ReachabilitySet,
    pub disagreements: Vec<Disagreement>,
    pub final_loss: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSettings {
    pub seq_len: usize,
    pub probe_vocab: usize,
    pub hyper: TrainHyper,
    pub eval_batches: usize,
    pub oracle_seeds: Vec<u64>,
    pub seed: u64,
}

impl Default for AuditSettings {
    fn default() -> Self {
        let spec = ProbeSpec::default();
        Self {
            seq_len: spec.seq_len,
            probe_vocab: spec.probe_vocab,
            hyper: TrainHyper::leak_probe_desk(),
            eval_batches: 100,
            oracle_seeds: DEFAULT_ORACLE_SEEDS.to_vec(),
            seed: 0,
        }
    }
}

/// Oracle plus trained probe for one cell. Cells share nothing, so callers
/// may run them concurrently.
pub fn audit_cell(cell: &AuditCell, settings: &AuditSettings) -> Result<CellResult> {
    let spec = cell.spec(settings);
    let oracle = reachability_oracle(&cell.config, &spec, &settings.oracle_seeds)?;
    let (model, losses) = train_probe(&cell.config, &spec, &settings.hyper)?;
    let report = eval_probe(
        &model,
        settings.eval_batches,
        settings.hyper.batch_size,
        settings.seed.wrapping_add(0x5eed),
    );
    let disagreements = disagreements(&report, &oracle);
    let tail = losses.len().saturating_sub(50);
    let final_loss = losses[tail..].iter().sum::<f32>() / (losses.len() - tail).max(1) as f32;
    Ok(CellResult {
        cell: cell.clone(),
        report,
        oracle,
        disagreements,
        final_loss,
    })
}

/// Runs every cell in order, reporting each result to `progress`.
pub fn audit_grid(
    cells: &[AuditCell],
    settings: &AuditSettings,
    mut progress: impl FnMut(&CellResult),
) -> Result<Vec<CellResult>> {
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let r = audit_cell(cell, settings)?;
        progress(&r);
        results.push(r);
    }
    Ok(results)
}
