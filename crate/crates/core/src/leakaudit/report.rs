use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bytedata::ProbeSpec;
use crate::downsamplers::{DownsamplerConfig, PosEmbedding, Variant};

pub const LEAK_P: f64 = 1e-10;
pub const NO_LEAK_P: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Leak,
    NoLeak,
    Inconclusive,
}

impl Verdict {
    pub fn from_p(p: f64) -> Self {
        if p < LEAK_P {
            Verdict::Leak
        } else if p > NO_LEAK_P {
            Verdict::NoLeak
        } else {
            Verdict::Inconclusive
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Leak => "leak",
            Verdict::NoLeak => "no_leak",
            Verdict::Inconclusive => "inconclusive",
        }
    }

    /// Table cell colour word.
    pub fn colour(self) -> &'static str {
        match self {
            Verdict::Leak => "red",
            Verdict::NoLeak => "white",
            Verdict::Inconclusive => "grey",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionStat {
    /// 1-based target position.
    pub pos: usize,
    pub successes: u64,
    pub n: u64,
    pub accuracy: f64,
    pub p_value: f64,
    pub verdict: Verdict,
}

impl PositionStat {
    pub fn new(pos: usize, successes: u64, n: u64, p_value: f64) -> Self {
        Self {
            pos,
            successes,
            n,
            accuracy: successes as f64 / n as f64,
            p_value,
            verdict: Verdict::from_p(p_value),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakReport {
    pub config: String,
    pub delta: usize,
    pub variant: Variant,
    pub pos_embedding: PosEmbedding,
    pub pad_multiplier: usize,
    pub seed: u64,
    pub chance: f64,
    pub positions: Vec<PositionStat>,
}

/// Identifier of a probe setup, e.g. `non_causal/sinusoidal/d4/p1`.
pub fn cell_label(config: &DownsamplerConfig, pad_multiplier: usize) -> String {
    format!("{}/p{}", config.label(), pad_multiplier)
}

impl LeakReport {
    pub fn new(config: &DownsamplerConfig, spec: &ProbeSpec, chance: f64, positions: Vec<PositionStat>) -> Self {
        Self {
            config: cell_label(config, spec.pad_multiplier),
            delta: config.delta,
            variant: config.variant,
            pos_embedding: config.pos_embedding,
            pad_multiplier: spec.pad_multiplier,
            seed: spec.seed,
            chance,
            positions,
        }
    }

    /// 1-based positions with p-value below `threshold`.
    pub fn flagged(&self, threshold: f64) -> Vec<usize> {
        self.positions
            .iter()
            .filter(|p| p.p_value < threshold)
            .map(|p| p.pos)
            .collect()
    }

    pub fn leaks(&self) -> Vec<usize> {
        self.positions
            .iter()
            .filter(|p| p.verdict == Verdict::Leak)
            .map(|p| p.pos)
            .collect()
    }
}

pub const TSV_HEADER: &str = "config\tdelta\tvariant\tpos\taccuracy\tsuccesses\tn\tp_value\tverdict";

pub fn to_tsv(reports: &[LeakReport]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in reports {
        for p in &r.positions {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.4}\t{}\t{}\t{:.3e}\t{}",
                r.config,
                r.delta,
                r.variant,
                p.pos,
                p.accuracy,
                p.successes,
                p.n,
                p.p_value,
                p.verdict.as_str()
            );
        }
    }
    out
}

/// One row per report, one column per target position; each cell is the
/// accuracy followed by the verdict colour.
pub fn to_markdown(reports: &[LeakReport]) -> String {
    let width = reports.iter().map(|r| r.positions.len()).max().unwrap_or(0);
    let mut out = String::from("| config | δ |");
    for i in 1..=width {
        let _ = write!(out, " {i} |");
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(width));
    out.push('\n');
    for r in reports {
        let _ = write!(out, "| {} | {} |", r.config, r.delta);
        for p in &r.positions {
            let _ = write!(out, " {:.4} {} |", p.accuracy, p.verdict.colour());
        }
        out.push('\n');
    }
    out
}
