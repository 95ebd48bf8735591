mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use gbstlab_core::downsamplers::{PosEmbedding, Variant};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "gbstlab",
    version,
    about = "Leak audits and desk-scale training for character-block downsamplers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration document.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Use the full-scale probe, translation and model settings.
    #[arg(long)]
    paper: bool,
}

#[derive(Args, Clone, Default)]
struct CellOverrides {
    #[arg(long)]
    delta: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long = "pos-emb")]
    pos_emb: Option<PosEmbedding>,
    /// Run the standard grid instead of a single cell.
    #[arg(long)]
    grid: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate leak probes, compare with the reachability oracle.
    LeakTest {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: CellOverrides,
    },
    /// Static reachability only.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: CellOverrides,
    },
    /// Train an encoder-decoder and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        delta: Option<usize>,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Greedy decoding of a source file with a checkpoint.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score a hypothesis file against references.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hypotheses: Option<PathBuf>,
        #[arg(long)]
        references: Option<PathBuf>,
    },
    /// Relative step and generation times across δ.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if common.paper {
        cfg.apply_paper_preset();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.probe.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn apply_cell(cfg: &mut RunConfig, o: &CellOverrides) {
    let ds = &mut cfg.cell.downsampler;
    if let Some(d) = o.delta {
        ds.delta = d;
        cfg.grid.deltas = vec![d];
    }
    if let Some(v) = o.variant {
        ds.variant = v;
        if v != Variant::NonCausal && o.pos_emb.is_none() {
            ds.pos_embedding = PosEmbedding::Sinusoidal;
        }
    }
    if let Some(p) = o.pos_emb {
        ds.pos_embedding = p;
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::LeakTest { common, cell } => {
            let mut cfg = resolve(&common)?;
            apply_cell(&mut cfg, &cell);
            commands::leak_test(&cfg, &common.out, cell.grid)
        }
        Command::Oracle { common, cell } => {
            let mut cfg = resolve(&common)?;
            apply_cell(&mut cfg, &cell);
            commands::oracle(&cfg, &common.out, cell.grid)
        }
        Command::Train { common, delta, variant } => {
            let mut cfg = resolve(&common)?;
            if delta.is_some() || variant.is_some() {
                let d = delta.unwrap_or(cfg.model.decoder.delta);
                let v = variant.unwrap_or(cfg.model.decoder.variant);
                cfg.model = gbstlab_core::seq2seq::ModelConfig::with_decoder(cfg.model.dims.clone(), d, v);
            }
            commands::train(&cfg, &common.out)
        }
        Command::Translate {
            common,
            checkpoint,
            input,
        } => {
            let mut cfg = resolve(&common)?;
            cfg.translate.checkpoint = checkpoint.or(cfg.translate.checkpoint);
            cfg.translate.input = input.or(cfg.translate.input);
            commands::translate(&cfg, &common.out)
        }
        Command::Evaluate {
            common,
            hypotheses,
            references,
        } => {
            let mut cfg = resolve(&common)?;
            cfg.evaluate.hypotheses = hypotheses.or(cfg.evaluate.hypotheses);
            cfg.evaluate.references = references.or(cfg.evaluate.references);
            commands::evaluate(&cfg, &common.out)
        }
        Command::Bench { common } => {
            let cfg = resolve(&common)?;
            commands::bench(&cfg, &common.out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
