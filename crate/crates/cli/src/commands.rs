use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use gbstlab_core::bytedata::{
    byte_decode_lossy, byte_encode, gen_toy_pairs, load_parallel_corpus, ParallelPair, ToyTask,
};
use gbstlab_core::leakaudit::{
    audit_grid, reachability_oracle, standard_grid, to_markdown, to_tsv, AuditCell, LeakReport,
};
use gbstlab_core::metrics::{char_accuracy, corpus_bleu, sequence_accuracy};
use gbstlab_core::seq2seq::{
    benchmark_step_time, build_model, decode, train_translation, Checkpoint, Feedback, HeadKind, ModelConfig,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::OutDir;

fn cells(cfg: &RunConfig, grid: bool) -> Result<Vec<AuditCell>> {
    let cells = if grid {
        standard_grid(&cfg.grid.deltas, cfg.grid.model_dim)
    } else {
        let ds = cfg.cell.downsampler.clone();
        let pad_multiplier = cfg.cell.pad_multiplier.unwrap_or(ds.variant.pad_multiplier());
        vec![AuditCell {
            config: ds,
            pad_multiplier,
        }]
    };
    for c in &cells {
        c.config.validate()?;
        c.spec(&cfg.probe).validate()?;
    }
    Ok(cells)
}

pub fn leak_test(cfg: &RunConfig, out: &Path, grid: bool) -> Result<ExitCode> {
    cfg.probe.hyper.validate()?;
    let cells = cells(cfg, grid)?;
    let out = OutDir::create(out, cfg, "leak-test")?;
    let results = audit_grid(&cells, &cfg.probe, |r| {
        eprintln!(
            "{}: leaks {:?}, oracle {:?}, {} disagreement(s)",
            r.report.config,
            r.report.leaks(),
            r.oracle.positions(),
            r.disagreements.len()
        );
    })?;
    let reports: Vec<LeakReport> = results.iter().map(|r| r.report.clone()).collect();
    out.write("leak_report.tsv", to_tsv(&reports).as_bytes())?;
    let mut md = format!("config sha256: `{}`\n\n", out.digest);
    md.push_str(&to_markdown(&reports));
    out.write("leak_report.md", md.as_bytes())?;
    #[derive(Serialize)]
    struct Summary<'a, T> {
        config_sha256: &'a str,
        cells: &'a [T],
    }
    out.write_json(
        "leak_report.json",
        &Summary {
            config_sha256: &out.digest,
            cells: &results,
        },
    )?;
    let disagreeing: Vec<&str> = results
        .iter()
        .filter(|r| !r.disagreements.is_empty())
        .map(|r| r.report.config.as_str())
        .collect();
    print!("{}", to_markdown(&reports));
    if disagreeing.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("probe and oracle disagree on: {}", disagreeing.join(", "));
        Ok(ExitCode::from(2))
    }
}

pub fn oracle(cfg: &RunConfig, out: &Path, grid: bool) -> Result<ExitCode> {
    let cells = cells(cfg, grid)?;
    let out = OutDir::create(out, cfg, "oracle")?;
    let mut sets = Vec::with_capacity(cells.len());
    for c in &cells {
        let set = reachability_oracle(&c.config, &c.spec(&cfg.probe), &cfg.probe.oracle_seeds)?;
        println!("{}\t{:?}", set.config, set.positions());
        sets.push(set);
    }
    out.write_json("oracle.json", &sets)?;
    Ok(ExitCode::SUCCESS)
}

fn load_data(cfg: &RunConfig) -> Result<(Vec<ParallelPair>, Vec<ParallelPair>)> {
    let d = &cfg.data;
    if let Some(t) = &d.toy {
        if t.valid_count == 0 || t.valid_count >= t.count {
            bail!("toy valid_count must be in 1..count");
        }
        let mut pairs = gen_toy_pairs(t.task, t.count, t.min_len..=t.max_len, t.vocab, cfg.seed)?;
        let valid = pairs.split_off(t.count - t.valid_count);
        return Ok((pairs, valid));
    }
    let need = |p: &Option<std::path::PathBuf>, what: &str| -> Result<std::path::PathBuf> {
        p.clone()
            .with_context(|| format!("data.{what} is required unless data.toy is set"))
    };
    let max = d.max_src_chars.unwrap_or(usize::MAX);
    let train = load_parallel_corpus(
        &need(&d.train_src, "train_src")?,
        &need(&d.train_tgt, "train_tgt")?,
        max,
    )?;
    let valid = load_parallel_corpus(
        &need(&d.valid_src, "valid_src")?,
        &need(&d.valid_tgt, "valid_tgt")?,
        usize::MAX,
    )?;
    Ok((train, valid))
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    cfg.validate()?;
    let (train, valid) = load_data(cfg)?;
    let out = OutDir::create(out, cfg, "train")?;
    let (model, store) = build_model(&cfg.model, cfg.seed)?;
    eprintln!(
        "{}: {} parameters, {} training pairs",
        cfg.model.label(),
        store.num_scalars(),
        train.len()
    );
    let (ck, log) = train_translation(&model, store, &train, &valid, &cfg.train)?;
    let ck_path = out.path("model.ckpt");
    ck.save(&ck_path)?;
    let mut tsv = String::from("step\tloss\tlr\telapsed_s\n");
    for (i, ((loss, lr), t)) in log
        .step_losses
        .iter()
        .zip(&log.learning_rates)
        .zip(&log.elapsed_s)
        .enumerate()
    {
        let _ = writeln!(tsv, "{}\t{:.6}\t{:.6e}\t{:.3}", i + 1, loss, lr, t);
    }
    out.write("train_log.tsv", tsv.as_bytes())?;
    let mut vt = String::from("step\tvalid_loss\n");
    for (s, v) in &log.validation {
        let _ = writeln!(vt, "{s}\t{v:.6}");
    }
    out.write("validation.tsv", vt.as_bytes())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        config_sha256: &'a str,
        checkpoint: String,
        steps: usize,
        epochs: usize,
        best_step: usize,
        best_valid_loss: Option<f64>,
        stopped_early: bool,
    }
    let best = log
        .validation
        .iter()
        .map(|v| v.1)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
    out.write_json(
        "train_summary.json",
        &Summary {
            config_sha256: &out.digest,
            checkpoint: ck_path.display().to_string(),
            steps: ck.step,
            epochs: log.epochs,
            best_step: log.best_step,
            best_valid_loss: best,
            stopped_early: log.stopped_early,
        },
    )?;
    println!(
        "checkpoint {} (best valid loss {:?} at step {})",
        ck_path.display(),
        best,
        log.best_step
    );
    Ok(ExitCode::SUCCESS)
}

pub fn translate(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let t = &cfg.translate;
    let ck_path = t
        .checkpoint
        .as_ref()
        .context("a checkpoint is required (--checkpoint)")?;
    let input = t.input.as_ref().context("an input file is required (--input)")?;
    let ck = Checkpoint::load(ck_path).with_context(|| format!("loading checkpoint {}", ck_path.display()))?;
    let model = ck.model()?;
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let srcs: Vec<_> = text.lines().map(|l| byte_encode(l, true)).collect();
    let out = OutDir::create(out, cfg, "translate")?;
    let mut hyps = String::new();
    let mut truncated = 0usize;
    for chunk in srcs.chunks(t.batch_size.max(1)) {
        for g in decode::<f32>(&model, &ck.store, chunk, t.max_len, Feedback::Greedy, false) {
            truncated += usize::from(g.truncated);
            // one hypothesis per line, whatever bytes the model emitted
            let text = byte_decode_lossy(&g.output.ids).replace(['\n', '\r'], " ");
            hyps.push_str(&text);
            hyps.push('\n');
        }
    }
    let path = out.write("hypotheses.txt", hyps.as_bytes())?;
    if truncated > 0 {
        eprintln!("{truncated} of {} outputs hit max_len {}", srcs.len(), t.max_len);
    }
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let e = &cfg.evaluate;
    let hyps = read_lines(e.hypotheses.as_ref().context("--hypotheses is required")?)?;
    let refs = read_lines(e.references.as_ref().context("--references is required")?)?;
    let out = OutDir::create(out, cfg, "evaluate")?;
    let results = vec![
        corpus_bleu(&hyps, &refs, e.max_n)?,
        char_accuracy(&hyps, &refs)?,
        sequence_accuracy(&hyps, &refs)?,
    ];
    for r in &results {
        println!("{}\t{:.4}", r.metric, r.value);
    }
    out.write_json("eval.json", &results)?;
    Ok(ExitCode::SUCCESS)
}

pub fn bench(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    cfg.validate()?;
    let b = &cfg.bench;
    let corpus = gen_toy_pairs(ToyTask::Copy, b.sentences, b.char_len..=b.char_len, 26, cfg.seed)?;
    let mut configs: Vec<ModelConfig> = b
        .deltas
        .iter()
        .map(|&d| ModelConfig::with_decoder(b.dims.clone(), d, gbstlab_core::downsamplers::Variant::Removal))
        .collect();
    if b.two_step_baseline {
        let mut c = ModelConfig::with_decoder(b.dims.clone(), 1, gbstlab_core::downsamplers::Variant::Removal);
        c.head = HeadKind::TwoStep;
        configs.push(c);
    }
    let hyper = gbstlab_core::numcore::TrainHyper {
        batch_size: b.batch_size,
        ..cfg.train.clone()
    };
    let out = OutDir::create(out, cfg, "bench")?;
    let rows = benchmark_step_time(&configs, &corpus, &hyper, b.steps, b.generations, b.char_len + 1)?;
    let base = rows.first().map(|r| r.ms_per_step).unwrap_or(1.0);
    let mut tsv = String::from("config\tms_per_step\tms_per_generation\trelative_step_time\n");
    let mut md = format!(
        "config sha256: `{}`\n\n| config | ms/step | ms/generation | relative |\n|---|---|---|---|\n",
        out.digest
    );
    for r in &rows {
        let rel = r.ms_per_step / base;
        let _ = writeln!(
            tsv,
            "{}\t{:.3}\t{:.3}\t{:.3}",
            r.label, r.ms_per_step, r.ms_per_generation, rel
        );
        let _ = writeln!(
            md,
            "| {} | {:.1} | {:.1} | {:.2} |",
            r.label, r.ms_per_step, r.ms_per_generation, rel
        );
    }
    out.write("bench.tsv", tsv.as_bytes())?;
    out.write("bench.md", md.as_bytes())?;
    print!("{tsv}");
    Ok(ExitCode::SUCCESS)
}
