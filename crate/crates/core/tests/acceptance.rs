//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Long-running: the probe grid and the copy-task
//! training runs dominate.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use gbstlab_core::bytedata::{byte_decode_lossy, byte_encode, gen_toy_pairs, ParallelPair, ToyTask};
use gbstlab_core::downsamplers::{
    causality_violations, random_instance, DownsamplerConfig, PosEmbedding, Upsampler, Variant,
};
use gbstlab_core::leakaudit::{audit_grid, binom_pvalue, standard_grid, AuditSettings, CellResult, Verdict, NO_LEAK_P};
use gbstlab_core::metrics::{char_accuracy, sequence_accuracy};
use gbstlab_core::numcore::gradcheck::projection_loss;
use gbstlab_core::numcore::{grad_check, GradCheckConfig, Graph, Segments, TrainHyper};
use gbstlab_core::seq2seq::{
    benchmark_step_time, build_model, decode, leaked_offsets, teacher_forced_accuracy, train_translation, Batch,
    Feedback, HeadKind, ModelConfig, ModelDims,
};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- probe grid

fn cell<'a>(grid: &'a [CellResult], delta: usize, variant: Variant, pos: PosEmbedding, pm: usize) -> &'a CellResult {
    grid.iter()
        .find(|r| {
            let c = &r.cell;
            c.config.delta == delta
                && c.config.variant == variant
                && c.config.pos_embedding == pos
                && c.pad_multiplier == pm
        })
        .expect("cell present in grid")
}

fn sin_fingerprints(grid: &[CellResult]) -> Outcome {
    let expected: [(usize, &[usize]); 3] = [(2, &[]), (3, &[1, 7]), (4, &[1, 2, 5])];
    let mut ok = true;
    let mut parts = Vec::new();
    for (delta, want) in expected {
        let r = &cell(grid, delta, Variant::NonCausal, PosEmbedding::Sinusoidal, 1).report;
        let flagged = r.flagged(NO_LEAK_P);
        let rest_clear = r
            .positions
            .iter()
            .filter(|p| !want.contains(&p.pos))
            .all(|p| p.p_value > NO_LEAK_P);
        ok &= flagged == want && rest_clear;
        let accs: Vec<String> = want
            .iter()
            .map(|&p| format!("{:.4}", r.positions[p - 1].accuracy))
            .collect();
        parts.push(format!("d{delta} {flagged:?} acc [{}]", accs.join(", ")));
    }
    check(ok, parts.join("; "))
}

fn conv_rows(grid: &[CellResult]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for delta in [2, 3, 4] {
        let r = &cell(grid, delta, Variant::NonCausal, PosEmbedding::Conv, 1).report;
        let mut red = 0;
        for p in &r.positions {
            if p.pos % delta != 0 {
                let leak = p.p_value < NO_LEAK_P && p.accuracy > 0.9;
                red += usize::from(leak);
                ok &= leak;
            } else {
                ok &= p.verdict == Verdict::NoLeak;
            }
        }
        parts.push(format!("d{delta} {red}/{} red", r.positions.len()));
    }
    check(ok, parts.join("; "))
}

fn dual_agreement(grid: &[CellResult]) -> Outcome {
    let bad: Vec<String> = grid
        .iter()
        .filter(|r| !r.disagreements.is_empty())
        .map(|r| format!("{} {:?}", r.report.config, r.disagreements))
        .collect();
    check(
        bad.is_empty(),
        format!("{} cells, {} disagreeing {bad:?}", grid.len(), bad.len()),
    )
}

fn causal_cleanliness(grid: &[CellResult]) -> Outcome {
    let mut ok = true;
    let mut dirty = Vec::new();
    for delta in [2, 3, 4] {
        for (variant, pm) in [
            (Variant::Removal, 1),
            (Variant::Masking, 1),
            (Variant::Padding, 2),
            (Variant::Lee, 1),
        ] {
            let r = cell(grid, delta, variant, PosEmbedding::Sinusoidal, pm);
            let clean =
                r.report.positions.iter().all(|p| p.verdict == Verdict::NoLeak) && r.oracle.positions().is_empty();
            if !clean {
                dirty.push(r.report.config.clone());
            }
            ok &= clean;
        }
    }
    let mut controls = Vec::new();
    for delta in [2, 3, 4] {
        let r = cell(grid, delta, Variant::Padding, PosEmbedding::Sinusoidal, 1);
        // δ = 2 sinusoidal GBST leaks nothing even unpadded, so the control
        // only has teeth where the non-causal cell leaks
        let expect_leak = delta > 2;
        let leaky = !r.report.leaks().is_empty() && !r.oracle.positions().is_empty();
        ok &= leaky == expect_leak;
        controls.push(format!("d{delta} p1 {:?}", r.report.flagged(NO_LEAK_P)));
    }
    check(
        ok,
        format!("dirty causal cells {dirty:?}; controls {}", controls.join(", ")),
    )
}

// ------------------------------------------------------------ structural

fn small(delta: usize, variant: Variant, pos: PosEmbedding) -> DownsamplerConfig {
    DownsamplerConfig {
        vocab_size: 12,
        lee_kernel_widths: vec![1, 2, 3],
        ..DownsamplerConfig::new(delta, variant, pos, 6)
    }
}

fn structural_causality() -> Outcome {
    let seeds = [1, 2, 3];
    let mut ok = true;
    let mut checked = 0;
    let mut dirty = Vec::new();
    for delta in [2, 3, 4] {
        for variant in [Variant::Removal, Variant::Masking, Variant::Padding, Variant::Lee] {
            let cfg = small(delta, variant, PosEmbedding::Sinusoidal);
            for len in (delta..=24).step_by(delta) {
                let v = causality_violations(&cfg, variant.pad_multiplier(), len, &seeds).map_err(|e| e.to_string())?;
                checked += 1;
                if !v.is_empty() {
                    ok = false;
                    dirty.push(format!("{} L{len}", cfg.label()));
                }
            }
        }
    }
    let mut control = Vec::new();
    for delta in [2, 3, 4] {
        let cfg = small(delta, Variant::NonCausal, PosEmbedding::Conv);
        let v = causality_violations(&cfg, 1, 24, &seeds).map_err(|e| e.to_string())?;
        ok &= !v.is_empty();
        control.push(format!("d{delta}:{}", v.len()));
    }
    check(
        ok,
        format!(
            "{checked} causal (variant, δ, L) cases clean {dirty:?}; non-causal conv violations {}",
            control.join(" ")
        ),
    )
}

fn delta_one_identity() -> Outcome {
    let mut worst = 0.0f64;
    for variant in [Variant::NonCausal, Variant::Removal, Variant::Masking, Variant::Padding] {
        for seed in 0..5 {
            let cfg = small(1, variant, PosEmbedding::Sinusoidal);
            let (ds, store) = random_instance(&cfg, seed).map_err(|e| e.to_string())?;
            let ids: Vec<usize> = (0..17).map(|i| (i * 7 + seed as usize) % 12).collect();
            let segs = Segments::single(ids.len());
            let mut g = Graph::<f64>::new(&store);
            let e = ds.embed(&mut g, &ids, &segs);
            let y = ds.forward_embedded(&mut g, e, &segs);
            let (a, b) = (g.value(e), g.value(y));
            if a.shape() != b.shape() {
                return Err(format!("{} changes shape", cfg.label()));
            }
            worst = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).abs())
                .fold(worst, f64::max);
        }
    }
    check(
        worst == 0.0,
        format!("max |out − embedded| = {worst:e} over 4 GBST variants × 5 seeds"),
    )
}

// ------------------------------------------------------------- gradients

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let seeds = 0..20u64;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut kinks = 0;
    let downsamplers = [
        ("gbst conv positions", small(3, Variant::NonCausal, PosEmbedding::Conv)),
        (
            "gbst candidates",
            small(4, Variant::NonCausal, PosEmbedding::Sinusoidal),
        ),
        (
            "masked candidates",
            small(3, Variant::Masking, PosEmbedding::Sinusoidal),
        ),
        ("removal", small(4, Variant::Removal, PosEmbedding::Sinusoidal)),
        ("lee stack", small(2, Variant::Lee, PosEmbedding::Sinusoidal)),
    ];
    for seed in seeds.clone() {
        for (name, cfg) in &downsamplers {
            let (ds, mut store) = random_instance(cfg, seed).map_err(|e| e.to_string())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let up = Upsampler::new(cfg.model_dim, cfg.delta, 9, "up", &mut store, &mut rng);
            let len = 4 * cfg.delta;
            let ids: Vec<usize> = (0..len).map(|i| (i * 5 + seed as usize * 3) % cfg.vocab_size).collect();
            let report = grad_check(
                &store,
                |g| {
                    let segs = Segments::from_lengths(&[len / 2, len / 2]);
                    let blocks = ds.forward(g, &ids, &segs);
                    let logits = up.forward(g, blocks);
                    projection_loss(g, logits, seed)
                },
                GradCheckConfig {
                    eps: 1e-6,
                    tol: 1e-4,
                    max_coords: 32,
                    seed,
                },
            );
            kinks += report.params.iter().map(|p| p.kinks_skipped).sum::<usize>();
            let w = worst.entry(name).or_default();
            *w = w.max(report.max_rel_err());
            if !report.passed() {
                failures.push(format!("{name} seed {seed}"));
            }
        }
        let dims = ModelDims {
            encoder_layers: 1,
            decoder_layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
        };
        let cfg = ModelConfig::with_decoder(dims, 2, Variant::Removal);
        let (model, store) = build_model(&cfg, seed).map_err(|e| e.to_string())?;
        let pairs = vec![
            ParallelPair {
                src: byte_encode("abc", true),
                tgt: byte_encode("xyzw", true),
            },
            ParallelPair {
                src: byte_encode("hello", true),
                tgt: byte_encode("hi", true),
            },
        ];
        let batch = Batch::new(&model, &pairs);
        let report = grad_check(
            &store,
            |g| {
                let y = model.logits(g, &batch);
                g.smoothed_ce(y, &batch.targets, 0.1).expect("targets present")
            },
            GradCheckConfig {
                eps: 1e-4,
                tol: 1e-4,
                max_coords: 4,
                seed,
            },
        );
        kinks += report.params.iter().map(|p| p.kinks_skipped).sum::<usize>();
        let w = worst.entry("seq2seq with two-step head").or_default();
        *w = w.max(report.max_rel_err());
        if !report.passed() {
            failures.push(format!("seq2seq seed {seed}: {:?}", report.failures()));
        }
    }
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    let secs = t0.elapsed().as_secs_f64();
    check(
        failures.is_empty() && secs < 300.0,
        format!(
            "20 seeds, max rel err: {}; {kinks} kinked coords skipped; {secs:.0}s; failures {failures:?}",
            summary.join(", ")
        ),
    )
}

// ------------------------------------------------------------ copy task

/// Pilot-derived settings for the copy task runs.
fn copy_dims() -> ModelDims {
    ModelDims {
        encoder_layers: 2,
        decoder_layers: 2,
        model_dim: 64,
        heads: 4,
        ffn_dim: 128,
        dropout: 0.1,
    }
}

fn copy_hyper(steps: usize) -> TrainHyper {
    TrainHyper {
        learning_rate: 1e-3,
        warmup_steps: 200,
        batch_size: 32,
        max_steps: Some(steps),
        max_epochs: None,
        eval_every: Some(250),
        patience: None,
        grad_clip: Some(1.0),
        label_smoothing: 0.0,
        ..TrainHyper::desk()
    }
}

struct CopyRun {
    label: String,
    leaked: Vec<usize>,
    tf_leaked: f64,
    free_char: f64,
    free_seq: f64,
    secs: f64,
}

fn copy_run(
    cfg: &ModelConfig,
    steps: usize,
    train: &[ParallelPair],
    valid: &[ParallelPair],
    test: &[ParallelPair],
) -> Result<CopyRun, String> {
    let t0 = Instant::now();
    let (model, store) = build_model(cfg, 0).map_err(|e| e.to_string())?;
    let (ck, _) = train_translation(&model, store, train, valid, &copy_hyper(steps)).map_err(|e| e.to_string())?;
    let leaked = leaked_offsets(&model, &ck.store, &test[0]);
    let tf = teacher_forced_accuracy(&model, &ck.store, test, 64);
    let srcs: Vec<_> = test.iter().map(|p| p.src.clone()).collect();
    let gens = decode::<f32>(&model, &ck.store, &srcs, 40, Feedback::Greedy, false);
    let hyps: Vec<String> = gens.iter().map(|g| byte_decode_lossy(&g.output.ids)).collect();
    let refs: Vec<String> = test.iter().map(|p| byte_decode_lossy(&p.tgt.ids)).collect();
    Ok(CopyRun {
        label: cfg.label(),
        tf_leaked: tf.pooled(&leaked),
        leaked,
        free_char: char_accuracy(&hyps, &refs).map_err(|e| e.to_string())?.value,
        free_seq: sequence_accuracy(&hyps, &refs).map_err(|e| e.to_string())?.value,
        secs: t0.elapsed().as_secs_f64(),
    })
}

fn copy_task() -> Outcome {
    // every target spans at least two blocks at the largest δ; a target that
    // fits in one block never has a right-hand block to leak from
    let data = gen_toy_pairs(ToyTask::Copy, 20_000, NON_CAUSAL_DELTA..=32, 32, 0).map_err(|e| e.to_string())?;
    let (train, rest) = data.split_at(19_000);
    let (valid, test) = rest.split_at(500);
    let char_level = ModelConfig::with_decoder(copy_dims(), 1, Variant::Removal);
    let removal = ModelConfig::with_decoder(copy_dims(), 2, Variant::Removal);
    let non_causal = ModelConfig::with_decoder(copy_dims(), NON_CAUSAL_DELTA, Variant::NonCausal);
    let a = copy_run(&char_level, 3000, train, valid, test)?;
    eprintln!("  {} free char {:.4} ({:.0}s)", a.label, a.free_char, a.secs);
    let b = copy_run(&removal, 3000, train, valid, test)?;
    eprintln!("  {} free char {:.4} ({:.0}s)", b.label, b.free_char, b.secs);
    let c = copy_run(&non_causal, NON_CAUSAL_STEPS, train, valid, test)?;
    eprintln!(
        "  {} tf leaked {:.4} free seq {:.4} ({:.0}s)",
        c.label, c.tf_leaked, c.free_seq, c.secs
    );
    let total = a.secs + b.secs + c.secs;
    let ok = a.free_char >= 0.99
        && b.free_char >= 0.95
        && !c.leaked.is_empty()
        && c.tf_leaked >= 0.95
        && c.free_seq <= 0.05
        && total <= 3600.0;
    check(
        ok,
        format!(
            "{} free char {:.4} (≥0.99); {} free char {:.4} (≥0.95); {} leaked offsets {:?} teacher-forced {:.4} (≥0.95), free seq {:.4} (≤0.05); {total:.0}s (≤3600)",
            a.label, a.free_char, b.label, b.free_char, c.label, c.leaked, c.tf_leaked, c.free_seq
        ),
    )
}

const NON_CAUSAL_DELTA: usize = 4;
const NON_CAUSAL_STEPS: usize = 8000;

// ----------------------------------------------------------------- speed

fn speed_trend() -> Outcome {
    let dims = copy_dims();
    let corpus = gen_toy_pairs(ToyTask::Copy, 64, 128..=128, 26, 0).map_err(|e| e.to_string())?;
    let mut configs: Vec<ModelConfig> = [1, 2, 4]
        .iter()
        .map(|&d| ModelConfig::with_decoder(dims.clone(), d, Variant::Removal))
        .collect();
    let mut two_step = ModelConfig::with_decoder(dims.clone(), 1, Variant::Removal);
    two_step.head = HeadKind::TwoStep;
    configs.push(two_step);
    let hyper = TrainHyper {
        batch_size: 16,
        ..TrainHyper::desk()
    };
    let rows = benchmark_step_time(&configs, &corpus, &hyper, 15, 1, 129).map_err(|e| e.to_string())?;
    let ms: Vec<f64> = rows.iter().map(|r| r.ms_per_step).collect();
    let ok = ms[0] > ms[1] && ms[1] > ms[2] && ms[3] > ms[0];
    let detail: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {:.0}ms", r.label, r.ms_per_step))
        .collect();
    check(ok, format!("median step at 128 chars: {}", detail.join(", ")))
}

// -------------------------------------------------------------- binomial

/// Exact `P(X ≥ k)` at each of `ks`, `X ~ Binomial(n, p)`, with `p` taken
/// as the exact rational value of its `f64`.
fn exact_tails(n: u64, p: f64, ks: &[u64]) -> BTreeMap<u64, f64> {
    let p = BigRational::from_float(p).expect("finite");
    let a = p.numer().clone();
    let b = p.denom().clone();
    let c = &b - &a;
    let den = num_traits::pow(b, n as usize);
    // term(i) = C(n, i) a^i c^(n−i), walked down from i = n
    let mut term = num_traits::pow(a.clone(), n as usize);
    let mut acc = BigInt::zero();
    let mut tails = BTreeMap::new();
    for i in (0..=n).rev() {
        acc += &term;
        if ks.contains(&i) {
            tails.insert(
                i,
                BigRational::new_raw(acc.clone(), den.clone())
                    .to_f64()
                    .expect("representable"),
            );
        }
        if i > 0 {
            term = term * &c * BigInt::from(i) / (&a * BigInt::from(n - i + 1));
        }
    }
    tails
}

fn binomial_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut bad = Vec::new();
    for &n in &[1u64, 2, 7, 40, 200, 1000, 3200, 4000] {
        for &p in &[0.01, 1.0 / 32.0, 0.3, 0.5, 0.9] {
            let step = (n / 150).max(1);
            let ks: Vec<u64> = (0..=n).step_by(step as usize).chain([n]).collect();
            let exact = exact_tails(n, p, &ks);
            for (&k, &want) in &exact {
                let got = binom_pvalue(k, n, p);
                cases += 1;
                if want >= f64::MIN_POSITIVE {
                    let rel = (got - want).abs() / want;
                    worst = worst.max(rel);
                    if rel > 1e-12 {
                        bad.push(format!("n{n} p{p} k{k}: {got:e} vs {want:e}"));
                    }
                } else if got > 1e-300 {
                    bad.push(format!("n{n} p{p} k{k}: {got:e} vs underflow"));
                }
            }
        }
    }
    bad.truncate(5);
    check(
        bad.is_empty(),
        format!("{cases} (n, p, k) cases, n ≤ 4000, max rel err {worst:.2e}; {bad:?}"),
    )
}

// ------------------------------------------------------------------ main

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results: BTreeMap<u32, (&str, Outcome)> = BTreeMap::new();
    // numeric arguments select criteria; none means all
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| only.is_empty() || only.contains(&id);
    let run = |results: &mut BTreeMap<u32, (&str, Outcome)>, id: u32, name: &'static str, f: fn() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let out = f();
        eprintln!("[{id}] {name} done in {:.0}s", t.elapsed().as_secs_f64());
        results.insert(id, (name, out));
    };
    run(&mut results, 10, "binomial tail vs exact summation", binomial_oracle);
    run(&mut results, 7, "δ = 1 identity", delta_one_identity);
    run(&mut results, 5, "structural causality", structural_causality);
    run(&mut results, 6, "gradient checks", gradient_checks);

    if (1..=4).any(wanted) {
        let t = Instant::now();
        let settings = AuditSettings::default();
        let grid = audit_grid(&standard_grid(&[2, 3, 4], 128), &settings, |r| {
            eprintln!(
                "  {} leaks {:?} oracle {:?}",
                r.report.config,
                r.report.leaks(),
                r.oracle.positions()
            );
        });
        eprintln!("[1-4] probe grid done in {:.0}s", t.elapsed().as_secs_f64());
        match &grid {
            Ok(grid) => {
                results.insert(1, ("sinusoidal fingerprints", sin_fingerprints(grid)));
                results.insert(2, ("conv rows", conv_rows(grid)));
                results.insert(3, ("probe and oracle agree", dual_agreement(grid)));
                results.insert(4, ("causal variants clean, p1 padding leaky", causal_cleanliness(grid)));
            }
            Err(e) => {
                for (id, name) in [
                    (1, "sinusoidal fingerprints"),
                    (2, "conv rows"),
                    (3, "probe and oracle agree"),
                    (4, "causal variants clean"),
                ] {
                    results.insert(id, (name, Err(format!("grid failed: {e}"))));
                }
            }
        }
    }

    run(&mut results, 8, "copy task decoding", copy_task);
    run(&mut results, 9, "step time trend", speed_trend);

    let mut failed = 0;
    for (id, (name, out)) in &results {
        match out {
            Ok(d) => println!("criterion {id:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {d}");
            }
        }
    }
    println!(
        "{} passed, {failed} failed, {:.0}s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
