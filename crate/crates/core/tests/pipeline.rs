use gbstlab_core::bytedata::{gen_toy_pairs, ToyTask};
use gbstlab_core::downsamplers::{random_instance, DownsamplerConfig, PosEmbedding, Variant};
use gbstlab_core::leakaudit::{audit_cell, AuditCell, AuditSettings};
use gbstlab_core::numcore::TrainHyper;
use gbstlab_core::seq2seq::{build_model, decode, train_translation, Checkpoint, Feedback, ModelConfig, ModelDims};
use proptest::prelude::*;

fn small(delta: usize, variant: Variant) -> DownsamplerConfig {
    DownsamplerConfig {
        vocab_size: 16,
        lee_kernel_widths: vec![1, 2],
        ..DownsamplerConfig::new(delta, variant, PosEmbedding::Sinusoidal, 6)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // block b may only depend on the first (b + 1)·δ inputs
    #[test]
    fn causal_blocks_ignore_later_inputs(
        delta in 2usize..=4,
        variant in prop::sample::select(vec![Variant::Removal, Variant::Masking, Variant::Lee]),
        blocks in 2usize..=6,
        keep in 1usize..6,
        seed in 0u64..1000,
        ids in prop::collection::vec(0u32..16, 24),
        tail in prop::collection::vec(0u32..16, 24),
    ) {
        let keep = keep.min(blocks - 1);
        let len = blocks * delta;
        let (ds, store) = random_instance(&small(delta, variant), seed).unwrap();
        let a = ds.downsample(&store, &ids[..len]).unwrap();
        let mut changed = ids[..len].to_vec();
        changed[keep * delta..].copy_from_slice(&tail[..len - keep * delta]);
        let b = ds.downsample(&store, &changed).unwrap();
        for r in 0..keep {
            for (x, y) in a.blocks.row(r).iter().zip(b.blocks.row(r)) {
                prop_assert!((x - y).abs() <= 1e-6, "block {} moved: {} vs {}", r, x, y);
            }
        }
    }
}

#[test]
fn removal_cell_audits_clean() {
    let settings = AuditSettings {
        hyper: TrainHyper {
            max_steps: Some(150),
            batch_size: 16,
            ..TrainHyper::leak_probe_desk()
        },
        eval_batches: 20,
        ..AuditSettings::default()
    };
    let cell = AuditCell::new(DownsamplerConfig::new(
        2,
        Variant::Removal,
        PosEmbedding::Sinusoidal,
        16,
    ));
    let r = audit_cell(&cell, &settings).unwrap();
    assert!(r.oracle.positions().is_empty());
    assert!(r.report.leaks().is_empty());
    assert!(r.disagreements.is_empty(), "{:?}", r.disagreements);
}

#[test]
fn trained_checkpoint_decodes_identically_after_reload() {
    let dims = ModelDims {
        encoder_layers: 1,
        decoder_layers: 1,
        model_dim: 16,
        heads: 2,
        ffn_dim: 32,
        dropout: 0.1,
    };
    let cfg = ModelConfig::with_decoder(dims, 2, Variant::Removal);
    let data = gen_toy_pairs(ToyTask::Reverse, 120, 1..=6, 8, 4).unwrap();
    let (model, store) = build_model(&cfg, 1).unwrap();
    let hyper = TrainHyper {
        learning_rate: 3e-3,
        warmup_steps: 0,
        batch_size: 16,
        max_steps: Some(20),
        max_epochs: None,
        eval_every: Some(10),
        patience: None,
        ..TrainHyper::desk()
    };
    let (ck, _) = train_translation(&model, store, &data[..100], &data[100..], &hyper).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let model2 = back.model().unwrap();
    let srcs: Vec<_> = data[100..].iter().map(|p| p.src.clone()).collect();
    let a = decode::<f32>(&model, &ck.store, &srcs, 20, Feedback::Greedy, false);
    let b = decode::<f32>(&model2, &back.store, &srcs, 20, Feedback::Greedy, false);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.output, y.output);
        assert_eq!(x.truncated, y.truncated);
    }
}
