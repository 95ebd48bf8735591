use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gbstlab_bench::{bench_configs, fixed_length_corpus};
use gbstlab_core::numcore::{optimizer_step, TrainHyper};
use gbstlab_core::seq2seq::{batch_gradients, build_model, decode, Batch, Feedback};

const CHAR_LEN: usize = 128;
const BATCH: usize = 8;

fn train_step(c: &mut Criterion) {
    let corpus = fixed_length_corpus(BATCH, CHAR_LEN, 0);
    let hyper = TrainHyper {
        batch_size: BATCH,
        ..TrainHyper::desk()
    };
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for cfg in bench_configs(&[1, 2, 4]) {
        let (model, store) = build_model(&cfg, 0).unwrap();
        let batch = Batch::new(&model, &corpus);
        group.bench_with_input(BenchmarkId::from_parameter(cfg.label()), &batch, |b, batch| {
            let mut store = store.clone();
            let mut step = 0;
            b.iter(|| {
                step += 1;
                let (_, grads) = batch_gradients(&model, &store, batch, 0.1, Some(step)).unwrap();
                optimizer_step(&mut store, &grads, &hyper, step as usize).unwrap();
            });
        });
    }
    group.finish();
}

fn generation(c: &mut Criterion) {
    let corpus = fixed_length_corpus(1, CHAR_LEN, 1);
    let mut group = c.benchmark_group("greedy_generation");
    group.sample_size(10);
    for cfg in bench_configs(&[1, 2, 4]) {
        let (model, store) = build_model(&cfg, 0).unwrap();
        group.bench_function(BenchmarkId::from_parameter(cfg.label()), |b| {
            b.iter(|| {
                decode::<f32>(
                    &model,
                    &store,
                    &corpus[..1].iter().map(|p| p.src.clone()).collect::<Vec<_>>(),
                    CHAR_LEN + 1,
                    Feedback::Greedy,
                    false,
                )
            });
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, generation);
criterion_main!(benches);
