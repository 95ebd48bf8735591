use gbstlab_bench::{bench_configs, fixed_length_corpus};
use gbstlab_core::numcore::TrainHyper;
use gbstlab_core::seq2seq::benchmark_step_time;

#[test]
fn every_bench_config_runs_a_step() {
    let corpus = fixed_length_corpus(4, 16, 0);
    let hyper = TrainHyper {
        batch_size: 2,
        ..TrainHyper::desk()
    };
    let rows = benchmark_step_time(&bench_configs(&[1, 2, 4]), &corpus, &hyper, 1, 1, 17).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.ms_per_step > 0.0 && r.ms_per_generation > 0.0));
    assert!(rows[3].label.contains("two_step"));
}
