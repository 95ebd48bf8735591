//! Byte-level transformer encoder–decoder with block downsampling on both
//! sides and an optional two-step (LSTM) character head.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod generate;
pub mod leaks;
pub mod model;
pub mod train;

pub use bench::{benchmark_step_time, BenchRow};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{HeadKind, ModelConfig, ModelDims};
pub use generate::{decode, greedy_generate, Feedback, Generation};
pub use leaks::leaked_offsets;
pub use model::{build_model, Batch, Seq2Seq};
pub use train::{batch_gradients, corpus_loss, teacher_forced_accuracy, train_translation, OffsetAccuracy, TrainLog};
