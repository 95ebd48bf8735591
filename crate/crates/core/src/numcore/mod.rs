//! Minimal differentiable numeric substrate.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, RowMix, Var};
pub use nn::{ConvPadding, Segments};
pub use optim::{lr_schedule, optimizer_step, LrDecay, OptimizerKind, TrainHyper};
pub use params::{GradBuffer, Init, ParamId, ParamSource, ParamStore, ParamTable};
pub use tensor::{Real, Tensor};
