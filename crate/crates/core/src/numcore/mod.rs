//! Dense float64 tensors, tape-based reverse-mode differentiation, Adam and
//! a multi-step learning-rate schedule.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;


pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use graph::{backward, AttnSegment, Graph, PastKv, Var};
pub use optim::{adam_step, AdamState, LrSchedule};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
