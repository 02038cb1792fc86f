//! Small differentiable-function kernel: tensors, reverse-mode tape, MLP
//! policies, Adam/AdamW, schedules, EMA targets and checkpoints.

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use mlp::{Activation, HeadLayout, MlpParams, PolicyHeads, PolicyNet};
pub use optim::{AdamConfig, AdamState, EmaParams, Schedule, ScheduleKind};
pub use tape::{grad, Gradients, LinearMap, LinearTerm, Tape, Var};
pub use tensor::{logsumexp, masked_logsumexp, Tensor};
