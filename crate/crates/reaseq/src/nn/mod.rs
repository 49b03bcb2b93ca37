//! Minimal differentiable compute core: dense f32 tensors, a reverse-mode
//! tape, attention and linear layers, Adam with warmup+cosine scheduling,
//! and finite-difference gradient checking.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod store;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{attention_forward, linear, linear_forward, multi_head_attention, MhaOut, MhaVars};
pub use optim::{adam_step, lr_schedule, OptimConfig};
pub use store::{collect_grads, load_params, Grads, Param, ParamStore};
pub use tape::{softmax_in_place, stable_sigmoid, BackwardPass, Tape, Var};
pub use tensor::{axpy, cosine, dot, gelu_scalar, l2_normalize, Tensor};
