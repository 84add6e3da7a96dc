//! Dense tensors, reverse-mode differentiation, and the optimizer/EMA
//! machinery used by every training loop.

pub mod attention;
pub mod checkpoint;
pub mod ema;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use attention::{AttentionSpec, Segment};
pub use ema::EmaState;
pub use gradcheck::grad_check;
pub use optim::{adamw_step, clip_global_norm, AdamWConfig, OptimState};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use rng::RngStream;
pub use tape::{Activation, Gradients, OpKind, Precision, Tape, Var, ALL_OPS, LAYERNORM_EPS};
pub use tensor::Tensor;
