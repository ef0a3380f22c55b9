//! Dense tensors, reverse-mode differentiation, MLPs and Adam.

pub mod mlp;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use mlp::{mlp_forward, ConditionalNet, Mlp, NetConfig, TimeEmbedding};
pub use optim::{adam_step, clip_grad_norm, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{gaussian_logprob_row, Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
