//! Minimal trainable-layer toolkit: parameter store, layers with hand-written
//! backward passes, optimizers, checkpoints, and finite-difference checks.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod store;

pub use attention::MultiHeadAttention;
pub use layers::{Conv2d, LayerNorm, Linear};
pub use optim::{Adam, Sgd};
pub use store::{GradBuf, ParamId, ParamStore};
