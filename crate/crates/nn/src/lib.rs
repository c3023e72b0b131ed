//! Small neural-network toolkit on top of candle.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path and are initialized
//! from a seeded ChaCha stream, so every model in the workspace is
//! bit-reproducible from `(config, seed)`. Layers are plain structs holding
//! tensors cloned out of the store; gradients flow back to the store's `Var`s.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod store;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use layers::{
    attention, dropout, gelu, layer_norm, softmax_last, Dropout, LayerNorm, Linear, Mlp, MultiHeadAttention,
};
pub use optim::{grad_norm, AdamConfig, Optimizer};
pub use store::{Init, ParamStore, Scope};
