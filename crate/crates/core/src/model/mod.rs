//! Toy pre-norm decoder with learned absolute positions, a forward hook for
//! taps, gates and physical token removal, and a per-layer KV cache.

pub mod checkpoint;
mod config;
mod forward;
mod kv;
mod params;

pub use config::ModelConfig;
pub use forward::{
    block, check_tokens, embed, forward, forward_with_hook, head, prefill, prefill_kept, prefill_pruned, prefill_with,
    BlockOut, Forward, ForwardOut, Prefill, Stream,
};
pub use kv::{decode_step, KVCache, LayerCache};
pub use params::{LayerParams, LayerVars, ModelParams, ModelVars};
