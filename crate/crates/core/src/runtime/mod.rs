//! Decoder-only transformer runtime: model definition, prefill/decode passes
//! over a KV cache, and autoregressive generation.

pub mod config;
pub mod forward;
pub mod generate;
pub mod model;
pub mod ops;
pub mod tokenizer;

pub use config::{ActivationKind, ModelConfig, NormKind, DEFAULT_ROPE_THETA, NORM_EPS};
pub use forward::{forward_decode, forward_prefill, forward_prefill_all, forward_tokens, new_cache};
pub use generate::{argmax, generate, generate_with_cache, sample, GenParams, Generation, Sampling};
pub use model::{FeedForward, LayerWeights, Linear, Model, ModelWeights, Norm, QuantizeOptions};
pub use ops::{attention, rope_apply, softmax_in_place};
