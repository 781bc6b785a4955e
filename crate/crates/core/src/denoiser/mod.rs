//! Miniature text-conditioned denoiser with cross-attention blocks and
//! pluggable concept adapters.

pub mod adapter;
pub mod checkpoint;
mod model;
pub mod oracle;
mod params;
pub mod vocab;

pub use adapter::{
    AdaptedMatrix, AdapterKind, AdapterPayload, ConceptAdapter, FullDelta, LowRankFactor,
    DEFAULT_ADAPTER_SCALE, LOW_RANK,
};
pub use model::{
    bind_weights, denoise_forward, encode_graph, encode_prompt, forward_graph, grad_wrt_latent,
    pad_prompt, AttentionStack, BoundWeights, Branch, ForwardNodes,
};
pub use oracle::{oracle_attention, oracle_attention_vjp};
pub use params::{DenoiserConfig, DenoiserParams, HeadParams, InputScaling, Prediction};
pub use vocab::{TokenClass, TokenId, Vocabulary, PAD};
