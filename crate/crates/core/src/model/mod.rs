//! Causal decoder-only transformer: learned token and position embeddings,
//! pre-LN residual blocks of multi-head causal attention and an MLP, and a
//! LayerNorm-then-softmax unembedding.

mod config;
mod forward;
mod layers;
mod params;

pub use config::{Activation, ModelConfig};
pub(crate) use forward::check_ids;
pub use forward::{
    embed, embed_ids, forward, forward_embedded, last_token_repr, last_token_repr_at,
    next_token_distribution, one_step_input, one_step_map, Candidate, HiddenStates, TokenSeq,
};
pub(crate) use layers::layer_norm_stats;
pub use layers::{
    affine_rows, attention_scores, causal_attention_masked, causal_attention_projection,
    causal_attention_weights, causal_mask, layer_norm, layer_norm_rows, lower_triangular_ones, mlp,
    multi_head_attention, transformer_block, unembed, unembed_logits, MASK_VALUE,
};
pub use params::{BlockParams, HeadParams, LayerNormParams, MlpLayer, ModelParams, TensorSlot};
