//! GPT-2-style causal decoder with rotary position embeddings.
//!
//! Pre-norm residual blocks (`x += Attn(LN(x))`, `x += MLP(LN(x))`), a final
//! LayerNorm, and an unembedding matrix that is separate from the token
//! embedding. Gradients are hand-derived and exact for the final-token
//! cross-entropy loss used in training.

mod backward;
mod checkpoint;
mod forward;
mod params;
mod rope;

pub use backward::loss_and_grads;
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_FORMAT,
};
pub use forward::{forward, last_logits, softmax, ForwardTrace};
pub use params::{init_params, Block, LayerNorm, ModelConfig, ModelParams, TensorKind};
pub use rope::Rope;
