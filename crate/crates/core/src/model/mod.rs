//! Interactive masked image model.
//!
//! Visible tokens go through the encoder. Each masked position gets a query
//! built from the learned mask embedding and its positional row; in the
//! interactive modes a cross-attention module,
//! `softmax(Q_m K_uᵀ / √d_k) V_u`, lets those queries read the encoder
//! features. Both feature sets are scattered back to their grid positions and
//! a per-token linear head decodes pixels.

mod attention;
mod config;
mod encoder;
mod loss;
mod mim;
mod params;

pub use config::{LossScope, MimConfig, QueryMode};
pub use encoder::{sincos_pos_embed, Encoder};
pub use loss::{batch_reconstruction_loss, reconstruction_loss, PatchMask};
pub use mim::{CrossAttentionOutput, ForwardTrace, MimModel, ReconstructionOutput, TraceOptions};
pub use params::ParamSet;

/// Tensor names belonging to the encoder (kept by encoder export).
pub fn is_encoder_tensor(name: &str) -> bool {
    name.starts_with("patch_proj.") || name.starts_with("encoder.") || name == "pos_embed"
}

/// Every tensor name an encoder built from `config` stores.
pub fn encoder_tensor_names(config: &MimConfig) -> Vec<String> {
    let mut names: Vec<String> = encoder::encoder_specs(config).into_iter().map(|(n, _, _)| n).collect();
    names.push("pos_embed".into());
    names
}
