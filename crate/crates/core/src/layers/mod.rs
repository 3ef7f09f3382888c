//! Transformer building blocks shared by every architecture variant.
//!
//! Parameters live in a [`ParamStore`]; layers hold [`ParamId`] handles into
//! it, which is how sharing is expressed. Every op has an explicit backward
//! that accumulates into a [`Grads`] buffer.

mod adaln;
mod attention;
mod mlp;
mod params;
mod rope;
mod sandwich;

pub use adaln::{adaln_modulate, AdaLnParams, Modulation, Site, Triple};
pub use attention::{attend, attend_backward, mha, AttendCache, AttendGrads, AttentionParams, KvCache, Mask, NormProjCache, Segment};
pub use mlp::{mlp, MlpCache, MlpParams, MLP_RATIO};
pub use params::{Component, Grads, Init, Layout, LinearParams, ParamId, ParamKind, ParamSpec, ParamStore};
pub use rope::{rope2d_apply, RopeTable, ROPE_BASE};
pub use sandwich::{
    post_norm_residual, post_norm_residual_backward, pre_norm, pre_norm_backward, sandwich_block, PostNorm, PreNorm,
};
