//! Architecture variants behind one forward interface.
//!
//! All variants share the same embedders and final head; they differ in how
//! the transformer blocks treat text:
//!
//! | variant | residual streams | block weights | AdaLN |
//! |---|---|---|---|
//! | `pixart` | image (text via cross-attention) | per layer | one set |
//! | `mmdit` | text, image | per layer and stream | per layer |
//! | `mmdit_shared_adaln` | text, image | per layer and stream | one set |
//! | `dit_air` | text, image | per layer, shared by streams | one set |
//! | `dit_air_lite_full` | text, image | one block for all layers | one set |
//! | `dit_air_lite_attention` | text, image | QKVO shared, MLP per layer | one set |
//!
//! Joint variants concatenate text then image tokens inside attention. Image
//! tokens carry 2D rotary positions; text tokens are unrotated.

mod config;
mod model;
mod patch;
mod sharing;

pub use config::{parse_key, ConfigFile, ModelConfig, SizePreset, Variant, MODEL_KEYS, TIME_FREQ_DIM};
pub use model::{build_layout, Block, CrossBlock, ForwardCache, Model, Plan, StreamBlock};
pub use patch::{patchify, timestep_embedding, unpatchify};
pub use sharing::{apply_sharing, untie, SharingMode};
