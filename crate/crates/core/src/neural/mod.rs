//! Positional encoding, dense MLPs with hand-written reverse mode, and Adam.

mod adam;
mod encoding;
mod mlp;
mod networks;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use encoding::{pe_backward, pe_encode, pe_encode_into, EncodingSpec};
pub use mlp::{Activation, Gradients, LayerSpec, Mlp, MlpArch, MlpCache, CHUNK_ROWS};
pub use networks::{
    appearance_arch, appearance_forward, refine_arch, AppearanceCache, AppearanceNet, RefineNet,
    APPEARANCE_DEPTH, APPEARANCE_SKIP, APPEARANCE_WIDTH, REFINE_LAYERS, REFINE_WIDTH,
};
