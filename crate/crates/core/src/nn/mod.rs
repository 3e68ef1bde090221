//! Layers and the three model families built from them.

pub mod attention;
pub mod cnn;
pub mod layers;
pub mod mlp;
pub mod model;
pub mod vit;

pub use attention::MultiHeadSelfAttention;
pub use cnn::{multistream_fuse, CnnConfig, MultiStreamCnn};
pub use layers::{Conv2d, LayerNorm, Linear};
pub use mlp::{GatedMlp, MlpConfig};
pub use model::{
    Architecture, Body, GatePosition, GateSite, HeadKind, Model, ModelConfig, Network,
};
pub use vit::{patchify, token_count, MicroVit, VitBlock, VitConfig};
