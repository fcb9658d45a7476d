//! Desk-scale decoder-only transformer and planted-geometry activation sources.

mod activations;
mod config;
mod forward;
mod planted;
mod weights;

pub use activations::{
    ActivationSource, AttentionActivations, AttentionMap, LayerActivations,
};
pub use config::{HeadLayout, ModelConfig};
pub use forward::{
    causal_attention, decode_step, mha_forward, DecodeOutput, ForwardOutput, Model, StepAttention,
};
pub use planted::{planted_qk_sample, NeedleTokens, OffsetProfile, PlantedConfig, PlantedModel};
pub use weights::{
    synth_model, tensor_specs, AttentionWeights, LayerWeights, ModelWeights, TensorSpec,
};
