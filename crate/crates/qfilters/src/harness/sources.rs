//! Default model and planted-source configurations used by the benchmarks.

use qfilters_core::calibration::{calibrate, synth_corpus, CalibrationConfig, QFilterSet};
use qfilters_core::kvcache::{Policy, PolicyKind};
use qfilters_core::model::{
    synth_model, HeadLayout, Model, ModelConfig, NeedleTokens, OffsetProfile, PlantedConfig,
    PlantedModel,
};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::format::LoadedModel;

/// Small reference transformer used when no model file is given.
pub fn default_model_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 4,
        n_kv_heads: 2,
        d_model: 64,
        d_head: 16,
        vocab_size: 256,
        max_seq_len: 2048,
    }
}

pub fn synthetic_model(config: &ModelConfig, seed: u64) -> Result<LoadedModel> {
    let weights = synth_model(config, seed)?;
    LoadedModel::from_model(Model::new(*config, weights)?)
}

/// 4 layers, 8 query heads over 4 KV heads, `d_head` 64: 16 filters.
pub fn planted_layout() -> HeadLayout {
    HeadLayout {
        n_layers: 4,
        n_heads: 8,
        n_kv_heads: 4,
        d_head: 64,
    }
}

/// Keys point against the query drift, as in heads whose mean key
/// projection is negative.
pub fn anisotropic_source(seed: u64) -> PlantedConfig {
    PlantedConfig {
        offsets: OffsetProfile::Negative { scale: 1.0 },
        ..PlantedConfig::mixed(planted_layout(), 2.0, 0.2, seed)
    }
}

/// Mixed-sign key offsets: key norm carries no information about attention.
pub fn mixed_sign_source(seed: u64) -> PlantedConfig {
    PlantedConfig::mixed(planted_layout(), 2.0, 0.2, seed)
}

pub const NEEDLE_VOCAB: usize = 1024;
pub const NEEDLE_TOKENS: core::ops::Range<u32> = 1016..1024;

/// Needle model: strongly separated key offsets, an attention sink at
/// position 0 so row normalizers stay comparable across positions, and
/// needle tokens whose keys carry a large positive offset.
pub fn needle_source(seed: u64) -> PlantedConfig {
    PlantedConfig {
        layout: HeadLayout {
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 64,
        },
        vocab_size: NEEDLE_VOCAB,
        kappa: 2.0,
        noise: 0.1,
        offsets: OffsetProfile::MixedSign { scale: 8.0 },
        needle: Some(NeedleTokens {
            tokens: NEEDLE_TOKENS,
            offset: 24.0,
        }),
        sink_offset: Some(40.0),
        seed,
    }
}

/// Stand-in for a model file hash when the source is planted.
pub fn planted_fingerprint(config: &PlantedConfig) -> Result<[u8; 32]> {
    Ok(Sha256::digest(serde_json::to_vec(config)?).into())
}

/// Calibrates a planted source on a synthetic corpus drawn with `corpus_seed`.
pub fn calibrate_planted(
    source: &PlantedModel,
    n_documents: usize,
    doc_length: usize,
    samples: usize,
    corpus_seed: u64,
) -> Result<QFilterSet> {
    let corpus = synth_corpus(source.config().vocab_size, n_documents, doc_length, corpus_seed)?;
    let config = CalibrationConfig {
        n_documents,
        doc_length,
        samples_per_head: samples,
        seed: corpus_seed,
    };
    Ok(calibrate(source, &corpus, &config, planted_fingerprint(source.config())?)?)
}

/// Builds a policy from its kind. QFilters needs `filters`; the streaming
/// window is whatever the budget leaves after the sinks.
pub fn make_policy<'a>(
    kind: PolicyKind,
    filters: Option<&'a QFilterSet>,
    budget: Option<usize>,
    sink_count: usize,
    seed: u64,
) -> Result<Policy<'a>> {
    Ok(match kind {
        PolicyKind::QFilters => Policy::QFilters(filters.ok_or_else(|| {
            qfilters_core::Error::InvalidArgument("qfilters policy needs a filter set".into())
        })?),
        PolicyKind::KNorm => Policy::KNorm,
        PolicyKind::StreamingLlm => {
            let window_size = match budget {
                Some(b) if b <= sink_count => {
                    return Err(qfilters_core::Error::InvalidArgument(format!(
                        "streaming policy needs budget > sink_count ({b} <= {sink_count})"
                    ))
                    .into())
                }
                Some(b) => b - sink_count,
                None => usize::MAX / 2,
            };
            Policy::Streaming {
                sink_count,
                window_size,
            }
        }
        PolicyKind::Random => Policy::Random { seed },
        PolicyKind::Oracle => Policy::Oracle,
    })
}
