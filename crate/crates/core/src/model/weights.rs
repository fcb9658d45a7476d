use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::rng;

/// Q/K/V/O projections of one attention block. There are no bias terms:
/// a bias on the query or key projection shifts the query-key geometry the
/// filters rely on, so it is not representable here.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    /// `d_model × (n_heads · d_head)`
    pub w_q: Matrix,
    /// `d_model × (n_kv_heads · d_head)`
    pub w_k: Matrix,
    /// `d_model × (n_kv_heads · d_head)`
    pub w_v: Matrix,
    /// `(n_heads · d_head) × d_model`
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attention: AttentionWeights,
    /// `d_model × d_ff`
    pub w_ff_in: Matrix,
    /// `d_ff × d_model`
    pub w_ff_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `vocab_size × d_model`
    pub token_embedding: Matrix,
    /// `max_seq_len × d_model`, added to the token embedding.
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    /// `d_model × vocab_size`
    pub output: Matrix,
}

/// Name and shape of one tensor in the canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Tensors in serialization order: token embedding, position embedding, then
/// per layer `w_q, w_k, w_v, w_o, w_ff_in, w_ff_out`, then the output projection.
pub fn tensor_specs(config: &ModelConfig) -> Vec<TensorSpec> {
    let c = config;
    let spec = |name: String, rows, cols| TensorSpec { name, rows, cols };
    let mut out = Vec::with_capacity(3 + 6 * c.n_layers);
    out.push(spec("token_embedding".into(), c.vocab_size, c.d_model));
    out.push(spec("position_embedding".into(), c.max_seq_len, c.d_model));
    for l in 0..c.n_layers {
        out.push(spec(format!("layers.{l}.w_q"), c.d_model, c.n_heads * c.d_head));
        out.push(spec(format!("layers.{l}.w_k"), c.d_model, c.n_kv_heads * c.d_head));
        out.push(spec(format!("layers.{l}.w_v"), c.d_model, c.n_kv_heads * c.d_head));
        out.push(spec(format!("layers.{l}.w_o"), c.n_heads * c.d_head, c.d_model));
        out.push(spec(format!("layers.{l}.w_ff_in"), c.d_model, c.d_ff()));
        out.push(spec(format!("layers.{l}.w_ff_out"), c.d_ff(), c.d_model));
    }
    out.push(spec("output".into(), c.d_model, c.vocab_size));
    out
}

impl ModelWeights {
    /// Tensors in the order given by [`tensor_specs`].
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(3 + 6 * self.layers.len());
        out.push(&self.token_embedding);
        out.push(&self.position_embedding);
        for l in &self.layers {
            out.extend([
                &l.attention.w_q,
                &l.attention.w_k,
                &l.attention.w_v,
                &l.attention.w_o,
                &l.w_ff_in,
                &l.w_ff_out,
            ]);
        }
        out.push(&self.output);
        out
    }

    /// Inverse of [`ModelWeights::tensors`].
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Matrix>) -> Result<Self> {
        let specs = tensor_specs(config);
        if tensors.len() != specs.len() {
            return Err(invalid!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            ));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attention = AttentionWeights {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
            };
            layers.push(LayerWeights {
                attention,
                w_ff_in: next(),
                w_ff_out: next(),
            });
        }
        let output = next();
        let w = Self {
            token_embedding,
            position_embedding,
            layers,
            output,
        };
        w.validate(config)?;
        Ok(w)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        if self.layers.len() != config.n_layers {
            return Err(invalid!(
                "weights have {} layers, config says {}",
                self.layers.len(),
                config.n_layers
            ));
        }
        for (spec, t) in tensor_specs(config).iter().zip(self.tensors()) {
            if t.rows() != spec.rows || t.cols() != spec.cols {
                return Err(invalid!(
                    "tensor {} is {}x{}, expected {}x{}",
                    spec.name,
                    t.rows(),
                    t.cols(),
                    spec.rows,
                    spec.cols
                ));
            }
        }
        Ok(())
    }
}

/// Seeded Gaussian weights scaled by `1/√d_model`.
///
/// Every entry is rounded to the nearest `f32`, so a model survives a trip
/// through the on-disk format unchanged.
pub fn synth_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let scale = 1.0 / libm::sqrt(config.d_model as f64);
    let tensors = tensor_specs(config)
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut r = rng::stream(seed, &[0x3E16_4775, i as u64]);
            Matrix::from_fn(spec.rows, spec.cols, |_, _| {
                let z: f64 = StandardNormal.sample(&mut r);
                (z * scale) as f32 as f64
            })
        })
        .collect();
    ModelWeights::from_tensors(config, tensors)
}
