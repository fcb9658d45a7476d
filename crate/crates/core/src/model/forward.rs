//! Pre-norm decoder blocks: RMS norm (no gain), causal multi-head attention
//! with optional key/value head sharing, and a GELU feed-forward.

use alloc::vec;
use alloc::vec::Vec;

use super::activations::{ActivationSource, AttentionActivations, AttentionMap, LayerActivations};
use super::config::{HeadLayout, ModelConfig};
use super::weights::{AttentionWeights, LayerWeights, ModelWeights};
use crate::error::{invalid, Result};
use crate::kvcache::KvCache;
use crate::linalg::{dot, softmax_in_place, Matrix};

const NORM_EPS: f64 = 1e-6;

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / libm::sqrt(ms + NORM_EPS);
    x.iter().map(|v| v * s).collect()
}

fn rms_norm_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = rms_norm(m.row(i));
        out.row_mut(i).copy_from_slice(&n);
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + libm::tanh(C * (x + 0.044_715 * x * x * x)))
}

/// Causal scaled dot-product attention for one head.
///
/// Returns the `L × d_v` output and, when `capture` is set, the attention map.
pub fn causal_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    capture: bool,
) -> Result<(Matrix, Option<AttentionMap>)> {
    let l = q.rows();
    if k.rows() != l || v.rows() != l {
        return Err(invalid!(
            "Q/K/V row counts differ: {} / {} / {}",
            l,
            k.rows(),
            v.rows()
        ));
    }
    if q.cols() != k.cols() {
        return Err(invalid!("query dim {} != key dim {}", q.cols(), k.cols()));
    }
    let scale = 1.0 / libm::sqrt(q.cols() as f64);
    let mut out = Matrix::zeros(l, v.cols());
    let mut map = capture.then(|| Matrix::zeros(l, l));
    let mut w = Vec::with_capacity(l);
    for i in 0..l {
        w.clear();
        w.extend((0..=i).map(|j| dot(q.row(i), k.row(j)) * scale));
        softmax_in_place(&mut w);
        let o = out.row_mut(i);
        for (j, &a) in w.iter().enumerate() {
            for (oc, &vc) in o.iter_mut().zip(v.row(j)) {
                *oc += a * vc;
            }
        }
        if let Some(m) = map.as_mut() {
            m.row_mut(i)[..=i].copy_from_slice(&w);
        }
    }
    Ok((out, map.map(AttentionMap::from_matrix_unchecked)))
}

/// Multi-head causal self-attention over `x` (`L × d_model`), including the
/// output projection.
pub fn mha_forward(
    x: &Matrix,
    weights: &AttentionWeights,
    config: &ModelConfig,
    capture: bool,
) -> Result<(Matrix, LayerActivations)> {
    config.validate()?;
    if x.cols() != config.d_model {
        return Err(invalid!(
            "input has {} columns, d_model is {}",
            x.cols(),
            config.d_model
        ));
    }
    if x.rows() > config.max_seq_len {
        return Err(invalid!(
            "sequence length {} exceeds max_seq_len {}",
            x.rows(),
            config.max_seq_len
        ));
    }
    let dh = config.d_head;
    let q_all = x.matmul(&weights.w_q)?;
    let k_all = x.matmul(&weights.w_k)?;
    let v_all = x.matmul(&weights.w_v)?;
    if q_all.cols() != config.n_heads * dh || k_all.cols() != config.n_kv_heads * dh {
        return Err(invalid!("projection widths do not match the head layout"));
    }
    let queries: Vec<Matrix> = (0..config.n_heads)
        .map(|h| q_all.column_block(h * dh, dh))
        .collect();
    let keys: Vec<Matrix> = (0..config.n_kv_heads)
        .map(|g| k_all.column_block(g * dh, dh))
        .collect();
    let values: Vec<Matrix> = (0..config.n_kv_heads)
        .map(|g| v_all.column_block(g * dh, dh))
        .collect();

    let layout = config.layout();
    let mut concat = Matrix::zeros(x.rows(), config.n_heads * dh);
    let mut maps = capture.then(Vec::new);
    for (h, q) in queries.iter().enumerate() {
        let g = layout.kv_head_of(h);
        let (o, map) = causal_attention(q, &keys[g], &values[g], capture)?;
        for i in 0..x.rows() {
            concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(o.row(i));
        }
        if let (Some(ms), Some(m)) = (maps.as_mut(), map) {
            ms.push(m);
        }
    }
    let output = concat.matmul(&weights.w_o)?;
    Ok((
        output,
        LayerActivations {
            queries,
            keys,
            values,
            maps,
        },
    ))
}

fn feed_forward(layer: &LayerWeights, x: &[f64]) -> Result<Vec<f64>> {
    let mut hidden = layer.w_ff_in.vecmat(x)?;
    hidden.iter_mut().for_each(|v| *v = gelu(*v));
    layer.w_ff_out.vecmat(&hidden)
}

/// Per-layer, per-query-head attention weights of one decode step, aligned
/// with the cache entries present during that step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAttention {
    pub layout: HeadLayout,
    weights: Vec<Vec<f64>>,
}

impl StepAttention {
    pub fn get(&self, layer: usize, head: usize) -> &[f64] {
        &self.weights[layer * self.layout.n_heads + head]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub logits: Vec<f64>,
    pub attention: Option<StepAttention>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `L × vocab_size`
    pub logits: Matrix,
    pub activations: AttentionActivations,
}

/// A validated configuration plus weights. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    fn embed(&self, token: u32, position: usize) -> Result<Vec<f64>> {
        let t = token as usize;
        if t >= self.config.vocab_size {
            return Err(invalid!(
                "token {token} outside vocabulary of {}",
                self.config.vocab_size
            ));
        }
        if position >= self.config.max_seq_len {
            return Err(invalid!(
                "position {position} exceeds max_seq_len {}",
                self.config.max_seq_len
            ));
        }
        Ok(self
            .weights
            .token_embedding
            .row(t)
            .iter()
            .zip(self.weights.position_embedding.row(position))
            .map(|(a, b)| a + b)
            .collect())
    }

    /// Full-sequence forward pass.
    pub fn forward(&self, tokens: &[u32], capture: bool) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(invalid!("forward pass over an empty sequence"));
        }
        let mut rows = Vec::with_capacity(tokens.len());
        for (pos, &t) in tokens.iter().enumerate() {
            rows.push(self.embed(t, pos)?);
        }
        let mut h = Matrix::from_rows(&rows)?;
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for layer in &self.weights.layers {
            let a = rms_norm_rows(&h);
            let (o, acts) = mha_forward(&a, &layer.attention, &self.config, capture)?;
            layers.push(acts);
            for i in 0..h.rows() {
                let hr = h.row_mut(i);
                hr.iter_mut().zip(o.row(i)).for_each(|(x, y)| *x += y);
                let f = feed_forward(layer, &rms_norm(hr))?;
                hr.iter_mut().zip(&f).for_each(|(x, y)| *x += y);
            }
        }
        let logits = rms_norm_rows(&h).matmul(&self.weights.output)?;
        Ok(ForwardOutput {
            logits,
            activations: AttentionActivations {
                layout: self.config.layout(),
                layers,
            },
        })
    }

    /// One incremental step: embeds `token` at the cache's next position,
    /// appends its key/value to every (layer, KV head) and attends over the
    /// cache. No eviction happens here.
    pub fn decode_step(&self, token: u32, cache: &mut KvCache, capture: bool) -> Result<DecodeOutput> {
        let layout = self.config.layout();
        if cache.layout() != layout {
            return Err(invalid!(
                "cache layout {:?} does not match model layout {:?}",
                cache.layout(),
                layout
            ));
        }
        let position = cache.next_position();
        let mut h = self.embed(token, position)?;
        let dh = self.config.d_head;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut captured = capture.then(|| Vec::with_capacity(layout.n_layers * layout.n_heads));

        for (l, layer) in self.weights.layers.iter().enumerate() {
            let a = rms_norm(&h);
            let attn = &layer.attention;
            let q = attn.w_q.vecmat(&a)?;
            let k = attn.w_k.vecmat(&a)?;
            let v = attn.w_v.vecmat(&a)?;
            for g in 0..layout.n_kv_heads {
                cache.push(l, g, position, &k[g * dh..(g + 1) * dh], &v[g * dh..(g + 1) * dh])?;
            }
            let mut concat = vec![0.0; layout.n_heads * dh];
            for hq in 0..layout.n_heads {
                let head = cache.head(l, layout.kv_head_of(hq));
                let qh = &q[hq * dh..(hq + 1) * dh];
                let mut w: Vec<f64> = head.keys().row_iter().map(|kr| dot(qh, kr) * scale).collect();
                softmax_in_place(&mut w);
                let o = &mut concat[hq * dh..(hq + 1) * dh];
                for (j, &wj) in w.iter().enumerate() {
                    o.iter_mut()
                        .zip(head.values().row(j))
                        .for_each(|(x, y)| *x += wj * y);
                }
                if let Some(c) = captured.as_mut() {
                    c.push(w);
                }
            }
            let o = attn.w_o.vecmat(&concat)?;
            h.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
            let f = feed_forward(layer, &rms_norm(&h))?;
            h.iter_mut().zip(&f).for_each(|(x, y)| *x += y);
        }
        cache.advance();
        let logits = self.weights.output.vecmat(&rms_norm(&h))?;
        Ok(DecodeOutput {
            logits,
            attention: captured.map(|weights| StepAttention { layout, weights }),
        })
    }
}

/// Free-function form of [`Model::decode_step`].
pub fn decode_step(token: u32, cache: &mut KvCache, model: &Model, capture: bool) -> Result<DecodeOutput> {
    model.decode_step(token, cache, capture)
}

impl ActivationSource for Model {
    fn layout(&self) -> HeadLayout {
        self.config.layout()
    }

    fn activations(&self, tokens: &[u32], capture: bool) -> Result<AttentionActivations> {
        self.forward(tokens, capture).map(|f| f.activations)
    }
}
