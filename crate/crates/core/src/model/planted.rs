//! Synthetic query/key sources with a known drift direction.
//!
//! Queries are `κ·u + noise`, keys are `offset·u + noise`. With these the
//! mean attention logit of a key is exactly `κ·⟨K, u⟩` up to noise, which is
//! the ground truth every geometric check in this crate is measured against.

use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::activations::{ActivationSource, AttentionActivations, LayerActivations};
use super::config::HeadLayout;
use super::forward::causal_attention;
use crate::error::{invalid, Result};
use crate::linalg::{norm, Matrix, UnitVector};
use crate::rng;

/// Draws `n_queries` queries `κ·u + noise·g_i` and one key
/// `key_offsets[j]·u + noise·h_j` per offset, with `g`, `h` isotropic Gaussian.
#[allow(clippy::too_many_arguments)]
pub fn planted_qk_sample(
    d_head: usize,
    n_queries: usize,
    n_keys: usize,
    u: &[f64],
    kappa: f64,
    key_offsets: &[f64],
    noise: f64,
    seed: u64,
) -> Result<(Matrix, Matrix)> {
    if u.len() != d_head {
        return Err(invalid!("direction has dim {}, expected {d_head}", u.len()));
    }
    if (norm(u) - 1.0).abs() > 1e-9 {
        return Err(invalid!("planted direction is not a unit vector"));
    }
    if !(kappa > 0.0) {
        return Err(invalid!("kappa must be positive, got {kappa}"));
    }
    if key_offsets.len() != n_keys {
        return Err(invalid!(
            "{} key offsets given for {n_keys} keys",
            key_offsets.len()
        ));
    }
    if !(noise >= 0.0) {
        return Err(invalid!("noise must be non-negative, got {noise}"));
    }
    let mut rq = rng::stream(seed, &[0x0051]);
    let mut rk = rng::stream(seed, &[0x004B]);
    let q = drifted(&mut rq, n_queries, u, |_| kappa, noise);
    let k = drifted(&mut rk, n_keys, u, |j| key_offsets[j], noise);
    Ok((q, k))
}

fn drifted<R: Rng>(r: &mut R, n: usize, u: &[f64], shift: impl Fn(usize) -> f64, noise: f64) -> Matrix {
    let d = u.len();
    let mut m = Matrix::zeros(n, d);
    for i in 0..n {
        let s = shift(i);
        for (x, &uc) in m.row_mut(i).iter_mut().zip(u) {
            let z: f64 = if noise > 0.0 { StandardNormal.sample(r) } else { 0.0 };
            *x = s * uc + noise * z;
        }
    }
    m
}

/// How per-token key offsets along the drift direction are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OffsetProfile {
    /// Uniform in `[-scale, scale]`.
    MixedSign { scale: f64 },
    /// Uniform in `[-scale, 0)`: keys point against the query drift.
    Negative { scale: f64 },
}

/// Tokens whose keys carry a fixed, large positive offset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NeedleTokens {
    pub tokens: Range<u32>,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlantedConfig {
    pub layout: HeadLayout,
    pub vocab_size: usize,
    pub kappa: f64,
    /// Standard deviation of the isotropic noise on queries and keys.
    pub noise: f64,
    pub offsets: OffsetProfile,
    pub needle: Option<NeedleTokens>,
    /// Offset of the key at sequence position 0, overriding its token's.
    /// A large value turns the first position into an attention sink.
    pub sink_offset: Option<f64>,
    pub seed: u64,
}

impl PlantedConfig {
    /// Mixed-sign source with no needle tokens.
    pub fn mixed(layout: HeadLayout, kappa: f64, noise: f64, seed: u64) -> Self {
        Self {
            layout,
            vocab_size: 1024,
            kappa,
            noise,
            offsets: OffsetProfile::MixedSign { scale: 1.0 },
            needle: None,
            sink_offset: None,
            seed,
        }
    }
}

/// A planted-anisotropy activation source.
///
/// Each KV head owns a drift direction `u`. All query heads of its group drift
/// along the same `u` with strength `κ`. A key's offset along `u` is a fixed
/// function of its token id; needle tokens get a large positive offset.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedModel {
    config: PlantedConfig,
    directions: Vec<UnitVector>,
    token_offsets: Vec<Vec<f64>>,
}

impl PlantedModel {
    pub fn new(config: PlantedConfig) -> Result<Self> {
        config.layout.validate()?;
        if config.vocab_size == 0 || u32::try_from(config.vocab_size).is_err() {
            return Err(invalid!("invalid planted vocab size {}", config.vocab_size));
        }
        if !(config.kappa > 0.0) || !(config.noise >= 0.0) {
            return Err(invalid!("planted kappa must be positive and noise non-negative"));
        }
        if config.sink_offset.is_some_and(|o| !o.is_finite()) {
            return Err(invalid!("sink offset must be finite"));
        }
        if let Some(n) = &config.needle {
            if n.tokens.is_empty() || n.tokens.end as usize > config.vocab_size {
                return Err(invalid!("needle token range {:?} outside vocabulary", n.tokens));
            }
        }
        let l = config.layout;
        let n = l.n_layers * l.n_kv_heads;
        let mut directions = Vec::with_capacity(n);
        let mut token_offsets = Vec::with_capacity(n);
        for i in 0..n as u64 {
            directions.push(UnitVector::random(l.d_head, rng::derive_seed(config.seed, &[0xD1, i])));
            let mut r = rng::stream(config.seed, &[0x0FF, i]);
            let offs = (0..config.vocab_size as u32)
                .map(|t| match &config.needle {
                    Some(nd) if nd.tokens.contains(&t) => nd.offset,
                    _ => match config.offsets {
                        OffsetProfile::MixedSign { scale } => r.random_range(-scale..=scale),
                        OffsetProfile::Negative { scale } => -r.random_range(f64::MIN_POSITIVE..=scale),
                    },
                })
                .collect();
            token_offsets.push(offs);
        }
        Ok(Self {
            config,
            directions,
            token_offsets,
        })
    }

    pub fn config(&self) -> &PlantedConfig {
        &self.config
    }

    /// Planted drift direction of a KV head (shared by its query group).
    pub fn direction(&self, layer: usize, kv_head: usize) -> &UnitVector {
        &self.directions[layer * self.config.layout.n_kv_heads + kv_head]
    }

    /// Offset along the drift direction carried by `token`'s key.
    pub fn key_offset(&self, layer: usize, kv_head: usize, token: u32) -> f64 {
        self.token_offsets[layer * self.config.layout.n_kv_heads + kv_head][token as usize]
    }

    pub fn is_needle(&self, token: u32) -> bool {
        self.config
            .needle
            .as_ref()
            .is_some_and(|n| n.tokens.contains(&token))
    }
}

impl ActivationSource for PlantedModel {
    fn layout(&self) -> HeadLayout {
        self.config.layout
    }

    fn activations(&self, tokens: &[u32], capture: bool) -> Result<AttentionActivations> {
        if tokens.is_empty() {
            return Err(invalid!("activations of an empty sequence"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(invalid!("token {t} outside planted vocabulary"));
        }
        let l = self.config.layout;
        let seq_key = rng::derive_seed(
            self.config.seed,
            &tokens.iter().map(|&t| t as u64).collect::<Vec<_>>(),
        );
        let mut layers = Vec::with_capacity(l.n_layers);
        for layer in 0..l.n_layers {
            let mut keys = Vec::with_capacity(l.n_kv_heads);
            let mut values = Vec::with_capacity(l.n_kv_heads);
            let mut queries = Vec::with_capacity(l.n_heads);
            for g in 0..l.n_kv_heads {
                let u = self.direction(layer, g).as_slice();
                let tag = (layer * l.n_kv_heads + g) as u64;
                let mut rk = rng::stream(seq_key, &[0x4B, tag]);
                keys.push(drifted(
                    &mut rk,
                    tokens.len(),
                    u,
                    |j| match self.config.sink_offset {
                        Some(o) if j == 0 => o,
                        _ => self.key_offset(layer, g, tokens[j]),
                    },
                    self.config.noise,
                ));
                let mut rv = rng::stream(seq_key, &[0x56, tag]);
                values.push(Matrix::from_fn(tokens.len(), l.d_head, |_, _| {
                    StandardNormal.sample(&mut rv)
                }));
            }
            for h in 0..l.n_heads {
                let u = self.direction(layer, l.kv_head_of(h)).as_slice();
                let mut rq = rng::stream(seq_key, &[0x51, (layer * l.n_heads + h) as u64]);
                queries.push(drifted(&mut rq, tokens.len(), u, |_| self.config.kappa, self.config.noise));
            }
            let maps = if capture {
                let mut ms = Vec::with_capacity(l.n_heads);
                for (h, q) in queries.iter().enumerate() {
                    let g = l.kv_head_of(h);
                    let (_, map) = causal_attention(q, &keys[g], &values[g], true)?;
                    ms.push(map.expect("capture requested"));
                }
                Some(ms)
            } else {
                None
            };
            layers.push(LayerActivations {
                queries,
                keys,
                values,
                maps,
            });
        }
        Ok(AttentionActivations { layout: l, layers })
    }
}
