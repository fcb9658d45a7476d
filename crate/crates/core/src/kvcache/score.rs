//! Per-entry importance scores. Higher means keep.
//!
//! Only [`score_oracle`] reads attention weights; every other scorer sees keys
//! and positions alone.

use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::linalg::{dot, norm, Matrix, UnitVector};
use crate::model::AttentionMap;
use crate::rng;

/// Score given to entries a positional policy always keeps.
pub const KEEP_SENTINEL: f64 = f64::MAX;
/// Score given to entries a positional policy may drop.
pub const DROP_SENTINEL: f64 = f64::MIN;

/// Projection of every key onto the filter direction.
pub fn score_qfilters(keys: &Matrix, filter: &UnitVector) -> Result<Vec<f64>> {
    if keys.cols() != filter.dim() {
        return Err(invalid!(
            "filter dim {} does not match key dim {}",
            filter.dim(),
            keys.cols()
        ));
    }
    Ok(keys.row_iter().map(|k| dot(k, filter.as_slice())).collect())
}

/// Negated key norm: the smallest keys are kept.
pub fn score_knorm(keys: &Matrix) -> Vec<f64> {
    keys.row_iter().map(|k| -norm(k)).collect()
}

/// Attention sink plus sliding window. The first `sink_count` positions and
/// those newer than `current_pos - window_size` get [`KEEP_SENTINEL`].
///
/// Everything else gets [`DROP_SENTINEL`]; the eviction tie-break then drops
/// the oldest of them first.
pub fn score_streaming(
    positions: &[usize],
    current_pos: usize,
    sink_count: usize,
    window_size: usize,
) -> Vec<f64> {
    positions
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let in_window = p + window_size > current_pos;
            if i < sink_count || in_window {
                KEEP_SENTINEL
            } else {
                DROP_SENTINEL
            }
        })
        .collect()
}

/// Uniform random scores keyed by (seed, layer, head, step).
pub fn score_random(n: usize, seed: u64, layer: usize, head: usize, step: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, &[0x8A9D, layer as u64, head as u64, step as u64]);
    (0..n).map(|_| r.random::<f64>()).collect()
}

/// Average attention received: `S_t = (1 / #rows i ≥ t) Σ_{i≥t} A[i][t]`, for
/// `t` in `t_range`.
pub fn score_oracle(map: &AttentionMap, t_range: Range<usize>) -> Result<Vec<f64>> {
    let l = map.len();
    if l == 0 {
        return Err(invalid!("oracle scores from an empty attention map"));
    }
    if t_range.end > l || t_range.start > t_range.end {
        return Err(invalid!(
            "position range {t_range:?} outside map of length {l}"
        ));
    }
    let m = map.matrix();
    Ok(t_range
        .map(|t| {
            let s: f64 = (t..l).map(|i| m.get(i, t)).sum();
            s / (l - t) as f64
        })
        .collect())
}
