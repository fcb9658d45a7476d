use alloc::vec::Vec;

use super::config::HeadLayout;
use crate::error::{invalid, Result};
use crate::linalg::Matrix;

const ROW_SUM_TOL: f64 = 1e-9;

/// Post-softmax causal attention weights of one head, `L × L`, lower triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(Matrix);

impl AttentionMap {
    /// Validates squareness, causality and row normalization.
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(invalid!("attention map must be square, got {}x{}", m.rows(), m.cols()));
        }
        for i in 0..m.rows() {
            let row = m.row(i);
            if row[i + 1..].iter().any(|&x| x != 0.0) {
                return Err(invalid!("attention map row {i} attends to future positions"));
            }
            if row.iter().any(|&x| x < 0.0) {
                return Err(invalid!("attention map row {i} has negative weights"));
            }
            let s: f64 = row[..=i].iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(invalid!("attention map row {i} sums to {s}"));
            }
        }
        Ok(Self(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Sequence length `L`.
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

/// Activations of one attention layer. Keys and values are stored per KV head;
/// queries and maps per query head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub queries: Vec<Matrix>,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    pub maps: Option<Vec<AttentionMap>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionActivations {
    pub layout: HeadLayout,
    pub layers: Vec<LayerActivations>,
}

impl AttentionActivations {
    pub fn queries(&self, layer: usize, head: usize) -> &Matrix {
        &self.layers[layer].queries[head]
    }

    pub fn keys(&self, layer: usize, kv_head: usize) -> &Matrix {
        &self.layers[layer].keys[kv_head]
    }

    pub fn values(&self, layer: usize, kv_head: usize) -> &Matrix {
        &self.layers[layer].values[kv_head]
    }

    pub fn map(&self, layer: usize, head: usize) -> Option<&AttentionMap> {
        self.layers[layer].maps.as_ref().map(|m| &m[head])
    }

    pub fn has_maps(&self) -> bool {
        self.layers.iter().all(|l| l.maps.is_some())
    }

    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.first().map_or(0, Matrix::rows))
    }
}

/// Anything that can turn a token sequence into per-head Q/K/V activations:
/// the transformer itself, or a synthetic source with planted geometry.
pub trait ActivationSource {
    fn layout(&self) -> HeadLayout;

    /// Runs `tokens` through the source. Attention maps are materialized only
    /// when `capture` is set.
    fn activations(&self, tokens: &[u32], capture: bool) -> Result<AttentionActivations>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_validation() {
        let ok = Matrix::from_rows(&[[1.0, 0.0], [0.5, 0.5]]).unwrap();
        assert!(AttentionMap::new(ok).is_ok());
        let future = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert!(AttentionMap::new(future).is_err());
        let unnormalized = Matrix::from_rows(&[[1.0, 0.0], [0.5, 0.4]]).unwrap();
        assert!(AttentionMap::new(unnormalized).is_err());
        assert!(AttentionMap::new(Matrix::zeros(2, 3)).is_err());
    }
}
