use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::kvcache::score_oracle;
use crate::model::{AttentionActivations, AttentionMap, HeadLayout};

/// Average attention received per position, per (layer, query head).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttentionStats {
    pub layout: HeadLayout,
    per_head: Vec<Vec<f64>>,
}

impl AttentionStats {
    pub fn get(&self, layer: usize, head: usize) -> &[f64] {
        &self.per_head[layer * self.layout.n_heads + head]
    }
}

/// `S_t` for every position of one map.
pub fn average_attention(map: &AttentionMap) -> Result<Vec<f64>> {
    score_oracle(map, 0..map.len())
}

pub fn compute_attention_stats(acts: &AttentionActivations) -> Result<AttentionStats> {
    let l = acts.layout;
    let mut per_head = Vec::with_capacity(l.n_layers * l.n_heads);
    for layer in 0..l.n_layers {
        for h in 0..l.n_heads {
            let map = acts
                .map(layer, h)
                .ok_or_else(|| invalid!("attention statistics need captured maps"))?;
            per_head.push(average_attention(map)?);
        }
    }
    Ok(AttentionStats {
        layout: l,
        per_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use alloc::vec;

    #[test]
    fn identity_and_sink_maps() {
        let id = AttentionMap::new(Matrix::identity(4)).unwrap();
        let s = average_attention(&id).unwrap();
        assert_eq!(s, vec![0.25, 1.0 / 3.0, 0.5, 1.0]);

        let sink = AttentionMap::new(Matrix::from_fn(4, 4, |_, j| if j == 0 { 1.0 } else { 0.0 })).unwrap();
        assert_eq!(average_attention(&sink).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_map_is_rejected() {
        let empty = AttentionMap::new(Matrix::zeros(0, 0)).unwrap();
        assert!(average_attention(&empty).is_err());
    }
}
