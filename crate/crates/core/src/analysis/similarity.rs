use alloc::string::String;
use alloc::vec::Vec;

use crate::calibration::QFilterSet;
use crate::error::{invalid, Result};
use crate::linalg::cosine_similarity;

/// Head-averaged `|cos|` between every pair of filter sets.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Mean over heads of `|cos(filter_a, filter_b)|`.
pub fn mean_abs_cosine(a: &QFilterSet, b: &QFilterSet) -> Result<f64> {
    if (a.n_layers, a.n_kv_heads, a.d_head) != (b.n_layers, b.n_kv_heads, b.d_head) {
        return Err(invalid!(
            "filter sets have different shapes: {}x{}x{} vs {}x{}x{}",
            a.n_layers,
            a.n_kv_heads,
            a.d_head,
            b.n_layers,
            b.n_kv_heads,
            b.d_head
        ));
    }
    let mut total = 0.0;
    for (x, y) in a.heads().iter().zip(b.heads()) {
        total += cosine_similarity(x.filter.as_slice(), y.filter.as_slice())?.abs();
    }
    Ok(total / a.heads().len() as f64)
}

pub fn filter_similarity(sets: &[&QFilterSet], labels: &[String]) -> Result<SimilarityMatrix> {
    if sets.is_empty() {
        return Err(invalid!("no filter sets to compare"));
    }
    if labels.len() != sets.len() {
        return Err(invalid!("{} labels for {} filter sets", labels.len(), sets.len()));
    }
    let n = sets.len();
    let mut values = alloc::vec![alloc::vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = mean_abs_cosine(sets[i], sets[j])?;
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    Ok(SimilarityMatrix {
        labels: labels.to_vec(),
        values,
    })
}
