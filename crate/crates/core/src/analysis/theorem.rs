use crate::error::{invalid, Result};
use crate::linalg::{dot, pearson, Matrix, UnitVector};

/// How well `κ·⟨K_j, filter⟩` tracks the empirical mean logit `mean_i ⟨Q_i, K_j⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TheoremCheck {
    pub pearson: f64,
    pub max_abs_err: f64,
}

pub fn theorem_check(q: &Matrix, k: &Matrix, filter: &UnitVector, kappa: f64) -> Result<TheoremCheck> {
    if k.rows() < 2 {
        return Err(invalid!("theorem check needs at least two keys, got {}", k.rows()));
    }
    if q.rows() == 0 {
        return Err(invalid!("theorem check needs queries"));
    }
    if q.cols() != k.cols() || filter.dim() != k.cols() {
        return Err(invalid!(
            "dims differ: queries {}, keys {}, filter {}",
            q.cols(),
            k.cols(),
            filter.dim()
        ));
    }
    let n = q.rows() as f64;
    let empirical: alloc::vec::Vec<f64> = k
        .row_iter()
        .map(|kj| q.row_iter().map(|qi| dot(qi, kj)).sum::<f64>() / n)
        .collect();
    let predicted: alloc::vec::Vec<f64> = k
        .row_iter()
        .map(|kj| kappa * dot(kj, filter.as_slice()))
        .collect();
    let max_abs_err = empirical
        .iter()
        .zip(&predicted)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(TheoremCheck {
        pearson: pearson(&empirical, &predicted)?,
        max_abs_err,
    })
}
