use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::linalg::{dot, gaussian_start, power_iterate_sym, Matrix};
use crate::rng;

/// Eigenvalues below this fraction of the largest are treated as null directions.
const NULL_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumOptions {
    pub tol: f64,
    /// Iteration cap per deflated component. Hitting it is not an error: the
    /// iterate is still orthogonal to the components found before it.
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 300,
            seed: 0,
        }
    }
}

/// `|mean_i ⟨Q_i, v_m⟩|` over the right singular basis `v_1, v_2, …` of one head.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpectrumRow {
    pub mean_projections: Vec<f64>,
    /// Eigenvalues of `QᵀQ` in extraction order.
    pub eigenvalues: Vec<f64>,
    /// Set when trailing directions fell in the null space (reported as 0).
    pub rank_deficient: bool,
}

impl SpectrumRow {
    /// Largest ratio of the first entry's competitors to the first entry.
    pub fn max_secondary_ratio(&self) -> f64 {
        let first = self.mean_projections.first().copied().unwrap_or(0.0);
        self.mean_projections
            .iter()
            .skip(1)
            .map(|&x| if first > 0.0 { x / first } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }
}

/// Full right basis by repeated deflation of the Gram matrix, then the
/// absolute mean query projection on each basis vector.
pub fn spectrum_report(q: &Matrix, options: &SpectrumOptions) -> Result<SpectrumRow> {
    let d = q.cols();
    if d == 0 || q.rows() < d {
        return Err(invalid!(
            "spectrum needs at least d_head = {d} rows, got {}",
            q.rows()
        ));
    }
    let g = q.gram();
    let mean = q.column_means();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut eigenvalues = Vec::with_capacity(d);
    let mut mean_projections = Vec::with_capacity(d);
    let mut rank_deficient = false;
    let mut top = 0.0;
    for m in 0..d {
        let deflate: Vec<&[f64]> = basis.iter().map(Vec::as_slice).collect();
        let start = gaussian_start(d, rng::derive_seed(options.seed, &[0x5BEC]), m as u64);
        let out = power_iterate_sym(&g, start, options.tol, options.max_iters, &deflate);
        if m == 0 {
            top = out.eigenvalue;
        }
        if top <= 0.0 || out.eigenvalue <= NULL_RATIO * top {
            rank_deficient = true;
            eigenvalues.extend(core::iter::repeat_n(0.0, d - m));
            mean_projections.extend(core::iter::repeat_n(0.0, d - m));
            break;
        }
        eigenvalues.push(out.eigenvalue);
        mean_projections.push(dot(&mean, &out.vector).abs());
        basis.push(out.vector);
    }
    Ok(SpectrumRow {
        mean_projections,
        eigenvalues,
        rank_deficient,
    })
}
