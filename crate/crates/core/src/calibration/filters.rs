use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, dot, Matrix, UnitVector};
use crate::model::HeadLayout;
use crate::rng;

use super::gather::HeadSamples;

/// Tolerance on the norm of a stored filter (loose enough for `f32` storage).
pub const FILTER_NORM_TOL: f64 = 1e-6;

/// Filter of one KV head.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadFilter {
    /// Sign-fixed dominant right singular direction of the head's queries.
    pub filter: UnitVector,
    /// Mean projection of the head's queries onto `filter`.
    pub kappa: f64,
    /// Sign of the mean key projection onto `filter`; 0 when keys were not sampled.
    pub epsilon: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum WarningKind {
    /// Second/first eigenvalue ratio above the degeneracy threshold.
    DegenerateSpectrum,
    /// Power iteration hit its cap; the last iterate was used.
    NotConverged,
    /// Query mean is orthogonal to the filter, so kappa is not positive.
    NonPositiveKappa,
    /// Sign-fixed filters of a query group cancelled; the first was used.
    GroupCancelled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CalibrationWarning {
    pub layer: usize,
    /// Query head for per-head warnings, KV head for group warnings.
    pub head: usize,
    pub kind: WarningKind,
}

/// Per-(layer, KV head) filters for one model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QFilterSet {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub calibration_seed: u64,
    /// Hash of the model the filters were computed for.
    pub model_fingerprint: [u8; 32],
    heads: Vec<HeadFilter>,
    /// Diagnostics from calibration. Not persisted.
    pub warnings: Vec<CalibrationWarning>,
}

impl QFilterSet {
    pub fn new(
        n_layers: usize,
        n_kv_heads: usize,
        d_head: usize,
        calibration_seed: u64,
        model_fingerprint: [u8; 32],
        heads: Vec<HeadFilter>,
    ) -> Result<Self> {
        if heads.len() != n_layers * n_kv_heads {
            return Err(invalid!(
                "{} head filters for {n_layers} layers x {n_kv_heads} KV heads",
                heads.len()
            ));
        }
        for (i, h) in heads.iter().enumerate() {
            if h.filter.dim() != d_head {
                return Err(invalid!("filter {i} has dim {}, expected {d_head}", h.filter.dim()));
            }
            if (linalg::norm(h.filter.as_slice()) - 1.0).abs() > FILTER_NORM_TOL {
                return Err(invalid!("filter {i} is not unit norm"));
            }
            if !h.kappa.is_finite() || !(-1..=1).contains(&h.epsilon) {
                return Err(invalid!("filter {i} has invalid kappa/epsilon"));
            }
        }
        Ok(Self {
            n_layers,
            n_kv_heads,
            d_head,
            calibration_seed,
            model_fingerprint,
            heads,
            warnings: Vec::new(),
        })
    }

    pub fn heads(&self) -> &[HeadFilter] {
        &self.heads
    }

    pub fn head(&self, layer: usize, kv_head: usize) -> Result<&HeadFilter> {
        if layer >= self.n_layers || kv_head >= self.n_kv_heads {
            return Err(Error::FilterModelMismatch(format!(
                "no filter for layer {layer}, KV head {kv_head} (set has {}x{})",
                self.n_layers, self.n_kv_heads
            )));
        }
        Ok(&self.heads[layer * self.n_kv_heads + kv_head])
    }

    pub fn filter(&self, layer: usize, kv_head: usize) -> Result<&UnitVector> {
        self.head(layer, kv_head).map(|h| &h.filter)
    }

    /// Checks the set against a model's head layout and, when given, its fingerprint.
    pub fn check_compatible(&self, layout: &HeadLayout, fingerprint: Option<&[u8; 32]>) -> Result<()> {
        if self.n_layers != layout.n_layers
            || self.n_kv_heads != layout.n_kv_heads
            || self.d_head != layout.d_head
        {
            return Err(Error::FilterModelMismatch(format!(
                "filters are {}x{}x{} (layers x KV heads x d_head), model is {}x{}x{}",
                self.n_layers,
                self.n_kv_heads,
                self.d_head,
                layout.n_layers,
                layout.n_kv_heads,
                layout.d_head
            )));
        }
        if let Some(fp) = fingerprint {
            if fp != &self.model_fingerprint {
                return Err(Error::FilterModelMismatch(
                    "model fingerprint differs from the one recorded at calibration".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Power-iteration settings for filter extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            tol: linalg::DEFAULT_TOL,
            max_iters: linalg::DEFAULT_MAX_ITERS,
            seed: 0,
        }
    }
}

fn sign_of(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Extracts one filter per KV head from per-query-head samples.
///
/// For every query head the dominant right singular direction is flipped so
/// the mean query projection onto it is positive. Query heads sharing a KV
/// head have their sign-fixed directions averaged and re-normalized. `kappa`
/// is the group's mean query projection onto the final filter and `epsilon`
/// the sign of the mean key projection when `keys` are supplied.
pub fn compute_qfilters(
    queries: &HeadSamples,
    keys: Option<&HeadSamples>,
    options: &FilterOptions,
    model_fingerprint: [u8; 32],
) -> Result<QFilterSet> {
    let layout = queries.layout;
    layout.validate()?;
    if queries.per_head.len() != layout.n_layers * layout.n_heads {
        return Err(invalid!("query samples do not cover every head"));
    }
    if let Some(k) = keys {
        if k.layout != layout || k.per_head.len() != layout.n_layers * layout.n_kv_heads {
            return Err(invalid!("key samples do not match the query layout"));
        }
    }
    let mut warnings = Vec::new();
    let mut heads = Vec::with_capacity(layout.n_layers * layout.n_kv_heads);
    for layer in 0..layout.n_layers {
        let mut signed = Vec::with_capacity(layout.n_heads);
        let mut means = Vec::with_capacity(layout.n_heads);
        for h in 0..layout.n_heads {
            let q = queries.get(layer, h);
            if q.rows() < 2 || q.cols() != layout.d_head {
                return Err(invalid!(
                    "layer {layer} head {h}: need at least 2 query rows of dim {}",
                    layout.d_head
                ));
            }
            let seed = rng::derive_seed(options.seed, &[layer as u64, h as u64]);
            let mut v = match linalg::dominant_direction(q, options.tol, options.max_iters, seed) {
                Ok(d) => {
                    if d.gap_flag {
                        warnings.push(CalibrationWarning {
                            layer,
                            head: h,
                            kind: WarningKind::DegenerateSpectrum,
                        });
                    }
                    d.direction.into_vec()
                }
                Err(Error::Convergence { iterate, .. }) => {
                    warnings.push(CalibrationWarning {
                        layer,
                        head: h,
                        kind: WarningKind::NotConverged,
                    });
                    iterate
                }
                Err(e) => return Err(e),
            };
            let mean = q.column_means();
            if dot(&mean, &v) < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            signed.push(v);
            means.push(mean);
        }

        for g in 0..layout.n_kv_heads {
            let group = layout.query_heads_of(g);
            let mut avg = alloc::vec![0.0; layout.d_head];
            for h in group.clone() {
                avg.iter_mut().zip(&signed[h]).for_each(|(a, b)| *a += b);
            }
            let filter = match UnitVector::normalize(avg) {
                Ok(f) => f,
                Err(_) => {
                    warnings.push(CalibrationWarning {
                        layer,
                        head: g,
                        kind: WarningKind::GroupCancelled,
                    });
                    UnitVector::normalize(signed[group.start].clone())?
                }
            };
            let kappa = group
                .clone()
                .map(|h| dot(&means[h], filter.as_slice()))
                .sum::<f64>()
                / group.len() as f64;
            if !(kappa > 0.0) {
                warnings.push(CalibrationWarning {
                    layer,
                    head: g,
                    kind: WarningKind::NonPositiveKappa,
                });
            }
            let epsilon = keys.map_or(0, |k| {
                sign_of(dot(&k.get(layer, g).column_means(), filter.as_slice()))
            });
            heads.push(HeadFilter {
                filter,
                kappa,
                epsilon,
            });
        }
    }
    let mut set = QFilterSet::new(
        layout.n_layers,
        layout.n_kv_heads,
        layout.d_head,
        options.seed,
        model_fingerprint,
        heads,
    )?;
    set.warnings = warnings;
    Ok(set)
}

/// Builds single-head samples from one query matrix, for direct use with
/// [`compute_qfilters`].
pub fn single_head_samples(q: Matrix) -> HeadSamples {
    HeadSamples {
        layout: HeadLayout {
            n_layers: 1,
            n_heads: 1,
            n_kv_heads: 1,
            d_head: q.cols(),
        },
        per_head: alloc::vec![q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::planted_qk_sample;

    #[test]
    fn negative_drift_is_flipped() {
        let u = UnitVector::random(8, 4);
        let neg = u.negated();
        let (q, k) = planted_qk_sample(8, 500, 50, neg.as_slice(), 2.0, &[1.0; 50], 0.1, 1).unwrap();
        let set = compute_qfilters(
            &single_head_samples(q),
            Some(&single_head_samples(k)),
            &FilterOptions::default(),
            [0; 32],
        )
        .unwrap();
        let h = set.head(0, 0).unwrap();
        assert!(dot(h.filter.as_slice(), neg.as_slice()) > 0.99);
        assert!(h.kappa > 0.0);
        // keys have offset +1 along -u, i.e. along the filter
        assert_eq!(h.epsilon, 1);
    }

    #[test]
    fn identical_group_directions_average_to_themselves() {
        let u = UnitVector::random(6, 9);
        let (q0, _) = planted_qk_sample(6, 200, 1, u.as_slice(), 3.0, &[0.0], 0.0, 1).unwrap();
        let layout = HeadLayout {
            n_layers: 1,
            n_heads: 2,
            n_kv_heads: 1,
            d_head: 6,
        };
        let samples = HeadSamples {
            layout,
            per_head: alloc::vec![q0.clone(), q0],
        };
        let set = compute_qfilters(&samples, None, &FilterOptions::default(), [0; 32]).unwrap();
        let f = set.filter(0, 0).unwrap();
        for (a, b) in f.as_slice().iter().zip(u.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((set.head(0, 0).unwrap().kappa - 3.0).abs() < 1e-9);
        assert_eq!(set.head(0, 0).unwrap().epsilon, 0);
    }

    #[test]
    fn compatibility_checks() {
        let set = QFilterSet::new(
            1,
            1,
            2,
            0,
            [1; 32],
            alloc::vec![HeadFilter {
                filter: UnitVector::basis(2, 0),
                kappa: 1.0,
                epsilon: -1
            }],
        )
        .unwrap();
        let layout = HeadLayout {
            n_layers: 1,
            n_heads: 1,
            n_kv_heads: 1,
            d_head: 2,
        };
        assert!(set.check_compatible(&layout, Some(&[1; 32])).is_ok());
        assert!(matches!(
            set.check_compatible(&layout, Some(&[2; 32])),
            Err(Error::FilterModelMismatch(_))
        ));
        assert!(matches!(
            set.check_compatible(&HeadLayout { d_head: 3, ..layout }, None),
            Err(Error::FilterModelMismatch(_))
        ));
        assert!(set.filter(1, 0).is_err());
    }

    #[test]
    fn single_row_is_rejected() {
        let q = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(compute_qfilters(&single_head_samples(q), None, &FilterOptions::default(), [0; 32]).is_err());
    }
}
