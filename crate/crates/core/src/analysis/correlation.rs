use alloc::vec::Vec;

use super::stats::compute_attention_stats;
use crate::error::{invalid, Error, Result};
use crate::kvcache::{score_knorm, score_qfilters, score_random, score_streaming, Policy, PolicyKind};
use crate::linalg::spearman_rho;
use crate::model::{ActivationSource, HeadLayout};

/// One policy's ρ against `S^h` on every (layer, query head).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PolicyCorrelation {
    pub policy: PolicyKind,
    /// Row-major `layer × head`; `None` marks a degenerate head.
    pub rho: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub n_degenerate: usize,
}

impl PolicyCorrelation {
    fn new(policy: PolicyKind, rho: Vec<Option<f64>>) -> Self {
        let mut valid: Vec<f64> = rho.iter().flatten().copied().collect();
        let n_degenerate = rho.len() - valid.len();
        valid.sort_by(f64::total_cmp);
        let mean = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
        let median = (!valid.is_empty()).then(|| {
            let n = valid.len();
            if n % 2 == 1 {
                valid[n / 2]
            } else {
                (valid[n / 2 - 1] + valid[n / 2]) / 2.0
            }
        });
        Self {
            policy,
            rho,
            mean,
            median,
            n_degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorrelationReport {
    pub layout: HeadLayout,
    pub seq_len: usize,
    pub policies: Vec<PolicyCorrelation>,
}

impl CorrelationReport {
    pub fn policy(&self, kind: PolicyKind) -> Option<&PolicyCorrelation> {
        self.policies.iter().find(|p| p.policy == kind)
    }

    /// `layer × head` heatmap for one policy.
    pub fn grid(&self, kind: PolicyKind) -> Option<Vec<Vec<Option<f64>>>> {
        let p = self.policy(kind)?;
        Some(p.rho.chunks(self.layout.n_heads).map(<[_]>::to_vec).collect())
    }

    /// Fraction of heads, valid for both policies, where `a` has the strictly
    /// larger ρ. `None` when no head is valid for both.
    pub fn win_fraction(&self, a: PolicyKind, b: PolicyKind) -> Option<f64> {
        let (pa, pb) = (self.policy(a)?, self.policy(b)?);
        let mut wins = 0usize;
        let mut total = 0usize;
        for (x, y) in pa.rho.iter().zip(&pb.rho) {
            if let (Some(x), Some(y)) = (x, y) {
                total += 1;
                wins += usize::from(x > y);
            }
        }
        (total > 0).then(|| wins as f64 / total as f64)
    }
}

/// Spearman ρ between each policy's scores at the last position and the
/// observed average attention `S^h`, on every (layer, query head).
///
/// KV-head policies are scored on the keys shared by the group. Random scores
/// are keyed by the query head so that heads are independent draws.
pub fn correlation_report<S: ActivationSource + ?Sized>(
    source: &S,
    tokens: &[u32],
    policies: &[Policy<'_>],
) -> Result<CorrelationReport> {
    if tokens.len() < 2 {
        return Err(invalid!("correlation needs at least two tokens"));
    }
    if policies.is_empty() {
        return Err(invalid!("no policies to correlate"));
    }
    let acts = source.activations(tokens, true)?;
    let stats = compute_attention_stats(&acts)?;
    let l = acts.layout;
    let n = tokens.len();
    let positions: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(policies.len());
    for policy in policies {
        let mut rho = Vec::with_capacity(l.n_layers * l.n_heads);
        for layer in 0..l.n_layers {
            for h in 0..l.n_heads {
                let g = l.kv_head_of(h);
                let keys = acts.keys(layer, g);
                let s = stats.get(layer, h);
                let scores = match policy {
                    Policy::QFilters(set) => score_qfilters(keys, set.filter(layer, g)?)?,
                    Policy::KNorm => score_knorm(keys),
                    Policy::Streaming {
                        sink_count,
                        window_size,
                    } => score_streaming(&positions, n - 1, *sink_count, *window_size),
                    Policy::Random { seed } => score_random(n, *seed, layer, h, 0),
                    Policy::Oracle => s.to_vec(),
                };
                rho.push(match spearman_rho(&scores, s) {
                    Ok(r) => Some(r),
                    Err(Error::DegenerateInput(_)) => None,
                    Err(e) => return Err(e),
                });
            }
        }
        out.push(PolicyCorrelation::new(policy.kind(), rho));
    }
    Ok(CorrelationReport {
        layout: l,
        seq_len: n,
        policies: out,
    })
}
