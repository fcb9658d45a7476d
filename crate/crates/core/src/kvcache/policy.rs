use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use super::cache::{HeadCache, KvCache};
use super::evict::evict_to_budget;
use super::score::{score_knorm, score_qfilters, score_random, score_streaming};
use crate::calibration::QFilterSet;
use crate::error::{invalid, Result};
use crate::model::{HeadLayout, StepAttention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum PolicyKind {
    QFilters,
    KNorm,
    StreamingLlm,
    Random,
    Oracle,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::QFilters,
        PolicyKind::KNorm,
        PolicyKind::StreamingLlm,
        PolicyKind::Random,
        PolicyKind::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::QFilters => "qfilters",
            PolicyKind::KNorm => "knorm",
            PolicyKind::StreamingLlm => "streaming",
            PolicyKind::Random => "random",
            PolicyKind::Oracle => "oracle",
        }
    }

    /// Only the oracle needs materialized attention weights.
    pub fn requires_capture(self) -> bool {
        self == PolicyKind::Oracle
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> core::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "qfilters" | "q-filters" => Ok(PolicyKind::QFilters),
            "knorm" | "k-norm" => Ok(PolicyKind::KNorm),
            "streaming" | "streaming-llm" | "streamingllm" => Ok(PolicyKind::StreamingLlm),
            "random" => Ok(PolicyKind::Random),
            "oracle" => Ok(PolicyKind::Oracle),
            other => Err(alloc::format!("unknown policy '{other}'")),
        }
    }
}

/// A configured scoring policy.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    QFilters(&'a QFilterSet),
    KNorm,
    Streaming { sink_count: usize, window_size: usize },
    Random { seed: u64 },
    Oracle,
}

impl Policy<'_> {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::QFilters(_) => PolicyKind::QFilters,
            Policy::KNorm => PolicyKind::KNorm,
            Policy::Streaming { .. } => PolicyKind::StreamingLlm,
            Policy::Random { .. } => PolicyKind::Random,
            Policy::Oracle => PolicyKind::Oracle,
        }
    }

    /// Scores the entries of one head. `current_pos` is the newest position in
    /// the stream and `step` the decode step index.
    pub fn score_head(
        &self,
        layer: usize,
        kv_head: usize,
        head: &HeadCache,
        current_pos: usize,
        step: usize,
        oracle: Option<&AttentionAccumulator>,
    ) -> Result<Vec<f64>> {
        match self {
            Policy::QFilters(set) => score_qfilters(head.keys(), set.filter(layer, kv_head)?),
            Policy::KNorm => Ok(score_knorm(head.keys())),
            Policy::Streaming {
                sink_count,
                window_size,
            } => Ok(score_streaming(
                head.positions(),
                current_pos,
                *sink_count,
                *window_size,
            )),
            Policy::Random { seed } => Ok(score_random(head.len(), *seed, layer, kv_head, step)),
            Policy::Oracle => {
                let acc = oracle.ok_or_else(|| {
                    invalid!("oracle policy needs captured attention statistics")
                })?;
                Ok(acc.scores(layer, kv_head, head.positions()))
            }
        }
    }
}

/// Running sums of attention received per cached position, used by the oracle.
///
/// For a KV head shared by several query heads, each row is the mean over the
/// group, so the score is the group average of `S^h_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionAccumulator {
    layout: HeadLayout,
    heads: Vec<BTreeMap<usize, (f64, u32)>>,
}

impl AttentionAccumulator {
    pub fn new(layout: HeadLayout) -> Self {
        Self {
            layout,
            heads: (0..layout.n_layers * layout.n_kv_heads)
                .map(|_| BTreeMap::new())
                .collect(),
        }
    }

    fn slot(&mut self, layer: usize, kv_head: usize) -> &mut BTreeMap<usize, (f64, u32)> {
        &mut self.heads[layer * self.layout.n_kv_heads + kv_head]
    }

    /// Adds one attention row: `weights[i]` went to `positions[i]`.
    pub fn record_row(&mut self, layer: usize, kv_head: usize, positions: &[usize], weights: &[f64]) {
        let slot = self.slot(layer, kv_head);
        for (&p, &w) in positions.iter().zip(weights) {
            let e = slot.entry(p).or_insert((0.0, 0));
            e.0 += w;
            e.1 += 1;
        }
    }

    /// Records a decode step whose attention was computed over `cache`
    /// before eviction.
    pub fn record_step(&mut self, cache: &KvCache, attention: &StepAttention) -> Result<()> {
        let l = self.layout;
        if cache.layout() != l || attention.layout != l {
            return Err(invalid!("accumulator layout mismatch"));
        }
        let g_size = l.group_size() as f64;
        for layer in 0..l.n_layers {
            for g in 0..l.n_kv_heads {
                let positions = cache.head(layer, g).positions();
                let mut mean = alloc::vec![0.0; positions.len()];
                for h in l.query_heads_of(g) {
                    let w = attention.get(layer, h);
                    if w.len() != positions.len() {
                        return Err(invalid!("attention row does not match cache length"));
                    }
                    mean.iter_mut().zip(w).for_each(|(m, x)| *m += x / g_size);
                }
                self.record_row(layer, g, positions, &mean);
            }
        }
        Ok(())
    }

    /// Mean attention received by each listed position (0 if never attended).
    pub fn scores(&self, layer: usize, kv_head: usize, positions: &[usize]) -> Vec<f64> {
        let slot = &self.heads[layer * self.layout.n_kv_heads + kv_head];
        positions
            .iter()
            .map(|p| slot.get(p).map_or(0.0, |&(s, n)| s / n as f64))
            .collect()
    }

    pub fn forget(&mut self, layer: usize, kv_head: usize, positions: &[usize]) {
        let slot = self.slot(layer, kv_head);
        for p in positions {
            slot.remove(p);
        }
    }
}

/// Summary of one budget enforcement pass over a whole cache.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvictionReport {
    pub evicted: usize,
    pub budget_overrides: usize,
}

impl KvCache {
    /// Re-scores every over-budget head outside the protected layers and
    /// evicts down to the budget. No-op for an unbounded cache.
    pub fn enforce_budget(
        &mut self,
        policy: &Policy<'_>,
        mut oracle: Option<&mut AttentionAccumulator>,
        step: usize,
    ) -> Result<EvictionReport> {
        let Some(budget) = self.budget() else {
            return Ok(EvictionReport::default());
        };
        let layout = self.layout();
        let current = self.next_position().saturating_sub(1);
        let protected = self.protected_positions().clone();
        let mut report = EvictionReport::default();
        for layer in 0..layout.n_layers {
            if self.is_protected_layer(layer) {
                continue;
            }
            for g in 0..layout.n_kv_heads {
                if self.head(layer, g).len() <= budget {
                    continue;
                }
                let scores =
                    policy.score_head(layer, g, self.head(layer, g), current, step, oracle.as_deref())?;
                let out = evict_to_budget(self.head_mut(layer, g), &scores, budget, &protected)?;
                report.evicted += out.evicted.len();
                report.budget_overrides += usize::from(out.budget_override);
                if let Some(acc) = oracle.as_deref_mut() {
                    acc.forget(layer, g, &out.evicted);
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> HeadLayout {
        HeadLayout {
            n_layers: 3,
            n_heads: 2,
            n_kv_heads: 1,
            d_head: 1,
        }
    }

    fn fill(cache: &mut KvCache, n: usize) {
        for p in 0..n {
            for l in 0..3 {
                cache.push(l, 0, p, &[p as f64], &[0.0]).unwrap();
            }
            cache.advance();
        }
    }

    #[test]
    fn budget_respected_outside_protected_layers() {
        let mut c = KvCache::new(layout()).with_budget(3).with_protected_layers([0]);
        fill(&mut c, 7);
        let r = c.enforce_budget(&Policy::KNorm, None, 0).unwrap();
        assert_eq!(r.evicted, 8);
        assert_eq!(c.head(0, 0).len(), 7);
        assert_eq!(c.head(1, 0).positions(), &[0, 1, 2]);
        assert_eq!(c.max_unprotected_len(), 3);
    }

    #[test]
    fn oracle_without_statistics_fails() {
        let mut c = KvCache::new(layout()).with_budget(1);
        fill(&mut c, 3);
        assert!(c.enforce_budget(&Policy::Oracle, None, 0).is_err());
    }

    #[test]
    fn accumulator_averages_rows() {
        let mut acc = AttentionAccumulator::new(layout());
        acc.record_row(0, 0, &[0], &[1.0]);
        acc.record_row(0, 0, &[0, 1], &[0.5, 0.5]);
        assert_eq!(acc.scores(0, 0, &[0, 1, 2]), [0.75, 0.5, 0.0]);
        acc.forget(0, 0, &[0]);
        assert_eq!(acc.scores(0, 0, &[0]), [0.0]);
    }

    #[test]
    fn policy_names_round_trip() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("lru".parse::<PolicyKind>().is_err());
        assert!(PolicyKind::Oracle.requires_capture());
        assert!(!PolicyKind::QFilters.requires_capture());
    }
}
