use std::collections::BTreeSet;

use qfilters_core::analysis::compute_attention_stats;
use qfilters_core::calibration::{MarkovTable, QFilterSet};
use qfilters_core::kvcache::{select_keep, AttentionAccumulator, KvCache, PolicyKind};
use qfilters_core::model::{ActivationSource, PlantedModel};
use serde::{Deserialize, Serialize};

use super::sources::make_policy;
use crate::error::Result;
use crate::report::{num, Table, Tabular};

fn invalid(msg: String) -> crate::error::Error {
    qfilters_core::Error::InvalidArgument(msg).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleOptions {
    pub haystack_len: usize,
    pub needle_span: usize,
    pub depths: Vec<f64>,
    pub budget: usize,
    pub protected_layers: Vec<usize>,
    pub sink_count: usize,
    pub seed: u64,
}

impl NeedleOptions {
    pub fn with_ratio(haystack_len: usize, ratio: usize, seed: u64) -> Self {
        Self {
            haystack_len,
            needle_span: 4,
            depths: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            budget: haystack_len / ratio.max(1),
            protected_layers: vec![0, 1],
            sink_count: 1,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRetention {
    pub layer: usize,
    pub kv_head: usize,
    pub retention: f64,
    pub oracle_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleRun {
    pub haystack_len: usize,
    pub depth: f64,
    pub needle_position: usize,
    pub needle_span: usize,
    pub policy: PolicyKind,
    pub budget: usize,
    pub protected_layers: Vec<usize>,
    /// Mean over unprotected heads of the fraction of needle entries kept.
    pub retention: f64,
    /// Mean over unprotected heads of `|kept ∩ oracle top-budget| / budget`.
    pub oracle_overlap: f64,
    pub per_head: Vec<HeadRetention>,
}

/// Injects a needle span at each depth of a planted haystack, streams it
/// through a budgeted cache and measures what survived.
///
/// The oracle ranks by the average attention each position receives over the
/// whole haystack, i.e. with look-ahead. With a static score the final kept
/// set of a streaming top-budget cache equals the global top-budget set.
pub fn needle_retention(
    source: &PlantedModel,
    filters: Option<&QFilterSet>,
    policy: PolicyKind,
    options: &NeedleOptions,
) -> Result<Vec<NeedleRun>> {
    let cfg = source.config();
    let layout = cfg.layout;
    let needle = cfg
        .needle
        .as_ref()
        .ok_or_else(|| invalid("planted source has no needle tokens".into()))?;
    let (l, span, budget) = (options.haystack_len, options.needle_span, options.budget);
    if span == 0 {
        return Err(invalid("needle span must be at least one token".into()));
    }
    if span > budget {
        return Err(invalid(format!("needle span {span} exceeds budget {budget}")));
    }
    if l < span + 2 {
        return Err(invalid(format!("haystack of {l} tokens cannot hold a needle of {span}")));
    }
    if needle.tokens.start < 2 {
        return Err(invalid("needle tokens must leave at least two haystack tokens".into()));
    }
    if let Some(d) = options.depths.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
        return Err(invalid(format!("depth {d} outside (0, 1)")));
    }
    if let Some(&p) = options.protected_layers.iter().find(|&&p| p >= layout.n_layers) {
        return Err(invalid(format!("protected layer {p} does not exist")));
    }
    if let Some(f) = filters {
        f.check_compatible(&layout, None)?;
    }
    let p = make_policy(policy, filters, Some(budget), options.sink_count, options.seed)?;
    let haystack = MarkovTable::new(needle.tokens.start as usize, options.seed)?.sample(l, options.seed);
    let needle_ids: Vec<u32> = needle.tokens.clone().cycle().take(span).collect();
    let none = BTreeSet::new();

    let mut runs = Vec::with_capacity(options.depths.len());
    for &depth in &options.depths {
        let pos = ((depth * l as f64).round() as usize).clamp(1, l - span);
        let mut tokens = haystack.clone();
        tokens[pos..pos + span].copy_from_slice(&needle_ids);
        let acts = source.activations(&tokens, true)?;
        let stats = compute_attention_stats(&acts)?;

        // Group-mean S per KV head.
        let mut s_group = Vec::with_capacity(layout.n_layers * layout.n_kv_heads);
        for layer in 0..layout.n_layers {
            for g in 0..layout.n_kv_heads {
                let heads = layout.query_heads_of(g);
                let n = heads.len() as f64;
                let mut s = vec![0.0; l];
                for h in heads {
                    s.iter_mut().zip(stats.get(layer, h)).for_each(|(a, b)| *a += b / n);
                }
                s_group.push(s);
            }
        }
        let mut acc = (policy == PolicyKind::Oracle).then(|| {
            let mut a = AttentionAccumulator::new(layout);
            for layer in 0..layout.n_layers {
                for g in 0..layout.n_kv_heads {
                    let s = &s_group[layer * layout.n_kv_heads + g];
                    for (t, &x) in s.iter().enumerate() {
                        a.record_row(layer, g, &[t], &[x]);
                    }
                }
            }
            a
        });

        let mut cache = KvCache::new(layout)
            .with_budget(budget)
            .with_protected_layers(options.protected_layers.iter().copied());
        for t in 0..l {
            for layer in 0..layout.n_layers {
                for g in 0..layout.n_kv_heads {
                    cache.push(layer, g, t, acts.keys(layer, g).row(t), acts.values(layer, g).row(t))?;
                }
            }
            cache.advance();
            cache.enforce_budget(&p, acc.as_mut(), t)?;
        }

        let all: Vec<usize> = (0..l).collect();
        let mut per_head = Vec::new();
        for layer in 0..layout.n_layers {
            if cache.is_protected_layer(layer) {
                continue;
            }
            for g in 0..layout.n_kv_heads {
                let kept = cache.head(layer, g).positions();
                let kept_needle = (pos..pos + span).filter(|x| kept.binary_search(x).is_ok()).count();
                let (top, _) = select_keep(&all, &s_group[layer * layout.n_kv_heads + g], budget, &none)?;
                let denom = budget.min(l);
                let hits = kept.iter().filter(|&&x| top[x]).count();
                per_head.push(HeadRetention {
                    layer,
                    kv_head: g,
                    retention: kept_needle as f64 / span as f64,
                    oracle_overlap: hits as f64 / denom as f64,
                });
            }
        }
        let mean = |f: fn(&HeadRetention) -> f64| {
            if per_head.is_empty() {
                1.0
            } else {
                per_head.iter().map(f).sum::<f64>() / per_head.len() as f64
            }
        };
        runs.push(NeedleRun {
            haystack_len: l,
            depth,
            needle_position: pos,
            needle_span: span,
            policy,
            budget,
            protected_layers: options.protected_layers.clone(),
            retention: mean(|h| h.retention),
            oracle_overlap: mean(|h| h.oracle_overlap),
            per_head,
        });
    }
    Ok(runs)
}

impl Tabular for Vec<NeedleRun> {
    fn table(&self) -> Table {
        let mut t = Table::new(vec!["policy", "budget", "depth", "layer", "head", "metric", "value"]);
        for r in self {
            for h in &r.per_head {
                for (metric, v) in [("retention", h.retention), ("oracle_overlap", h.oracle_overlap)] {
                    t.push(vec![
                        r.policy.to_string(),
                        r.budget.to_string(),
                        num(r.depth),
                        h.layer.to_string(),
                        h.kv_head.to_string(),
                        metric.to_string(),
                        num(v),
                    ]);
                }
            }
        }
        t
    }
}
