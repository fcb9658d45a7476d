use std::time::Instant;

use qfilters_core::calibration::QFilterSet;
use qfilters_core::kvcache::{AttentionAccumulator, KvCache, PolicyKind};
use serde::{Deserialize, Serialize};

use super::sources::make_policy;
use crate::error::{Error, Result};
use crate::format::{hex, LoadedModel};
use crate::report::{num, Table, Tabular};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    /// Maximum entries per head after each step; `None` never evicts.
    pub budget: Option<usize>,
    pub sink_count: usize,
    pub protected_layers: Vec<usize>,
    pub seed: u64,
    /// Materialize attention weights even when the policy does not need them.
    pub capture: bool,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            budget: Some(512),
            sink_count: 1,
            protected_layers: Vec::new(),
            seed: 0,
            capture: false,
        }
    }
}

/// Teacher-forced pass over a token stream under a cache budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRun {
    pub model_fingerprint: String,
    pub policy: PolicyKind,
    pub budget: Option<usize>,
    pub seq_len: usize,
    pub seed: u64,
    /// `nll[t]` is the loss of `stream[t + 1]` given the cache after step `t`.
    pub nll: Vec<f64>,
    pub perplexity: f64,
    /// Largest per-head cache size outside protected layers after any step.
    pub peak_cache_len: usize,
    pub evicted: usize,
    pub budget_overrides: usize,
    #[serde(skip)]
    pub mean_step_seconds: f64,
}

fn nll_of(logits: &[f64], target: u32) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - logits[target as usize]
}

/// Runs the stream token by token, evicting after every step once a head is
/// over budget. The loss at step `t` is computed from logits produced before
/// `stream[t + 1]` is consumed.
pub fn constrained_generate(
    model: &LoadedModel,
    filters: Option<&QFilterSet>,
    policy: PolicyKind,
    stream: &[u32],
    options: &GenerationOptions,
) -> Result<GenerationRun> {
    let config = model.model.config();
    let layout = config.layout();
    if stream.len() < 2 {
        return Err(qfilters_core::Error::InvalidArgument("stream needs at least two tokens".into()).into());
    }
    if let Some(&t) = stream.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(qfilters_core::Error::InvalidArgument(format!("token {t} outside vocabulary")).into());
    }
    if let Some(&l) = options.protected_layers.iter().find(|&&l| l >= layout.n_layers) {
        return Err(qfilters_core::Error::InvalidArgument(format!("protected layer {l} does not exist")).into());
    }
    if policy == PolicyKind::QFilters {
        if let Some(f) = filters {
            f.check_compatible(&layout, Some(&model.fingerprint))?;
        }
    }
    let p = make_policy(policy, filters, options.budget, options.sink_count, options.seed)?;

    let mut cache = KvCache::new(layout).with_protected_layers(options.protected_layers.iter().copied());
    if let Some(b) = options.budget {
        cache = cache.with_budget(b);
    }
    let capture = options.capture || policy.requires_capture();
    let mut acc = (policy == PolicyKind::Oracle).then(|| AttentionAccumulator::new(layout));

    let steps = stream.len() - 1;
    let mut nll = Vec::with_capacity(steps);
    let (mut peak, mut evicted, mut overrides) = (0, 0, 0);
    let start = Instant::now();
    for (t, &token) in stream[..steps].iter().enumerate() {
        let out = model.model.decode_step(token, &mut cache, capture)?;
        if let (Some(a), Some(att)) = (acc.as_mut(), out.attention.as_ref()) {
            a.record_step(&cache, att)?;
        }
        let report = cache.enforce_budget(&p, acc.as_mut(), t)?;
        evicted += report.evicted;
        overrides += report.budget_overrides;
        let len = cache.max_unprotected_len();
        if let Some(b) = options.budget {
            if len > b && report.budget_overrides == 0 {
                return Err(Error::BudgetExceeded { step: t, len, budget: b });
            }
        }
        peak = peak.max(len);
        let loss = nll_of(&out.logits, stream[t + 1]);
        if !loss.is_finite() {
            return Err(qfilters_core::Error::DegenerateInput(format!("non-finite loss at step {t}")).into());
        }
        nll.push(loss);
    }
    let mean_step_seconds = start.elapsed().as_secs_f64() / steps as f64;
    let perplexity = (nll.iter().sum::<f64>() / steps as f64).exp();
    Ok(GenerationRun {
        model_fingerprint: hex(&model.fingerprint),
        policy,
        budget: options.budget,
        seq_len: stream.len(),
        seed: options.seed,
        nll,
        perplexity,
        peak_cache_len: peak,
        evicted,
        budget_overrides: overrides,
        mean_step_seconds,
    })
}

impl Tabular for Vec<GenerationRun> {
    fn table(&self) -> Table {
        let mut t = Table::new(vec!["policy", "budget", "seed", "step", "nll"]);
        for r in self {
            let budget = r.budget.map_or_else(|| "none".to_string(), |b| b.to_string());
            for (i, x) in r.nll.iter().enumerate() {
                t.push(vec![r.policy.to_string(), budget.clone(), r.seed.to_string(), i.to_string(), num(*x)]);
            }
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_matches_log_softmax() {
        let l = [1.0, 2.0, 3.0];
        let z: f64 = l.iter().map(|x: &f64| x.exp()).sum();
        assert!((nll_of(&l, 2) - (z.ln() - 3.0)).abs() < 1e-12);
        assert!((nll_of(&[0.0; 4], 1) - 4f64.ln()).abs() < 1e-12);
    }
}
