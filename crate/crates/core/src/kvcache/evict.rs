use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use super::cache::HeadCache;
use crate::error::{invalid, Result};

/// What one eviction pass did to a head.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvictionOutcome {
    pub evicted: Vec<usize>,
    /// Protected entries alone exceeded the budget; all of them were kept.
    pub budget_override: bool,
}

/// Chooses which entries survive. Protected positions are always kept and
/// take budget slots first; the remaining slots go to the highest scores.
/// Equal scores keep the larger position.
pub fn select_keep(
    positions: &[usize],
    scores: &[f64],
    budget: usize,
    protected: &BTreeSet<usize>,
) -> Result<(Vec<bool>, bool)> {
    if positions.len() != scores.len() {
        return Err(invalid!(
            "{} scores for {} cache entries",
            scores.len(),
            positions.len()
        ));
    }
    let mut keep = vec![false; positions.len()];
    let mut n_protected = 0;
    for (k, p) in keep.iter_mut().zip(positions) {
        if protected.contains(p) {
            *k = true;
            n_protected += 1;
        }
    }
    let budget_override = n_protected > budget || (budget == 0 && n_protected > 0);
    let free = budget.saturating_sub(n_protected);

    let mut candidates: Vec<usize> = (0..positions.len()).filter(|&i| !keep[i]).collect();
    if candidates.len() > free {
        candidates.sort_unstable_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then(positions[b].cmp(&positions[a]))
        });
    }
    for &i in candidates.iter().take(free) {
        keep[i] = true;
    }
    Ok((keep, budget_override))
}

/// Shrinks `head` to `budget` entries plus protected positions.
pub fn evict_to_budget(
    head: &mut HeadCache,
    scores: &[f64],
    budget: usize,
    protected: &BTreeSet<usize>,
) -> Result<EvictionOutcome> {
    let (keep, budget_override) = select_keep(head.positions(), scores, budget, protected)?;
    let evicted: Vec<usize> = head
        .positions()
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| !k)
        .map(|(&p, _)| p)
        .collect();
    if !evicted.is_empty() {
        head.retain_indices(&keep);
    }
    Ok(EvictionOutcome {
        evicted,
        budget_override,
    })
}
