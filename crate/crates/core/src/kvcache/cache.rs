use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::model::HeadLayout;

/// One cached key/value pair, borrowed from its head store.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KvEntry<'a> {
    pub position: usize,
    pub key: &'a [f64],
    pub value: &'a [f64],
}

/// Entries of one (layer, KV head), ordered by strictly increasing position.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    positions: Vec<usize>,
    keys: Matrix,
    values: Matrix,
}

impl HeadCache {
    pub fn new(d_head: usize) -> Self {
        Self {
            positions: Vec::new(),
            keys: Matrix::with_cols(d_head),
            values: Matrix::with_cols(d_head),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Keys as a `len × d_head` matrix, row `i` belonging to `positions()[i]`.
    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = KvEntry<'_>> + '_ {
        self.positions.iter().enumerate().map(|(i, &position)| KvEntry {
            position,
            key: self.keys.row(i),
            value: self.values.row(i),
        })
    }

    pub fn push(&mut self, position: usize, key: &[f64], value: &[f64]) -> Result<()> {
        if let Some(&last) = self.positions.last() {
            if position <= last {
                return Err(invalid!(
                    "position {position} does not follow last cached position {last}"
                ));
            }
        }
        if key.len() != self.keys.cols() || value.len() != self.values.cols() {
            return Err(invalid!(
                "key/value dims {}/{} do not match d_head {}",
                key.len(),
                value.len(),
                self.keys.cols()
            ));
        }
        if key.iter().chain(value).any(|x| !x.is_finite()) {
            return Err(invalid!("non-finite key or value at position {position}"));
        }
        self.keys.push_row(key)?;
        self.values.push_row(value)?;
        self.positions.push(position);
        Ok(())
    }

    /// Keeps the entries whose index satisfies `keep`.
    pub(crate) fn retain_indices(&mut self, keep: &[bool]) {
        self.keys.retain_rows(|i| keep[i]);
        self.values.retain_rows(|i| keep[i]);
        let mut i = 0;
        self.positions.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
    }
}

/// Budgeted key/value store for every (layer, KV head) of one decoding stream.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layout: HeadLayout,
    heads: Vec<HeadCache>,
    budget: Option<usize>,
    protected_layers: BTreeSet<usize>,
    protected_positions: BTreeSet<usize>,
    next_position: usize,
}

impl KvCache {
    /// An unbounded cache.
    pub fn new(layout: HeadLayout) -> Self {
        let heads = (0..layout.n_layers * layout.n_kv_heads)
            .map(|_| HeadCache::new(layout.d_head))
            .collect();
        Self {
            layout,
            heads,
            budget: None,
            protected_layers: BTreeSet::new(),
            protected_positions: BTreeSet::new(),
            next_position: 0,
        }
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = Some(budget);
        self
    }

    /// Layers whose entries are never evicted.
    pub fn with_protected_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.protected_layers = layers.into_iter().collect();
        self
    }

    /// Positions kept in every head regardless of score.
    pub fn with_protected_positions(mut self, positions: impl IntoIterator<Item = usize>) -> Self {
        self.protected_positions = positions.into_iter().collect();
        self
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn budget(&self) -> Option<usize> {
        self.budget
    }

    pub fn protected_layers(&self) -> &BTreeSet<usize> {
        &self.protected_layers
    }

    pub fn protected_positions(&self) -> &BTreeSet<usize> {
        &self.protected_positions
    }

    pub fn is_protected_layer(&self, layer: usize) -> bool {
        self.protected_layers.contains(&layer)
    }

    /// Position the next decoded token will occupy.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn head(&self, layer: usize, kv_head: usize) -> &HeadCache {
        &self.heads[layer * self.layout.n_kv_heads + kv_head]
    }

    pub(crate) fn head_mut(&mut self, layer: usize, kv_head: usize) -> &mut HeadCache {
        &mut self.heads[layer * self.layout.n_kv_heads + kv_head]
    }

    pub fn push(
        &mut self,
        layer: usize,
        kv_head: usize,
        position: usize,
        key: &[f64],
        value: &[f64],
    ) -> Result<()> {
        if layer >= self.layout.n_layers || kv_head >= self.layout.n_kv_heads {
            return Err(invalid!(
                "head ({layer}, {kv_head}) outside cache layout {:?}",
                self.layout
            ));
        }
        if position < self.next_position {
            return Err(invalid!(
                "position {position} precedes next position {}",
                self.next_position
            ));
        }
        self.head_mut(layer, kv_head).push(position, key, value)
    }

    /// Marks the current step's entries as written.
    pub fn advance(&mut self) {
        self.next_position += 1;
    }

    /// Largest per-head entry count over the layers eviction applies to.
    pub fn max_unprotected_len(&self) -> usize {
        (0..self.layout.n_layers)
            .filter(|l| !self.is_protected_layer(*l))
            .flat_map(|l| (0..self.layout.n_kv_heads).map(move |g| (l, g)))
            .map(|(l, g)| self.head(l, g).len())
            .max()
            .unwrap_or(0)
    }

    pub fn max_len(&self) -> usize {
        self.heads.iter().map(HeadCache::len).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> HeadLayout {
        HeadLayout {
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            d_head: 2,
        }
    }

    #[test]
    fn positions_must_increase() {
        let mut h = HeadCache::new(2);
        h.push(3, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(h.push(3, &[1.0, 0.0], &[0.0, 1.0]).is_err());
        assert!(h.push(2, &[1.0, 0.0], &[0.0, 1.0]).is_err());
        assert!(h.push(4, &[1.0], &[0.0, 1.0]).is_err());
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn retain_keeps_rows_aligned() {
        let mut h = HeadCache::new(1);
        for p in 0..4 {
            h.push(p, &[p as f64], &[10.0 * p as f64]).unwrap();
        }
        h.retain_indices(&[true, false, false, true]);
        let e: Vec<_> = h.entries().map(|e| (e.position, e.key[0], e.value[0])).collect();
        assert_eq!(e, [(0, 0.0, 0.0), (3, 3.0, 30.0)]);
    }

    #[test]
    fn cache_bounds_checks() {
        let mut c = KvCache::new(layout()).with_protected_layers([0]);
        assert!(c.push(2, 0, 0, &[0.0, 0.0], &[0.0, 0.0]).is_err());
        c.push(1, 0, 0, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        c.advance();
        assert!(c.push(0, 0, 0, &[0.0, 0.0], &[0.0, 0.0]).is_err());
        assert_eq!(c.max_unprotected_len(), 1);
        assert!(c.is_protected_layer(0));
    }
}
