use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::rng;

const MAX_SUCCESSORS: usize = 8;

/// Sparse first-order Markov transition table over token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovTable {
    rows: Vec<Vec<(u32, f64)>>,
}

impl MarkovTable {
    /// Each token gets up to eight distinct successors with seeded weights.
    pub fn new(vocab_size: usize, seed: u64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(invalid!("vocabulary must have at least 2 tokens, got {vocab_size}"));
        }
        if u32::try_from(vocab_size).is_err() {
            return Err(invalid!("vocabulary of {vocab_size} does not fit u32 ids"));
        }
        let k = vocab_size.min(MAX_SUCCESSORS);
        let mut r = rng::stream(seed, &[0xC0_4905]);
        let rows = (0..vocab_size)
            .map(|_| {
                let succ = index::sample(&mut r, vocab_size, k);
                let weights: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
                let total: f64 = weights.iter().sum();
                succ.iter()
                    .zip(weights)
                    .map(|(t, w)| (t as u32, w / total))
                    .collect()
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.len()
    }

    /// Successors of `token` with their transition probabilities.
    pub fn row(&self, token: u32) -> &[(u32, f64)] {
        &self.rows[token as usize]
    }

    fn next(&self, r: &mut ChaCha8Rng, token: u32) -> u32 {
        let row = self.row(token);
        let mut x: f64 = r.random();
        for &(t, p) in row {
            if x < p {
                return t;
            }
            x -= p;
        }
        row[row.len() - 1].0
    }

    /// A stream of `len` tokens; the first is uniform over the vocabulary.
    pub fn sample(&self, len: usize, seed: u64) -> Vec<u32> {
        let mut r = rng::stream(seed, &[0x57_2EA4]);
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut t = r.random_range(0..self.rows.len() as u32);
        out.push(t);
        for _ in 1..len {
            t = self.next(&mut r, t);
            out.push(t);
        }
        out
    }
}

/// `n_docs` seeded Markov-chain documents of `doc_length` tokens each.
pub fn synth_corpus(vocab_size: usize, n_docs: usize, doc_length: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let table = MarkovTable::new(vocab_size, seed)?;
    Ok((0..n_docs)
        .map(|d| table.sample(doc_length, rng::derive_seed(seed, &[d as u64])))
        .collect())
}
