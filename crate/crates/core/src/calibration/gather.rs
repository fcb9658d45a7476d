use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::index;

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::model::{ActivationSource, HeadLayout};
use crate::rng;

/// How much of a corpus calibration looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CalibrationConfig {
    pub n_documents: usize,
    pub doc_length: usize,
    pub samples_per_head: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            n_documents: 20,
            doc_length: 2048,
            samples_per_head: 3000,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_documents == 0 || self.doc_length == 0 || self.samples_per_head == 0 {
            return Err(invalid!("calibration sizes must be positive: {self:?}"));
        }
        let positions = self.n_documents * self.doc_length;
        if self.samples_per_head > positions {
            return Err(Error::InsufficientData {
                what: "samples_per_head".to_string(),
                required: self.samples_per_head,
                available: positions,
            });
        }
        Ok(())
    }
}

/// One matrix per head, layer-major. Query samples have `n_heads` entries per
/// layer, key samples `n_kv_heads`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSamples {
    pub layout: HeadLayout,
    pub per_head: Vec<Matrix>,
}

impl HeadSamples {
    fn heads_per_layer(&self) -> usize {
        self.per_head.len() / self.layout.n_layers.max(1)
    }

    pub fn get(&self, layer: usize, head: usize) -> &Matrix {
        &self.per_head[layer * self.heads_per_layer() + head]
    }
}

/// Query and key rows drawn at the same positions.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSamples {
    pub queries: HeadSamples,
    pub keys: HeadSamples,
}

/// Samples `samples_per_head` positions uniformly without replacement from
/// the first `doc_length` tokens of the first `n_documents` documents and
/// gathers the query and key rows there for every head.
pub fn gather_samples<S: ActivationSource + ?Sized>(
    source: &S,
    corpus: &[Vec<u32>],
    config: &CalibrationConfig,
) -> Result<CalibrationSamples> {
    config.validate()?;
    if corpus.len() < config.n_documents {
        return Err(Error::InsufficientData {
            what: "documents".to_string(),
            required: config.n_documents,
            available: corpus.len(),
        });
    }
    if let Some(short) = corpus[..config.n_documents]
        .iter()
        .map(Vec::len)
        .find(|&l| l < config.doc_length)
    {
        return Err(Error::InsufficientData {
            what: "tokens per document".to_string(),
            required: config.doc_length,
            available: short,
        });
    }
    let layout = source.layout();
    let total = config.n_documents * config.doc_length;
    let mut r = rng::stream(config.seed, &[0x6A7E]);
    let picks = index::sample(&mut r, total, config.samples_per_head).into_vec();

    // (doc, position, output row)
    let mut by_doc: Vec<Vec<(usize, usize)>> = (0..config.n_documents).map(|_| Vec::new()).collect();
    for (slot, &flat) in picks.iter().enumerate() {
        by_doc[flat / config.doc_length].push((flat % config.doc_length, slot));
    }

    let n = config.samples_per_head;
    let mut queries: Vec<Matrix> = (0..layout.n_layers * layout.n_heads)
        .map(|_| Matrix::zeros(n, layout.d_head))
        .collect();
    let mut keys: Vec<Matrix> = (0..layout.n_layers * layout.n_kv_heads)
        .map(|_| Matrix::zeros(n, layout.d_head))
        .collect();
    for (d, wanted) in by_doc.iter().enumerate() {
        if wanted.is_empty() {
            continue;
        }
        let acts = source.activations(&corpus[d][..config.doc_length], false)?;
        for layer in 0..layout.n_layers {
            for h in 0..layout.n_heads {
                let src = acts.queries(layer, h);
                let dst = &mut queries[layer * layout.n_heads + h];
                for &(pos, slot) in wanted {
                    dst.row_mut(slot).copy_from_slice(src.row(pos));
                }
            }
            for g in 0..layout.n_kv_heads {
                let src = acts.keys(layer, g);
                let dst = &mut keys[layer * layout.n_kv_heads + g];
                for &(pos, slot) in wanted {
                    dst.row_mut(slot).copy_from_slice(src.row(pos));
                }
            }
        }
    }
    Ok(CalibrationSamples {
        queries: HeadSamples {
            layout,
            per_head: queries,
        },
        keys: HeadSamples {
            layout,
            per_head: keys,
        },
    })
}

/// Query rows only; see [`gather_samples`].
pub fn gather_queries<S: ActivationSource + ?Sized>(
    source: &S,
    corpus: &[Vec<u32>],
    config: &CalibrationConfig,
) -> Result<HeadSamples> {
    gather_samples(source, corpus, config).map(|s| s.queries)
}
