use qfilters_core::linalg::cosine_similarity;
use qfilters_core::model::{PlantedConfig, PlantedModel};
use serde::{Deserialize, Serialize};

use super::sources::{calibrate_planted, mixed_sign_source};
use crate::error::Result;
use crate::report::{num, Table, Tabular};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_documents: usize,
    pub doc_length: usize,
    /// Planted source template; its seed is replaced per run.
    pub source: PlantedConfig,
}

impl SweepOptions {
    /// The corpus holds at least as many positions as the largest size.
    pub fn new(sizes: Vec<usize>, seeds: Vec<u64>) -> Self {
        let doc_length = 1024;
        let largest = sizes.iter().copied().max().unwrap_or(0);
        Self {
            n_documents: largest.div_ceil(doc_length).max(4),
            sizes,
            seeds,
            doc_length,
            source: mixed_sign_source(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub samples: usize,
    /// Mean over seeds of the head-averaged `|cos(filter, planted direction)|`.
    pub mean_cosine: f64,
    pub min_cosine: f64,
    pub per_seed: Vec<f64>,
}

/// Head-averaged `|cos|` between a calibrated set and the planted directions.
pub fn filter_recovery(source: &PlantedModel, set: &qfilters_core::calibration::QFilterSet) -> Result<f64> {
    let l = source.config().layout;
    let mut total = 0.0;
    for layer in 0..l.n_layers {
        for g in 0..l.n_kv_heads {
            let c = cosine_similarity(set.filter(layer, g)?.as_slice(), source.direction(layer, g).as_slice())?;
            total += c.abs();
        }
    }
    Ok(total / (l.n_layers * l.n_kv_heads) as f64)
}

/// Filter recovery as a function of the number of calibration samples.
/// Each seed fixes one planted source and one corpus shared by all sizes.
pub fn calibration_sweep(options: &SweepOptions) -> Result<Vec<SweepRow>> {
    if options.sizes.is_empty() || options.seeds.is_empty() {
        return Err(qfilters_core::Error::InvalidArgument("sweep needs sizes and seeds".into()).into());
    }
    let per_seed: Vec<Vec<f64>> = std::thread::scope(|scope| {
        let handles: Vec<_> = options
            .seeds
            .iter()
            .map(|&seed| {
                scope.spawn(move || -> Result<Vec<f64>> {
                    let source = PlantedModel::new(PlantedConfig {
                        seed,
                        ..options.source.clone()
                    })?;
                    options
                        .sizes
                        .iter()
                        .map(|&n| {
                            let set = calibrate_planted(&source, options.n_documents, options.doc_length, n, seed)?;
                            filter_recovery(&source, &set)
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect::<Result<_>>()
    })?;
    Ok(options
        .sizes
        .iter()
        .enumerate()
        .map(|(i, &samples)| {
            let v: Vec<f64> = per_seed.iter().map(|s| s[i]).collect();
            SweepRow {
                samples,
                mean_cosine: v.iter().sum::<f64>() / v.len() as f64,
                min_cosine: v.iter().copied().fold(f64::INFINITY, f64::min),
                per_seed: v,
            }
        })
        .collect())
}

impl Tabular for Vec<SweepRow> {
    fn table(&self) -> Table {
        let mut t = Table::new(vec!["samples", "mean_cosine", "min_cosine", "n_seeds"]);
        for r in self {
            t.push(vec![r.samples.to_string(), num(r.mean_cosine), num(r.min_cosine), r.per_seed.len().to_string()]);
        }
        t
    }
}
