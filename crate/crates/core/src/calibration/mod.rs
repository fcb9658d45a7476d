//! Filter calibration: sample query activations over a corpus, take the
//! dominant right singular direction per head, fix its sign and average it
//! over grouped heads.

mod corpus;
mod filters;
mod gather;

pub use corpus::{synth_corpus, MarkovTable};
pub use filters::{
    compute_qfilters, single_head_samples, CalibrationWarning, FilterOptions, HeadFilter,
    QFilterSet, WarningKind, FILTER_NORM_TOL,
};
pub use gather::{gather_queries, gather_samples, CalibrationConfig, CalibrationSamples, HeadSamples};

use crate::error::Result;
use crate::model::ActivationSource;

/// Gathers samples and computes filters in one go. Power iteration uses the
/// calibration seed.
pub fn calibrate<S: ActivationSource + ?Sized>(
    source: &S,
    corpus: &[alloc::vec::Vec<u32>],
    config: &CalibrationConfig,
    model_fingerprint: [u8; 32],
) -> Result<QFilterSet> {
    let samples = gather_samples(source, corpus, config)?;
    let options = FilterOptions {
        seed: config.seed,
        ..FilterOptions::default()
    };
    compute_qfilters(&samples.queries, Some(&samples.keys), &options, model_fingerprint)
}
