//! Measurements of attention geometry: average attention received, rank
//! agreement of scoring policies with it, the query spectrum, the drift
//! identity check, and filter stability.

mod correlation;
mod similarity;
mod spectrum;
mod stats;
mod theorem;

pub use correlation::{correlation_report, CorrelationReport, PolicyCorrelation};
pub use similarity::{filter_similarity, mean_abs_cosine, SimilarityMatrix};
pub use spectrum::{spectrum_report, SpectrumOptions, SpectrumRow};
pub use stats::{average_attention, compute_attention_stats, AttentionStats};
pub use theorem::{theorem_check, TheoremCheck};
