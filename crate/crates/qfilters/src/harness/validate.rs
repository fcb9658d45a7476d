use qfilters_core::analysis::{correlation_report, spectrum_report, theorem_check, SpectrumOptions};
use qfilters_core::calibration::{calibrate, synth_corpus, CalibrationConfig, MarkovTable, QFilterSet};
use qfilters_core::kvcache::{Policy, PolicyKind};
use qfilters_core::model::{ActivationSource, PlantedModel};
use serde::{Deserialize, Serialize};

use super::sources::{anisotropic_source, calibrate_planted, mixed_sign_source};
use super::sweep::filter_recovery;
use crate::error::Result;
use crate::report::{num, Table, Tabular};

pub const RECOVERY_MIN_COSINE: f64 = 0.95;
pub const THEOREM_MIN_PEARSON: f64 = 0.99;
pub const SPECTRUM_MIN_RATIO: f64 = 10.0;
pub const RANKING_MIN_WIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn at_least(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            value,
            threshold,
            passed: value >= threshold,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl ValidationReport {
    fn new(checks: Vec<Check>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { checks, passed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateOptions {
    pub n_documents: usize,
    pub doc_length: usize,
    pub samples: usize,
    /// Length of the held-out sequence supplying queries for the geometric checks.
    pub probe_len: usize,
    /// Keys compared in the drift identity check.
    pub n_keys: usize,
    pub correlation_len: usize,
    pub seed: u64,
}

impl ValidateOptions {
    pub fn planted(seed: u64) -> Self {
        Self {
            n_documents: 4,
            doc_length: 1024,
            samples: 3000,
            probe_len: 3000,
            n_keys: 64,
            correlation_len: 512,
            seed,
        }
    }
}

/// Geometry checks that need no ground truth: joint anisotropy (positive
/// kappa, consistent key sign), single dominant spectral component, and the
/// drift identity between mean logits and filter projections.
pub fn geometry_checks<S: ActivationSource + ?Sized>(
    source: &S,
    set: &QFilterSet,
    vocab_size: usize,
    options: &ValidateOptions,
) -> Result<Vec<Check>> {
    let layout = source.layout();
    let probe = MarkovTable::new(vocab_size, options.seed ^ 0x9E37)?.sample(options.probe_len, options.seed);
    let acts = source.activations(&probe, false)?;

    let min_kappa = set.heads().iter().map(|h| h.kappa).fold(f64::INFINITY, f64::min);
    let neg = set.heads().iter().filter(|h| h.epsilon == -1).count();
    let pos = set.heads().iter().filter(|h| h.epsilon == 1).count();
    let consistency = neg.max(pos) as f64 / set.heads().len() as f64;

    let mut min_pearson = f64::INFINITY;
    let mut min_ratio = f64::INFINITY;
    for layer in 0..layout.n_layers {
        for h in 0..layout.n_heads {
            let g = layout.kv_head_of(h);
            let head = set.head(layer, g)?;
            let q = acts.queries(layer, h);
            let keys = acts.keys(layer, g);
            let n_keys = options.n_keys.min(keys.rows());
            let k = keys.select_rows(&(0..n_keys).collect::<Vec<_>>());
            let tc = theorem_check(q, &k, &head.filter, head.kappa)?;
            min_pearson = min_pearson.min(tc.pearson);
            let spec = spectrum_report(
                q,
                &SpectrumOptions {
                    seed: options.seed,
                    ..SpectrumOptions::default()
                },
            )?;
            let r = spec.max_secondary_ratio();
            min_ratio = min_ratio.min(if r > 0.0 { 1.0 / r } else { f64::INFINITY });
        }
    }
    Ok(vec![
        Check {
            name: "positive_kappa".into(),
            value: min_kappa,
            threshold: 0.0,
            passed: min_kappa > 0.0,
            detail: "smallest mean query projection onto the filter".into(),
        },
        Check::at_least(
            "key_sign_consistency",
            consistency,
            1.0,
            format!("{neg} heads with negative and {pos} with positive mean key projection"),
        ),
        Check::at_least(
            "drift_identity",
            min_pearson,
            THEOREM_MIN_PEARSON,
            "smallest per-head Pearson between mean logits and kappa-scaled filter projections".into(),
        ),
        Check::at_least(
            "single_component",
            min_ratio,
            SPECTRUM_MIN_RATIO,
            "smallest ratio of the first mean projection to any other".into(),
        ),
    ])
}

/// QFilters against K-norm in rank agreement with observed attention.
pub fn ranking_check<S: ActivationSource + ?Sized>(
    source: &S,
    set: &QFilterSet,
    vocab_size: usize,
    options: &ValidateOptions,
) -> Result<Check> {
    let tokens = MarkovTable::new(vocab_size, options.seed ^ 0x51)?.sample(options.correlation_len, options.seed);
    let r = correlation_report(source, &tokens, &[Policy::QFilters(set), Policy::KNorm])?;
    let win = r.win_fraction(PolicyKind::QFilters, PolicyKind::KNorm).unwrap_or(0.0);
    Ok(Check::at_least(
        "ranking_vs_knorm",
        win,
        RANKING_MIN_WIN_FRACTION,
        "fraction of heads where QFilters has the larger Spearman rho against average attention".into(),
    ))
}

/// Full suite on planted sources with known directions.
pub fn validate_planted(options: &ValidateOptions) -> Result<ValidationReport> {
    let source = PlantedModel::new(anisotropic_source(options.seed))?;
    let vocab = source.config().vocab_size;
    let set = calibrate_planted(&source, options.n_documents, options.doc_length, options.samples, options.seed)?;
    let mut checks = vec![Check::at_least(
        "filter_recovery",
        min_recovery(&source, &set)?,
        RECOVERY_MIN_COSINE,
        format!("smallest |cos| to the planted direction; mean {}", num(filter_recovery(&source, &set)?)),
    )];
    checks.extend(geometry_checks(&source, &set, vocab, options)?);

    let mixed = PlantedModel::new(mixed_sign_source(options.seed))?;
    let mixed_set = calibrate_planted(&mixed, options.n_documents, options.doc_length, options.samples, options.seed)?;
    checks.push(ranking_check(&mixed, &mixed_set, vocab, options)?);
    Ok(ValidationReport::new(checks))
}

/// Suite on an arbitrary source (no ground-truth directions).
pub fn validate_source<S: ActivationSource + ?Sized>(
    source: &S,
    vocab_size: usize,
    fingerprint: [u8; 32],
    options: &ValidateOptions,
) -> Result<ValidationReport> {
    let corpus = synth_corpus(vocab_size, options.n_documents, options.doc_length, options.seed)?;
    let cfg = CalibrationConfig {
        n_documents: options.n_documents,
        doc_length: options.doc_length,
        samples_per_head: options.samples,
        seed: options.seed,
    };
    let set = calibrate(source, &corpus, &cfg, fingerprint)?;
    let mut checks = geometry_checks(source, &set, vocab_size, options)?;
    checks.push(ranking_check(source, &set, vocab_size, options)?);
    Ok(ValidationReport::new(checks))
}

fn min_recovery(source: &PlantedModel, set: &QFilterSet) -> Result<f64> {
    let l = source.config().layout;
    let mut m = f64::INFINITY;
    for layer in 0..l.n_layers {
        for g in 0..l.n_kv_heads {
            let c = qfilters_core::linalg::cosine_similarity(
                set.filter(layer, g)?.as_slice(),
                source.direction(layer, g).as_slice(),
            )?;
            m = m.min(c.abs());
        }
    }
    Ok(m)
}

impl Tabular for ValidationReport {
    fn table(&self) -> Table {
        let mut t = Table::new(vec!["check", "value", "threshold", "passed"]);
        for c in &self.checks {
            t.push(vec![c.name.clone(), num(c.value), num(c.threshold), c.passed.to_string()]);
        }
        t
    }
}
