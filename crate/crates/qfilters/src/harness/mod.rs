//! Benchmarks driven by the command line: constrained generation, needle
//! retention, calibration-size sweeps and the planted validation suite.

mod generate;
mod needle;
mod sources;
mod sweep;
mod validate;

pub use generate::{constrained_generate, GenerationOptions, GenerationRun};
pub use needle::{needle_retention, HeadRetention, NeedleOptions, NeedleRun};
pub use sources::{
    anisotropic_source, calibrate_planted, default_model_config, make_policy, mixed_sign_source,
    needle_source, planted_fingerprint, planted_layout, synthetic_model, NEEDLE_TOKENS, NEEDLE_VOCAB,
};
pub use sweep::{calibration_sweep, filter_recovery, SweepOptions, SweepRow};
pub use validate::{
    geometry_checks, ranking_check, validate_planted, validate_source, Check, ValidateOptions,
    ValidationReport, RANKING_MIN_WIN_FRACTION, RECOVERY_MIN_COSINE, SPECTRUM_MIN_RATIO,
    THEOREM_MIN_PEARSON,
};
