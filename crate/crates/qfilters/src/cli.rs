//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use qfilters_core::analysis::{correlation_report, filter_similarity, CorrelationReport, SimilarityMatrix};
use qfilters_core::calibration::{calibrate, synth_corpus, CalibrationConfig, MarkovTable, QFilterSet};
use qfilters_core::kvcache::{Policy, PolicyKind};
use qfilters_core::model::{ActivationSource, ModelConfig, PlantedConfig, PlantedModel};
use serde::Serialize;

use crate::error::Error;
use crate::format::{self, hex, LoadedModel};
use crate::harness::{self, GenerationOptions, GenerationRun, NeedleOptions, SweepOptions, ValidateOptions};
use crate::report::{num, BenchmarkReport, OutputFormat, Table, Tabular, Timings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "qfilters", version, about = "Query-direction KV-cache compression toolkit")]
pub struct Cli {
    /// Master seed for every random choice not fixed by a more specific flag.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output path: the artifact for `init-model`/`calibrate`, the report otherwise (stdout if absent).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded random reference model file.
    InitModel(InitModelArgs),
    /// Compute filters for a model or planted source.
    Calibrate(CalibrateArgs),
    /// Rank correlation of scoring policies with observed attention.
    Correlate(CorrelateArgs),
    /// Teacher-forced generation under a cache budget.
    Generate(GenerateArgs),
    /// Needle retention on the planted needle model.
    Needle(NeedleArgs),
    /// Head-averaged |cosine| between filter files.
    Similarity(SimilarityArgs),
    /// Geometry and ranking checks; exits 1 if any fails.
    Validate(ValidateArgs),
    /// Filter recovery against the number of calibration samples.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SourceArgs {
    /// Model file (TDM1). Defaults to the seeded reference model.
    #[arg(long, conflicts_with = "planted")]
    pub model: Option<PathBuf>,
    /// Use the planted-anisotropy source instead of a transformer.
    #[arg(long)]
    pub planted: bool,
}

#[derive(Debug, Args)]
pub struct InitModelArgs {
    #[arg(long, default_value_t = harness::default_model_config().n_layers)]
    pub layers: usize,
    #[arg(long, default_value_t = harness::default_model_config().n_heads)]
    pub heads: usize,
    #[arg(long, default_value_t = harness::default_model_config().n_kv_heads)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = harness::default_model_config().d_model)]
    pub d_model: usize,
    #[arg(long, default_value_t = harness::default_model_config().d_head)]
    pub d_head: usize,
    #[arg(long, default_value_t = harness::default_model_config().vocab_size)]
    pub vocab: usize,
    #[arg(long, default_value_t = harness::default_model_config().max_seq_len)]
    pub max_seq_len: usize,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Corpus seed; defaults to --seed.
    #[arg(long)]
    pub corpus_seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    pub docs: usize,
    #[arg(long, default_value_t = 2048)]
    pub doc_len: usize,
    #[arg(long, default_value_t = 3000)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Filter file; calibrated on the fly when absent.
    #[arg(long)]
    pub filters: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub seq_len: usize,
    #[arg(long, value_delimiter = ',', default_values_t = PolicyKind::ALL)]
    pub policies: Vec<PolicyKind>,
    #[arg(long, default_value_t = 1)]
    pub sink_count: usize,
    /// Streaming window for the correlation (scores are positional).
    #[arg(long, default_value_t = 64)]
    pub window: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Model file (TDM1). Defaults to the seeded reference model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub filters: Option<PathBuf>,
    #[arg(long)]
    pub policy: PolicyKind,
    /// Entries per head outside protected layers.
    #[arg(long, default_value_t = 512, conflicts_with = "unbounded")]
    pub budget: usize,
    /// Never evict.
    #[arg(long)]
    pub unbounded: bool,
    #[arg(long, default_value_t = 1)]
    pub sink_count: usize,
    #[arg(long, value_delimiter = ',')]
    pub protected_layers: Vec<usize>,
    /// Raw little-endian u32 token file.
    #[arg(long, conflicts_with = "corpus_seed")]
    pub tokens: Option<PathBuf>,
    /// Use seeded synthetic streams (the default when --tokens is absent).
    #[arg(long, conflicts_with = "tokens")]
    pub synthetic: bool,
    /// Seed of the synthetic streams; defaults to --seed.
    #[arg(long)]
    pub corpus_seed: Option<u64>,
    #[arg(long, default_value_t = 2048)]
    pub seq_len: usize,
    /// Number of synthetic streams.
    #[arg(long, default_value_t = 20)]
    pub streams: usize,
    #[arg(long)]
    pub capture: bool,
}

#[derive(Debug, Args)]
pub struct NeedleArgs {
    #[arg(long, value_delimiter = ',', default_values_t = PolicyKind::ALL)]
    pub policies: Vec<PolicyKind>,
    #[arg(long)]
    pub filters: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub haystack: usize,
    /// Compression ratio haystack/budget.
    #[arg(long, default_value_t = 8)]
    pub ratio: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.25, 0.5, 0.75, 0.9])]
    pub depths: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    pub span: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0, 1])]
    pub protected_layers: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    /// Filter files to compare (repeat the flag).
    #[arg(long, required = true)]
    pub filters: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 3000)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![100, 300, 1000, 3000])]
    pub samples: Vec<usize>,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
}

enum Failure {
    Usage(String),
    Validation,
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Core(qfilters_core::Error::InvalidArgument(m)) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

impl From<qfilters_core::Error> for Failure {
    fn from(e: qfilters_core::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Validation) => EXIT_FAILURE,
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::InitModel(a) => init_model(cli, a),
        Command::Calibrate(a) => calibrate_cmd(cli, a),
        Command::Correlate(a) => correlate(cli, a),
        Command::Generate(a) => generate(cli, a),
        Command::Needle(a) => needle(cli, a),
        Command::Similarity(a) => similarity(cli, a),
        Command::Validate(a) => validate(cli, a),
        Command::Sweep(a) => sweep(cli, a),
    }
}

fn emit<T: Serialize + Tabular>(
    cli: &Cli,
    command: &str,
    config: &impl Serialize,
    seeds: Vec<u64>,
    results: T,
    timings: Timings,
) -> CliResult {
    BenchmarkReport::new(command, config, seeds, results)?
        .with_timings(timings)
        .emit(cli.format, cli.out.as_deref())?;
    Ok(())
}

fn load_model_or_default(path: Option<&Path>, seed: u64) -> std::result::Result<LoadedModel, Failure> {
    Ok(match path {
        Some(p) => format::load_model(p)?,
        None => harness::synthetic_model(&harness::default_model_config(), seed)?,
    })
}

fn init_model(cli: &Cli, a: &InitModelArgs) -> CliResult {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("init-model needs --out".into()))?;
    let config = ModelConfig {
        n_layers: a.layers,
        n_heads: a.heads,
        n_kv_heads: a.kv_heads,
        d_model: a.d_model,
        d_head: a.d_head,
        vocab_size: a.vocab,
        max_seq_len: a.max_seq_len,
    };
    let m = harness::synthetic_model(&config, cli.seed)?;
    let fp = format::save_model(out, &m.model)?;
    println!("{}", hex(&fp));
    Ok(())
}

fn calibrate_cmd(cli: &Cli, a: &CalibrateArgs) -> CliResult {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("calibrate needs --out for the filter file".into()))?;
    let corpus_seed = a.corpus_seed.unwrap_or(cli.seed);
    let set = if a.source.planted {
        let source = PlantedModel::new(harness::anisotropic_source(cli.seed))?;
        harness::calibrate_planted(&source, a.docs, a.doc_len, a.samples, corpus_seed)?
    } else {
        let m = load_model_or_default(a.source.model.as_deref(), cli.seed)?;
        let corpus = synth_corpus(m.model.config().vocab_size, a.docs, a.doc_len, corpus_seed)?;
        let cfg = CalibrationConfig {
            n_documents: a.docs,
            doc_length: a.doc_len,
            samples_per_head: a.samples,
            seed: corpus_seed,
        };
        calibrate(&m.model, &corpus, &cfg, m.fingerprint)?
    };
    format::save_filters(out, &set)?;
    for w in &set.warnings {
        eprintln!("warning: layer {} head {}: {:?}", w.layer, w.head, w.kind);
    }
    Ok(())
}

/// A planted or transformer source with its filters.
enum Source {
    Planted(PlantedModel),
    Model(LoadedModel),
}

impl Source {
    fn open(args: &SourceArgs, seed: u64, planted: fn(u64) -> PlantedConfig) -> std::result::Result<Self, Failure> {
        Ok(if args.planted {
            Source::Planted(PlantedModel::new(planted(seed))?)
        } else {
            Source::Model(load_model_or_default(args.model.as_deref(), seed)?)
        })
    }

    fn as_source(&self) -> &dyn ActivationSource {
        match self {
            Source::Planted(p) => p,
            Source::Model(m) => &m.model,
        }
    }

    fn vocab_size(&self) -> usize {
        match self {
            Source::Planted(p) => p.config().vocab_size,
            Source::Model(m) => m.model.config().vocab_size,
        }
    }

    fn fingerprint(&self) -> std::result::Result<[u8; 32], Failure> {
        Ok(match self {
            Source::Planted(p) => harness::planted_fingerprint(p.config())?,
            Source::Model(m) => m.fingerprint,
        })
    }

    fn filters(&self, path: Option<&Path>, seed: u64) -> std::result::Result<QFilterSet, Failure> {
        if let Some(p) = path {
            let set = format::load_filters(p)?;
            set.check_compatible(&self.as_source().layout(), Some(&self.fingerprint()?))?;
            return Ok(set);
        }
        let (docs, len, samples) = (4, 1024, 3000);
        match self {
            Source::Planted(p) => Ok(harness::calibrate_planted(p, docs, len, samples, seed)?),
            Source::Model(m) => {
                let corpus = synth_corpus(self.vocab_size(), docs, len, seed)?;
                let cfg = CalibrationConfig {
                    n_documents: docs,
                    doc_length: len,
                    samples_per_head: samples,
                    seed,
                };
                Ok(calibrate(&m.model, &corpus, &cfg, m.fingerprint)?)
            }
        }
    }
}

#[derive(Serialize)]
struct CorrelateConfig<'a> {
    planted: bool,
    model: Option<&'a Path>,
    filters: Option<&'a Path>,
    seq_len: usize,
    policies: &'a [PolicyKind],
    sink_count: usize,
    window: usize,
}

impl Tabular for CorrelationReport {
    fn table(&self) -> Table {
        let mut t = Table::new(vec!["layer", "head", "metric", "value"]);
        let n_heads = self.layout.n_heads;
        for p in &self.policies {
            for (i, r) in p.rho.iter().enumerate() {
                t.push(vec![
                    (i / n_heads).to_string(),
                    (i % n_heads).to_string(),
                    format!("spearman_{}", p.policy),
                    r.map_or_else(|| "degenerate".to_string(), num),
                ]);
            }
        }
        t
    }
}

fn correlate(cli: &Cli, a: &CorrelateArgs) -> CliResult {
    let start = Instant::now();
    let source = Source::open(&a.source, cli.seed, harness::mixed_sign_source)?;
    let needs_filters = a.policies.contains(&PolicyKind::QFilters);
    let set = if needs_filters {
        Some(source.filters(a.filters.as_deref(), cli.seed)?)
    } else {
        None
    };
    let policies = a
        .policies
        .iter()
        .map(|&k| match k {
            PolicyKind::StreamingLlm => Ok(Policy::Streaming {
                sink_count: a.sink_count,
                window_size: a.window,
            }),
            _ => harness::make_policy(k, set.as_ref(), None, a.sink_count, cli.seed),
        })
        .collect::<crate::error::Result<Vec<_>>>()?;
    let tokens = MarkovTable::new(source.vocab_size(), cli.seed)?.sample(a.seq_len, cli.seed);
    let report = correlation_report(source.as_source(), &tokens, &policies)?;
    let config = CorrelateConfig {
        planted: a.source.planted,
        model: a.source.model.as_deref(),
        filters: a.filters.as_deref(),
        seq_len: a.seq_len,
        policies: &a.policies,
        sink_count: a.sink_count,
        window: a.window,
    };
    emit(cli, "correlate", &config, vec![cli.seed], report, Timings::from_elapsed(start.elapsed()))
}

#[derive(Serialize)]
struct GenerateConfig<'a> {
    model: Option<&'a Path>,
    filters: Option<&'a Path>,
    tokens: Option<&'a Path>,
    corpus_seed: Option<u64>,
    seq_len: usize,
    streams: usize,
    options: &'a GenerationOptions,
    policy: PolicyKind,
}

fn generate(cli: &Cli, a: &GenerateArgs) -> CliResult {
    if a.policy == PolicyKind::QFilters && a.filters.is_none() {
        return Err(Failure::Usage("--policy qfilters requires --filters".into()));
    }
    if a.streams == 0 {
        return Err(Failure::Usage("--streams must be positive".into()));
    }
    let start = Instant::now();
    let model = load_model_or_default(a.model.as_deref(), cli.seed)?;
    let filters = a.filters.as_deref().map(format::load_filters).transpose()?;
    let streams: Vec<Vec<u32>> = match &a.tokens {
        Some(p) => vec![format::load_tokens(p)?],
        None => {
            let cs = a.corpus_seed.unwrap_or(cli.seed);
            synth_corpus(model.model.config().vocab_size, a.streams, a.seq_len, cs)?
        }
    };
    let options = GenerationOptions {
        budget: (!a.unbounded).then_some(a.budget),
        sink_count: a.sink_count,
        protected_layers: a.protected_layers.clone(),
        seed: cli.seed,
        capture: a.capture,
    };
    let results: Vec<crate::error::Result<GenerationRun>> = thread::scope(|scope| {
        let handles: Vec<_> = streams
            .iter()
            .map(|s| {
                let (model, filters, options) = (&model, filters.as_ref(), &options);
                scope.spawn(move || harness::constrained_generate(model, filters, a.policy, s, options))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generation thread panicked")).collect()
    });
    let mut runs = Vec::with_capacity(streams.len());
    let mut timings = Timings::default();
    for (i, run) in results.into_iter().enumerate() {
        let run = run?;
        timings.phases.insert(format!("stream_{i}_mean_step"), run.mean_step_seconds);
        runs.push(run);
    }
    timings.wall_seconds = start.elapsed().as_secs_f64();
    let config = GenerateConfig {
        model: a.model.as_deref(),
        filters: a.filters.as_deref(),
        tokens: a.tokens.as_deref(),
        corpus_seed: a.corpus_seed,
        seq_len: a.seq_len,
        streams: a.streams,
        options: &options,
        policy: a.policy,
    };
    emit(cli, "generate", &config, vec![cli.seed], runs, timings)
}

fn needle(cli: &Cli, a: &NeedleArgs) -> CliResult {
    if a.ratio == 0 || a.haystack / a.ratio == 0 {
        return Err(Failure::Usage("--ratio must leave a positive budget".into()));
    }
    let start = Instant::now();
    let source = PlantedModel::new(harness::needle_source(cli.seed))?;
    let set = if a.policies.contains(&PolicyKind::QFilters) {
        Some(match &a.filters {
            Some(p) => format::load_filters(p)?,
            None => harness::calibrate_planted(&source, 4, 1024, 3000, cli.seed)?,
        })
    } else {
        None
    };
    let options = NeedleOptions {
        needle_span: a.span,
        depths: a.depths.clone(),
        protected_layers: a.protected_layers.clone(),
        ..NeedleOptions::with_ratio(a.haystack, a.ratio, cli.seed)
    };
    let mut runs = Vec::new();
    for &p in &a.policies {
        runs.extend(harness::needle_retention(&source, set.as_ref(), p, &options)?);
    }
    emit(cli, "needle", &options, vec![cli.seed], runs, Timings::from_elapsed(start.elapsed()))
}

impl Tabular for SimilarityMatrix {
    fn table(&self) -> Table {
        let mut t = Table::new(vec!["a", "b", "mean_abs_cosine"]);
        for (i, a) in self.labels.iter().enumerate() {
            for (j, b) in self.labels.iter().enumerate() {
                t.push(vec![a.clone(), b.clone(), num(self.values[i][j])]);
            }
        }
        t
    }
}

fn similarity(cli: &Cli, a: &SimilarityArgs) -> CliResult {
    let start = Instant::now();
    let sets = a
        .filters
        .iter()
        .map(|p| format::load_filters(p))
        .collect::<crate::error::Result<Vec<_>>>()?;
    let labels: Vec<String> = a.filters.iter().map(|p| p.display().to_string()).collect();
    let refs: Vec<&QFilterSet> = sets.iter().collect();
    let m = filter_similarity(&refs, &labels)?;
    emit(cli, "similarity", &labels, vec![], m, Timings::from_elapsed(start.elapsed()))
}

fn validate(cli: &Cli, a: &ValidateArgs) -> CliResult {
    let start = Instant::now();
    let options = ValidateOptions {
        samples: a.samples,
        ..ValidateOptions::planted(cli.seed)
    };
    let report = if a.source.planted {
        harness::validate_planted(&options)?
    } else {
        let m = load_model_or_default(a.source.model.as_deref(), cli.seed)?;
        let opts = ValidateOptions {
            probe_len: options.probe_len.min(m.model.config().max_seq_len),
            correlation_len: options.correlation_len.min(m.model.config().max_seq_len),
            doc_length: options.doc_length.min(m.model.config().max_seq_len),
            ..options.clone()
        };
        harness::validate_source(&m.model, m.model.config().vocab_size, m.fingerprint, &opts)?
    };
    let passed = report.passed;
    emit(cli, "validate", &options, vec![cli.seed], report, Timings::from_elapsed(start.elapsed()))?;
    if passed {
        Ok(())
    } else {
        Err(Failure::Validation)
    }
}

fn sweep(cli: &Cli, a: &SweepArgs) -> CliResult {
    if a.seeds == 0 || a.samples.is_empty() {
        return Err(Failure::Usage("sweep needs at least one seed and one size".into()));
    }
    let start = Instant::now();
    let seeds: Vec<u64> = (0..a.seeds).map(|i| cli.seed + i).collect();
    let options = SweepOptions::new(a.samples.clone(), seeds.clone());
    let rows = harness::calibration_sweep(&options)?;
    emit(cli, "sweep", &options, seeds, rows, Timings::from_elapsed(start.elapsed()))
}
