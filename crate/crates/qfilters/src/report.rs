//! Report envelopes and their JSON / CSV serializations.
//!
//! JSON nests results by layer and head. CSV is flat with fixed columns per
//! report kind; the column set is versioned by [`CSV_SCHEMA_VERSION`].

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::format::hex;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

/// A flat table: the CSV form of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<&'static str>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Results that have a CSV form.
pub trait Tabular {
    fn table(&self) -> Table;
}

/// Formats a float so that CSV output is exact and stable.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub wall_seconds: f64,
    /// Named phase durations in seconds, e.g. mean decode step per policy.
    pub phases: BTreeMap<String, f64>,
}

impl Timings {
    pub fn from_elapsed(elapsed: Duration) -> Self {
        Self {
            wall_seconds: elapsed.as_secs_f64(),
            phases: BTreeMap::new(),
        }
    }
}

/// Envelope written by every subcommand: metadata, results and timings.
/// Everything except `timings` is a pure function of config and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport<T> {
    pub schema_version: u32,
    pub command: String,
    pub crate_version: String,
    pub config: serde_json::Value,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub results: T,
    pub timings: Timings,
}

impl<T: Serialize> BenchmarkReport<T> {
    pub fn new(command: &str, config: &impl Serialize, seeds: Vec<u64>, results: T) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_hash = hex(&Sha256::digest(serde_json::to_vec(&config)?));
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            config_hash,
            seeds,
            results,
            timings: Timings::default(),
        })
    }

    pub fn with_timings(mut self, timings: Timings) -> Self {
        self.timings = timings;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl<T: Serialize + Tabular> BenchmarkReport<T> {
    /// Writes the report to `out`, or stdout when `None`.
    pub fn emit(&self, format: OutputFormat, out: Option<&Path>) -> Result<()> {
        let mut buf = Vec::new();
        match format {
            OutputFormat::Json => {
                buf.extend_from_slice(self.to_json()?.as_bytes());
                buf.push(b'\n');
            }
            OutputFormat::Csv => self.results.table().write_csv(&mut buf)?,
        }
        match out {
            Some(p) => std::fs::write(p, buf)?,
            None => std::io::stdout().write_all(&buf)?,
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Two;

    impl Tabular for Two {
        fn table(&self) -> Table {
            let mut t = Table::new(vec!["a", "b"]);
            t.push(vec!["1".into(), num(0.1)]);
            t
        }
    }

    #[test]
    fn csv_layout() {
        let mut out = Vec::new();
        Two.table().write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "a,b\n1,0.1\n");
    }

    #[test]
    fn config_hash_is_stable() {
        let a = BenchmarkReport::new("x", &[1, 2], vec![7], 0u8).unwrap();
        let b = BenchmarkReport::new("x", &[1, 2], vec![7], 0u8)
            .unwrap()
            .with_timings(Timings::from_elapsed(Duration::from_millis(5)));
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a, b);
        assert_eq!(a.config_hash.len(), 64);
    }
}
