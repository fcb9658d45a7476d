//! Binary model (`TDM1`) and filter (`QFLT`) files, and raw token streams.
//!
//! All integers and floats are little-endian. Weights and filters are stored
//! as `f32`; a value already representable in `f32` round-trips bit-exactly.

use std::fs;
use std::path::Path;

use qfilters_core::calibration::{HeadFilter, QFilterSet};
use qfilters_core::linalg::{Matrix, UnitVector};
use qfilters_core::model::{tensor_specs, Model, ModelConfig, ModelWeights};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MODEL_MAGIC: [u8; 4] = *b"TDM1";
pub const MODEL_VERSION: u32 = 1;
pub const FILTER_MAGIC: [u8; 4] = *b"QFLT";
pub const FILTER_VERSION: u32 = 1;

/// Decoding failure. Every variant carries the byte offset where it was detected.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: [u8; 4],
        found: Vec<u8>,
    },
    #[error("unsupported version {found} at byte {offset} (this reader supports version {supported})")]
    UnsupportedVersion {
        offset: usize,
        found: u32,
        supported: u32,
    },
    #[error("file truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: String },
    #[error("invalid {what} at byte {offset}: {reason}")]
    Invalid {
        offset: usize,
        what: String,
        reason: String,
    },
    #[error("{extra} trailing bytes after byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.buf.len(),
                what: what.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> std::result::Result<(), FormatError> {
        let offset = self.pos;
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                offset,
                expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    fn version(&mut self, supported: u32) -> std::result::Result<(), FormatError> {
        let offset = self.pos;
        let found = self.u32("version")?;
        if found != supported {
            return Err(FormatError::UnsupportedVersion {
                offset,
                found,
                supported,
            });
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> std::result::Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn finish(self) -> std::result::Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::TrailingBytes {
                offset: self.pos,
                extra: self.buf.len() - self.pos,
            });
        }
        Ok(())
    }
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| {
        qfilters_core::Error::InvalidArgument(format!("{what} = {x} does not fit in u32")).into()
    })
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

/// Serializes a model. Weights are narrowed to `f32`.
pub fn encode_model(config: &ModelConfig, weights: &ModelWeights) -> Result<Vec<u8>> {
    config.validate()?;
    weights.validate(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    put_u32(&mut out, MODEL_VERSION);
    for (name, v) in [
        ("n_layers", config.n_layers),
        ("n_heads", config.n_heads),
        ("n_kv_heads", config.n_kv_heads),
        ("d_model", config.d_model),
        ("d_head", config.d_head),
        ("vocab_size", config.vocab_size),
        ("max_seq_len", config.max_seq_len),
    ] {
        put_u32(&mut out, to_u32(v, name)?);
    }
    for t in weights.tensors() {
        put_u32(&mut out, to_u32(t.rows(), "rows")?);
        put_u32(&mut out, to_u32(t.cols(), "cols")?);
        out.reserve(t.data().len() * 4);
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights)> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    r.version(MODEL_VERSION)?;
    let header_start = r.pos;
    let mut f = [0usize; 7];
    for (slot, name) in f.iter_mut().zip([
        "n_layers",
        "n_heads",
        "n_kv_heads",
        "d_model",
        "d_head",
        "vocab_size",
        "max_seq_len",
    ]) {
        *slot = r.u32(name)? as usize;
    }
    let config = ModelConfig {
        n_layers: f[0],
        n_heads: f[1],
        n_kv_heads: f[2],
        d_model: f[3],
        d_head: f[4],
        vocab_size: f[5],
        max_seq_len: f[6],
    };
    config.validate().map_err(|e| FormatError::Invalid {
        offset: header_start,
        what: "model header".into(),
        reason: e.to_string(),
    })?;
    let specs = tensor_specs(&config);
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in &specs {
        let offset = r.pos;
        let rows = r.u32(&spec.name)? as usize;
        let cols = r.u32(&spec.name)? as usize;
        if (rows, cols) != (spec.rows, spec.cols) {
            return Err(FormatError::Invalid {
                offset,
                what: format!("tensor {}", spec.name),
                reason: format!("shape {rows}x{cols}, expected {}x{}", spec.rows, spec.cols),
            }
            .into());
        }
        let raw = r.take(rows * cols * 4, &format!("tensor {}", spec.name))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let m = Matrix::new(rows, cols, data).map_err(|e| FormatError::Invalid {
            offset,
            what: format!("tensor {}", spec.name),
            reason: e.to_string(),
        })?;
        tensors.push(m);
    }
    r.finish()?;
    let weights = ModelWeights::from_tensors(&config, tensors)?;
    Ok((config, weights))
}

/// SHA-256 of the model file bytes.
pub fn fingerprint_bytes(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Fingerprint of an in-memory model: the hash of its encoded file.
pub fn model_fingerprint(model: &Model) -> Result<[u8; 32]> {
    Ok(fingerprint_bytes(&encode_model(model.config(), model.weights())?))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A model together with the fingerprint of its file.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: Model,
    pub fingerprint: [u8; 32],
}

impl LoadedModel {
    pub fn from_model(model: Model) -> Result<Self> {
        let fingerprint = model_fingerprint(&model)?;
        Ok(Self { model, fingerprint })
    }
}

pub fn save_model(path: &Path, model: &Model) -> Result<[u8; 32]> {
    let bytes = encode_model(model.config(), model.weights())?;
    fs::write(path, &bytes)?;
    Ok(fingerprint_bytes(&bytes))
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let bytes = fs::read(path)?;
    let (config, weights) = decode_model(&bytes)?;
    Ok(LoadedModel {
        model: Model::new(config, weights)?,
        fingerprint: fingerprint_bytes(&bytes),
    })
}

/// Serializes a filter set. Filters and kappa are narrowed to `f32`;
/// calibration warnings are not stored.
pub fn encode_filters(set: &QFilterSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + set.heads().len() * (set.d_head * 4 + 5));
    out.extend_from_slice(&FILTER_MAGIC);
    put_u32(&mut out, FILTER_VERSION);
    put_u32(&mut out, to_u32(set.n_layers, "n_layers")?);
    put_u32(&mut out, to_u32(set.n_kv_heads, "n_kv_heads")?);
    put_u32(&mut out, to_u32(set.d_head, "d_head")?);
    out.extend_from_slice(&set.calibration_seed.to_le_bytes());
    out.extend_from_slice(&set.model_fingerprint);
    for h in set.heads() {
        for &x in h.filter.as_slice() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out.extend_from_slice(&(h.kappa as f32).to_le_bytes());
        out.push(h.epsilon as u8);
    }
    Ok(out)
}

pub fn decode_filters(bytes: &[u8]) -> Result<QFilterSet> {
    let mut r = Reader::new(bytes);
    r.magic(FILTER_MAGIC)?;
    r.version(FILTER_VERSION)?;
    let n_layers = r.u32("n_layers")? as usize;
    let n_kv_heads = r.u32("n_kv_heads")? as usize;
    let d_head = r.u32("d_head")? as usize;
    let seed = r.u64("calibration seed")?;
    let fingerprint: [u8; 32] = r.take(32, "model fingerprint")?.try_into().unwrap();
    let n = n_layers.saturating_mul(n_kv_heads);
    let per_head = d_head.saturating_mul(4).saturating_add(5);
    if n.saturating_mul(per_head) > bytes.len() {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            what: format!("{n} head filters of dim {d_head}"),
        }
        .into());
    }
    let mut heads = Vec::with_capacity(n);
    for i in 0..n {
        let (layer, g) = (i / n_kv_heads, i % n_kv_heads);
        let what = format!("filter layer {layer} KV head {g}");
        let offset = r.pos;
        let mut v = Vec::with_capacity(d_head);
        for _ in 0..d_head {
            v.push(r.f32(&what)? as f64);
        }
        let kappa = r.f32(&what)? as f64;
        let epsilon = r.take(1, &what)?[0] as i8;
        let invalid = |reason: String| FormatError::Invalid {
            offset,
            what: what.clone(),
            reason,
        };
        let filter = UnitVector::from_unit_with_tolerance(v, qfilters_core::calibration::FILTER_NORM_TOL)
            .map_err(|e| invalid(e.to_string()))?;
        if !(-1..=1).contains(&epsilon) {
            return Err(invalid(format!("epsilon {epsilon} not in {{-1, 0, 1}}")).into());
        }
        heads.push(HeadFilter {
            filter,
            kappa,
            epsilon,
        });
    }
    r.finish()?;
    Ok(QFilterSet::new(n_layers, n_kv_heads, d_head, seed, fingerprint, heads)?)
}

pub fn save_filters(path: &Path, set: &QFilterSet) -> Result<()> {
    fs::write(path, encode_filters(set)?)?;
    Ok(())
}

pub fn load_filters(path: &Path) -> Result<QFilterSet> {
    decode_filters(&fs::read(path)?)
}

/// Raw little-endian `u32` token ids.
pub fn encode_tokens(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().flat_map(|t| t.to_le_bytes()).collect()
}

pub fn decode_tokens(bytes: &[u8]) -> Result<Vec<u32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(FormatError::Truncated {
            offset: bytes.len() - bytes.len() % 4,
            what: "token id".into(),
        }
        .into());
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn load_tokens(path: &Path) -> Result<Vec<u32>> {
    decode_tokens(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use qfilters_core::model::synth_model;

    fn tiny() -> (ModelConfig, ModelWeights) {
        let c = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            d_model: 8,
            d_head: 4,
            vocab_size: 11,
            max_seq_len: 16,
        };
        let w = synth_model(&c, 3).unwrap();
        (c, w)
    }

    fn format_err(r: Result<impl std::fmt::Debug>) -> FormatError {
        match r.unwrap_err() {
            Error::Format(f) => f,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn model_round_trip() {
        let (c, w) = tiny();
        let bytes = encode_model(&c, &w).unwrap();
        let (c2, w2) = decode_model(&bytes).unwrap();
        assert_eq!(c, c2);
        assert_eq!(w, w2);
        assert_eq!(encode_model(&c2, &w2).unwrap(), bytes);
    }

    #[test]
    fn model_errors() {
        let (c, w) = tiny();
        let mut bytes = encode_model(&c, &w).unwrap();
        let cut = format_err(decode_model(&bytes[..bytes.len() - 3]));
        assert!(matches!(&cut, FormatError::Truncated { what, .. } if what == "tensor output"));
        bytes[4] = 2;
        let v = format_err(decode_model(&bytes));
        assert!(matches!(v, FormatError::UnsupportedVersion { found: 2, supported: 1, offset: 4 }));
        bytes[0] = b'X';
        assert!(matches!(format_err(decode_model(&bytes)), FormatError::BadMagic { offset: 0, .. }));
    }

    #[test]
    fn tokens_round_trip() {
        let t = vec![0, 7, u32::MAX];
        assert_eq!(decode_tokens(&encode_tokens(&t)).unwrap(), t);
        assert!(decode_tokens(&[1, 2, 3]).is_err());
    }
}
