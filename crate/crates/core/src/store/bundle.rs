//! The export interchange format.
//!
//! A bundle is a directory holding:
//!
//! * `manifest.json`: schema version, model descriptor, dataset name, the
//!   sequence table and one entry per head.
//! * `tokens.jsonl`: one token record per line, shared by every head.
//! * `l{layer}_h{head}.qk`: a 16-byte header (`b"QKV1"`, then little-endian
//!   `u32` n_q, n_k, d) followed by little-endian `f32` rows, queries first.
//! * `l{layer}_h{head}.w` (optional): the same layout holding raw query then
//!   key projection weights.
//!
//! Token norms are not stored; they are the L2 norms of the exported rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{validate_head, HeadTensors, ModelDescriptor, Role, TokenRecord};

pub const SCHEMA_VERSION: u32 = 1;
pub const TENSOR_MAGIC: [u8; 4] = *b"QKV1";
pub const HEADER_BYTES: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOKENS_FILE: &str = "tokens.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceInfo {
    pub sequence_id: u32,
    pub length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Path or URL of the source image, for image models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHead {
    pub layer: usize,
    pub head: usize,
    pub n_q: usize,
    pub n_k: usize,
    /// `(rows, cols)` of each projection weight matrix when a `.w` file is present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub model: ModelDescriptor,
    pub dataset: String,
    pub sequences: Vec<SequenceInfo>,
    pub heads: Vec<ManifestHead>,
    /// Free-form exporter settings (sampling seed, max length, ...).
    #[serde(default)]
    pub exporter: serde_json::Value,
}

/// An ingested (or about to be written) export.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub model: ModelDescriptor,
    pub dataset: String,
    pub sequences: Vec<SequenceInfo>,
    /// Shared token table; `norm_prescale` here is not meaningful.
    pub tokens: Vec<TokenRecord>,
    pub heads: Vec<HeadTensors>,
    pub exporter: serde_json::Value,
}

impl Bundle {
    pub fn head(&self, layer: usize, head: usize) -> Option<&HeadTensors> {
        self.heads.iter().find(|h| h.layer == layer && h.head == head)
    }
}

pub fn tensor_file_name(layer: usize, head: usize) -> String {
    format!("l{layer}_h{head}.qk")
}

pub fn weights_file_name(layer: usize, head: usize) -> String {
    format!("l{layer}_h{head}.w")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleViolation {
    pub file: Option<String>,
    pub message: String,
}

impl fmt::Display for BundleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.file {
            Some(file) => write!(f, "{file}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported schema_version {found}; this build reads version {supported}")]
    SchemaVersion { found: u32, supported: u32 },
    #[error("{} violation(s):\n{}", .0.len(), .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<BundleViolation>),
}

fn write_block<W: Write>(w: &mut W, a: &Matrix, b: &Matrix) -> std::io::Result<()> {
    w.write_all(&TENSOR_MAGIC)?;
    for n in [a.rows(), b.rows(), a.cols()] {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    for x in a.as_slice().iter().chain(b.as_slice()) {
        w.write_all(&(*x as f32).to_le_bytes())?;
    }
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Write `bundle` to `dir` in the interchange format.
///
/// Every head must share the bundle's token table (norms aside).
pub fn write_bundle(dir: &Path, bundle: &Bundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let strip = |t: &TokenRecord| TokenRecord { norm_prescale: 0.0, ..t.clone() };
    let shared: Vec<TokenRecord> = bundle.tokens.iter().map(strip).collect();
    let mut heads = Vec::new();
    for h in &bundle.heads {
        if h.tokens.iter().map(strip).ne(shared.iter().cloned()) {
            return Err(Error::Precondition(format!("head l{} h{} does not share the bundle token table", h.layer, h.head)));
        }
        if h.queries.cols() != h.keys.cols() {
            return Err(Error::DimensionMismatch(format!("head l{} h{}", h.layer, h.head)));
        }
        write_file(&dir.join(tensor_file_name(h.layer, h.head)), |w| write_block(w, &h.queries, &h.keys))?;
        let weights = match (&h.wq, &h.wk) {
            (Some(wq), Some(wk)) => {
                if wq.rows() != wk.rows() || wq.cols() != wk.cols() {
                    return Err(Error::DimensionMismatch(format!("weights of head l{} h{}", h.layer, h.head)));
                }
                write_file(&dir.join(weights_file_name(h.layer, h.head)), |w| write_block(w, wq, wk))?;
                Some([wq.rows(), wq.cols()])
            }
            _ => None,
        };
        heads.push(ManifestHead { layer: h.layer, head: h.head, n_q: h.n_queries(), n_k: h.n_keys(), weights });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        model: bundle.model.clone(),
        dataset: bundle.dataset.clone(),
        sequences: bundle.sequences.clone(),
        heads,
        exporter: bundle.exporter.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    write_token_lines(&dir.join(TOKENS_FILE), &shared)
}

/// One line of `tokens.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenLine {
    token_id: usize,
    sequence_id: u32,
    position: usize,
    role: Role,
    display_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    row: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    col: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    patch_rgb: Option<[u8; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    semantic_label: Option<String>,
    #[serde(default)]
    is_special: bool,
}

impl From<&TokenRecord> for TokenLine {
    fn from(t: &TokenRecord) -> Self {
        Self {
            token_id: t.token_id,
            sequence_id: t.sequence_id,
            position: t.position,
            role: t.role,
            display_text: t.display_text.clone(),
            row: t.row,
            col: t.col,
            patch_rgb: t.patch_rgb,
            semantic_label: t.semantic_label.clone(),
            is_special: t.is_special,
        }
    }
}

impl From<TokenLine> for TokenRecord {
    fn from(t: TokenLine) -> Self {
        Self {
            token_id: t.token_id,
            sequence_id: t.sequence_id,
            position: t.position,
            role: t.role,
            display_text: t.display_text,
            row: t.row,
            col: t.col,
            patch_rgb: t.patch_rgb,
            semantic_label: t.semantic_label,
            is_special: t.is_special,
            norm_prescale: 0.0,
        }
    }
}

/// Parse a token table in `tokens.jsonl` layout.
pub fn read_token_lines(path: &Path) -> Result<Vec<TokenRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TokenLine = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        out.push(t.into());
    }
    Ok(out)
}

/// Write a token table in `tokens.jsonl` layout (norms omitted).
pub fn write_token_lines(path: &Path, tokens: &[TokenRecord]) -> Result<()> {
    write_file(path, |w| {
        for t in tokens {
            serde_json::to_writer(&mut *w, &TokenLine::from(t)).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

struct Block {
    first: Matrix,
    second: Matrix,
}

/// Read a `QKV1` block, checking header and size against the declared shape.
fn read_block(dir: &Path, name: &str, rows: (usize, usize), cols: usize) -> std::result::Result<Block, BundleViolation> {
    let violation = |message: String| BundleViolation { file: Some(name.to_string()), message };
    let bytes = fs::read(dir.join(name)).map_err(|e| violation(format!("cannot read: {e}")))?;
    let expected = HEADER_BYTES + 4 * (rows.0 + rows.1) * cols;
    if bytes.len() != expected {
        return Err(violation(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    if bytes[..4] != TENSOR_MAGIC {
        return Err(violation(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let header = (word(0), word(1), word(2));
    if header != (rows.0, rows.1, cols) {
        return Err(violation(format!(
            "header shape ({}, {}, {}) does not match manifest ({}, {}, {cols})",
            header.0, header.1, header.2, rows.0, rows.1
        )));
    }
    let values: Vec<f64> = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let split = rows.0 * cols;
    Ok(Block {
        first: Matrix::from_vec(rows.0, cols, values[..split].to_vec()),
        second: Matrix::from_vec(rows.1, cols, values[split..].to_vec()),
    })
}

/// Load and fully validate a bundle directory.
///
/// Missing or unreadable `manifest.json` is an I/O error; every other
/// problem is collected into [`IngestError::Invalid`].
pub fn ingest(dir: &Path) -> std::result::Result<Bundle, IngestError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&manifest_path).map_err(|source| IngestError::Io { path: manifest_path.clone(), source })?;
    let version: serde_json::Value =
        serde_json::from_slice(&raw).map_err(|source| IngestError::Manifest { path: manifest_path.clone(), source })?;
    let found = version.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != SCHEMA_VERSION {
        return Err(IngestError::SchemaVersion { found, supported: SCHEMA_VERSION });
    }
    let manifest: Manifest =
        serde_json::from_value(version).map_err(|source| IngestError::Manifest { path: manifest_path.clone(), source })?;

    let mut violations = Vec::new();
    fn note(out: &mut Vec<BundleViolation>, file: Option<&str>, message: String) {
        out.push(BundleViolation { file: file.map(str::to_string), message });
    }

    if let Err(e) = manifest.model.validate() {
        note(&mut violations, Some(MANIFEST_FILE), e.to_string());
    }
    let model = &manifest.model;
    if manifest.heads.len() != model.head_count() {
        note(&mut violations, 
            Some(MANIFEST_FILE),
            format!("{} heads listed but model has {} x {}", manifest.heads.len(), model.num_layers, model.heads_per_layer),
        );
    }
    let mut seen = BTreeSet::new();
    for h in &manifest.heads {
        if h.layer >= model.num_layers || h.head >= model.heads_per_layer {
            note(&mut violations, Some(MANIFEST_FILE), format!("head l{} h{} is out of range", h.layer, h.head));
        }
        if !seen.insert((h.layer, h.head)) {
            note(&mut violations, Some(MANIFEST_FILE), format!("head l{} h{} listed twice", h.layer, h.head));
        }
    }
    let listed: BTreeSet<String> = manifest.heads.iter().map(|h| tensor_file_name(h.layer, h.head)).collect();
    if let Ok(entries) = fs::read_dir(dir) {
        let mut extra: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".qk") && !listed.contains(n))
            .collect();
        extra.sort();
        for name in extra {
            note(&mut violations, Some(&name), "tensor file not listed in manifest".into());
        }
    }

    let tokens = match read_token_lines(&dir.join(TOKENS_FILE)) {
        Ok(t) => t,
        Err(e) => {
            note(&mut violations, Some(TOKENS_FILE), e.to_string());
            Vec::new()
        }
    };
    let mut lengths: BTreeMap<u32, usize> = BTreeMap::new();
    for t in tokens.iter().filter(|t| t.role == Role::Query) {
        *lengths.entry(t.sequence_id).or_default() += 1;
    }
    for s in &manifest.sequences {
        if lengths.get(&s.sequence_id).copied().unwrap_or(0) != s.length {
            note(&mut violations, Some(MANIFEST_FILE), format!("sequence {} declares length {} but tokens.jsonl disagrees", s.sequence_id, s.length));
        }
    }
    if lengths.len() != manifest.sequences.len() {
        note(&mut violations, Some(TOKENS_FILE), format!("{} sequences in tokens but {} in manifest", lengths.len(), manifest.sequences.len()));
    }

    let mut heads = Vec::new();
    for entry in &manifest.heads {
        let name = tensor_file_name(entry.layer, entry.head);
        if entry.n_q + entry.n_k != tokens.len() {
            note(&mut violations, Some(&name), format!("{} + {} rows but tokens.jsonl has {} records", entry.n_q, entry.n_k, tokens.len()));
        }
        let block = match read_block(dir, &name, (entry.n_q, entry.n_k), model.head_dim) {
            Ok(b) => b,
            Err(v) => {
                violations.push(v);
                continue;
            }
        };
        let (wq, wk) = match entry.weights {
            Some([rows, cols]) => match read_block(dir, &weights_file_name(entry.layer, entry.head), (rows, rows), cols) {
                Ok(b) => (Some(b.first), Some(b.second)),
                Err(v) => {
                    violations.push(v);
                    (None, None)
                }
            },
            None => (None, None),
        };
        let norms: Vec<f64> = block.first.row_norms().into_iter().chain(block.second.row_norms()).collect();
        let head_tokens = tokens
            .iter()
            .zip(norms.iter().chain(std::iter::repeat(&0.0)))
            .map(|(t, &n)| TokenRecord { norm_prescale: n, ..t.clone() })
            .collect();
        let head = HeadTensors {
            layer: entry.layer,
            head: entry.head,
            queries: block.first,
            keys: block.second,
            tokens: head_tokens,
            wq,
            wk,
        };
        for v in validate_head(&head, model) {
            violations.push(BundleViolation { file: Some(name.clone()), message: v.to_string() });
        }
        heads.push(head);
    }

    if !violations.is_empty() {
        return Err(IngestError::Invalid(violations));
    }
    heads.sort_by_key(|h| (h.layer, h.head));
    Ok(Bundle {
        model: manifest.model,
        dataset: manifest.dataset,
        sequences: manifest.sequences,
        tokens,
        heads,
        exporter: manifest.exporter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionDirection;
    use crate::synthetic;

    fn fixture() -> Bundle {
        let model = synthetic::text_model("tiny", 2, 2, 4, AttentionDirection::Bidirectional);
        synthetic::text_bundle(model, &[3, 5, 4], synthetic::HeadStyle::isotropic(), true, 1)
    }

    #[test]
    fn writes_expected_tensor_layout() {
        let dir = tempfile::tempdir().unwrap();
        let b = fixture();
        write_bundle(dir.path(), &b).unwrap();
        let bytes = fs::read(dir.path().join("l1_h0.qk")).unwrap();
        assert_eq!(&bytes[..4], b"QKV1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 12);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 12);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), 16 + 4 * 24 * 4);
        let first = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
        assert_eq!(first, b.head(1, 0).unwrap().queries.get(0, 0) as f32);
    }

    #[test]
    fn fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let b = fixture();
        write_bundle(dir.path(), &b).unwrap();
        let back = ingest(dir.path()).unwrap();
        assert_eq!(back.model, b.model);
        assert_eq!(back.sequences, b.sequences);
        assert_eq!(back.heads.len(), 4);
        for (x, y) in b.heads.iter().zip(&back.heads) {
            assert_eq!(validate_head(y, &back.model), vec![]);
            for (a, c) in x.queries.as_slice().iter().zip(y.queries.as_slice()) {
                assert!((a - c).abs() <= 1e-7 * a.abs().max(1e-30));
            }
            for (a, c) in x.tokens.iter().zip(&y.tokens) {
                assert_eq!(a.token_id, c.token_id);
                assert!((a.norm_prescale - c.norm_prescale).abs() <= 1e-6 * a.norm_prescale);
            }
            assert!(y.wq.is_some());
        }
    }

    #[test]
    fn truncated_tensor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &fixture()).unwrap();
        let path = dir.path().join("l0_h1.qk");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let Err(IngestError::Invalid(v)) = ingest(dir.path()) else { panic!("expected violations") };
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].file.as_deref(), Some("l0_h1.qk"));
        assert_eq!(v[0].message, format!("expected {} bytes, found {}", bytes.len(), bytes.len() - 10));
    }

    #[test]
    fn unknown_schema_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &fixture()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m["schema_version"] = 99.into();
        fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        let err = ingest(dir.path()).unwrap_err();
        assert!(matches!(err, IngestError::SchemaVersion { found: 99, supported: 1 }));
        assert!(err.to_string().contains("unsupported schema_version 99"));
    }

    #[test]
    fn missing_manifest_is_io() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest(&dir.path().join("nope")), Err(IngestError::Io { .. })));
    }

    #[test]
    fn missing_and_extra_tensor_files() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &fixture()).unwrap();
        fs::remove_file(dir.path().join("l1_h1.qk")).unwrap();
        fs::write(dir.path().join("l7_h7.qk"), b"junk").unwrap();
        let Err(IngestError::Invalid(v)) = ingest(dir.path()) else { panic!() };
        let files: Vec<_> = v.iter().filter_map(|x| x.file.clone()).collect();
        assert!(files.contains(&"l1_h1.qk".to_string()));
        assert!(files.contains(&"l7_h7.qk".to_string()));
    }
}
