//! The persisted atlas: layout, manifests, hashing and a verifying reader.
//!
//! ```text
//! atlas.json                 model, sequences, config, per-head entries with hashes
//! tokens.jsonl               shared token table
//! heads/l{L}_h{H}/
//!     attention.json         per-sequence attention and the aggregate pattern
//!     colors.json            color encodings of the projected tokens
//!     proj_{method}_{dim}d.json
//!     head.json              written last; marks the head complete
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bundle::{read_token_lines, SequenceInfo, TOKENS_FILE};
use super::colors::ColorEncoding;
use super::sample::SampleInfo;
use crate::attention::{AggregatePattern, AttentionMatrix};
use crate::diagnostics::HeadDiagnostics;
use crate::error::{Error, Result};
use crate::model::{ModelDescriptor, NormalizationParams, TokenRecord};
use crate::project::{Method, ProjectionResult, Quality};

pub const ATLAS_SCHEMA_VERSION: u32 = 1;
pub const ATLAS_FILE: &str = "atlas.json";
pub const HEAD_FILE: &str = "head.json";
pub const ATTENTION_FILE: &str = "attention.json";
pub const COLORS_FILE: &str = "colors.json";
pub const HEADS_DIR: &str = "heads";

pub fn head_dir_name(layer: usize, head: usize) -> String {
    format!("l{layer}_h{head}")
}

pub fn projection_file_name(method: Method, dim: usize) -> String {
    format!("proj_{}_{dim}d.json", method.as_str())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| Error::io(path, e))
}

/// Write `bytes` to a sibling temp file and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn to_json_bytes<T: Serialize>(value: &T, path: &Path) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadStatus {
    Ok,
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionEntry {
    pub method: Method,
    pub dim: usize,
    pub file: String,
    pub quality: Quality,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub objective: f64,
    /// Objective at c = 1, when that candidate was not degenerate.
    pub baseline: Option<f64>,
}

/// Contents of `head.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub layer: usize,
    pub head: usize,
    pub status: HeadStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub n_q: usize,
    pub n_k: usize,
    pub normalization: Option<NormalizationParams>,
    pub scale_search: Option<ScaleSummary>,
    pub diagnostics: Option<HeadDiagnostics>,
    /// Pre-scale norm of every token, in token-id order.
    pub norms: Vec<f64>,
    pub sample: Option<SampleInfo>,
    pub projections: Vec<ProjectionEntry>,
    /// SHA-256 of every other artifact in the head directory.
    pub files: BTreeMap<String, String>,
    pub input_digest: String,
    pub config_fingerprint: String,
}

/// Contents of `attention.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAttention {
    pub sequences: Vec<AttentionMatrix>,
    pub aggregate: Option<AggregatePattern>,
}

/// Contents of `colors.json`; `token_ids` index the full head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadColors {
    pub token_ids: Vec<usize>,
    pub encodings: Vec<ColorEncoding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub layer: usize,
    pub head: usize,
    pub status: HeadStatus,
    pub dir: String,
    pub projections: Vec<(Method, usize)>,
    pub diagnostics: Option<HeadDiagnostics>,
    /// SHA-256 of every file in the head directory, `head.json` included.
    pub files: BTreeMap<String, String>,
}

/// Contents of `atlas.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasManifest {
    pub schema_version: u32,
    pub model: ModelDescriptor,
    pub dataset: String,
    pub sequences: Vec<SequenceInfo>,
    pub exporter: serde_json::Value,
    pub config: serde_json::Value,
    pub config_fingerprint: String,
    pub tokens_sha256: String,
    pub heads: Vec<HeadEntry>,
}

impl AtlasManifest {
    pub fn entry(&self, layer: usize, head: usize) -> Option<&HeadEntry> {
        self.heads.iter().find(|h| h.layer == layer && h.head == head)
    }

    /// Distinct `(method, dim)` pairs available on at least one head, sorted.
    pub fn available_projections(&self) -> Vec<(Method, usize)> {
        let mut all: Vec<(Method, usize)> = self.heads.iter().flat_map(|h| h.projections.iter().copied()).collect();
        all.sort();
        all.dedup();
        all
    }
}

/// Read access to a finished atlas. Every artifact is checked against the
/// manifest hash before it is parsed.
#[derive(Debug, Clone)]
pub struct Atlas {
    pub root: PathBuf,
    pub manifest: AtlasManifest,
}

impl Atlas {
    pub fn open(root: &Path) -> Result<Atlas> {
        let path = root.join(ATLAS_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: AtlasManifest = serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))?;
        if manifest.schema_version != ATLAS_SCHEMA_VERSION {
            return Err(Error::Atlas(format!("unsupported atlas schema_version {}", manifest.schema_version)));
        }
        Ok(Atlas { root: root.to_path_buf(), manifest })
    }

    /// The directory name, used as the model id by the server.
    pub fn id(&self) -> String {
        self.root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }

    fn verified_bytes(&self, rel: &Path, expected: &str) -> Result<Vec<u8>> {
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != expected {
            return Err(Error::HashMismatch { path });
        }
        Ok(bytes)
    }

    fn head_file<T: DeserializeOwned>(&self, layer: usize, head: usize, name: &str) -> Result<T> {
        let entry = self
            .manifest
            .entry(layer, head)
            .ok_or_else(|| Error::Atlas(format!("no head l{layer} h{head}")))?;
        let expected = entry
            .files
            .get(name)
            .ok_or_else(|| Error::Atlas(format!("head l{layer} h{head} has no {name}")))?;
        let rel = Path::new(HEADS_DIR).join(&entry.dir).join(name);
        let bytes = self.verified_bytes(&rel, expected)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(self.root.join(rel), e))
    }

    pub fn tokens(&self) -> Result<Vec<TokenRecord>> {
        self.verified_bytes(Path::new(TOKENS_FILE), &self.manifest.tokens_sha256)?;
        read_token_lines(&self.root.join(TOKENS_FILE))
    }

    pub fn head_record(&self, layer: usize, head: usize) -> Result<HeadRecord> {
        self.head_file(layer, head, HEAD_FILE)
    }

    pub fn attention(&self, layer: usize, head: usize) -> Result<HeadAttention> {
        self.head_file(layer, head, ATTENTION_FILE)
    }

    pub fn colors(&self, layer: usize, head: usize) -> Result<HeadColors> {
        self.head_file(layer, head, COLORS_FILE)
    }

    pub fn projection(&self, layer: usize, head: usize, method: Method, dim: usize) -> Result<ProjectionResult> {
        self.head_file(layer, head, &projection_file_name(method, dim))
    }

    /// Re-hash every artifact listed in the manifest.
    pub fn verify(&self) -> Result<()> {
        self.verified_bytes(Path::new(TOKENS_FILE), &self.manifest.tokens_sha256)?;
        for entry in &self.manifest.heads {
            for (name, hash) in &entry.files {
                self.verified_bytes(&Path::new(HEADS_DIR).join(&entry.dir).join(name), hash)?;
            }
        }
        Ok(())
    }
}
