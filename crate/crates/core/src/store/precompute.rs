//! Bundle to atlas: normalize, diagnose, sample, project and encode every head.
//!
//! Heads are written one directory at a time with `head.json` last, and
//! `atlas.json` is committed after all heads. A rerun reuses any head whose
//! marker matches the current input and config and whose artifacts still
//! hash correctly, so an interrupted run resumes where it stopped.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::atlas::{
    hash_file, head_dir_name, projection_file_name, sha256_hex, to_json_bytes, write_atomic, AtlasManifest, HeadAttention,
    HeadColors, HeadEntry, HeadRecord, HeadStatus, ProjectionEntry, ScaleSummary, ATLAS_FILE, ATLAS_SCHEMA_VERSION,
    ATTENTION_FILE, COLORS_FILE, HEADS_DIR, HEAD_FILE,
};
use super::bundle::{write_token_lines, Bundle, TOKENS_FILE};
use super::colors::encode_colors;
use super::sample::{sample_cap, SampleInfo, DEFAULT_SAMPLE_CAP};
use crate::attention::{aggregate_pattern, head_attention, Mask, AGGREGATE_MAX_LEN};
use crate::diagnostics::{
    head_distance_attention_correlation, norm_disparity, null_attention_fraction, wqwk_redundancy, HeadDiagnostics,
};
use crate::error::{Error, Result};
use crate::model::{HeadTensors, ModelDescriptor};
use crate::normalize::{apply_normalization, key_translation, search_scale, ScaleSearchConfig};
use crate::par;
use crate::project::{
    pairwise_cosine, pca_project, tsne_project, umap_project, CosineDistances, Method, ProjectionResult, TsneConfig,
    UmapConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputeConfig {
    pub methods: Vec<Method>,
    pub dims: Vec<usize>,
    pub seed: u64,
    pub sample_cap: usize,
    /// Include pairs whose key is a special token in the distance-logit correlation.
    pub include_special: bool,
    pub scale: ScaleSearchConfig,
    pub tsne: TsneConfig,
    pub umap: UmapConfig,
}

impl Default for PrecomputeConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            dims: vec![2, 3],
            seed: 0,
            sample_cap: DEFAULT_SAMPLE_CAP,
            include_special: true,
            scale: ScaleSearchConfig::default(),
            tsne: TsneConfig::default(),
            umap: UmapConfig::default(),
        }
    }
}

impl PrecomputeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.dims.is_empty() {
            return Err(Error::InvalidConfig("at least one method and one dimension are required".into()));
        }
        if let Some(d) = self.dims.iter().find(|&&d| d != 2 && d != 3) {
            return Err(Error::InvalidConfig(format!("projection dimension must be 2 or 3, got {d}")));
        }
        self.scale.validate()
    }

    /// Methods and dims sorted and deduplicated, so flag order never changes output.
    pub fn canonical(&self) -> PrecomputeConfig {
        let mut c = self.clone();
        c.methods.sort();
        c.methods.dedup();
        c.dims.sort();
        c.dims.dedup();
        c
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.canonical()).expect("config serializes"))
    }
}

const SAMPLE_STREAM: u64 = 0x5A;

/// Independent seed for one `(layer, head, stream)` of a run.
pub fn derive_seed(seed: u64, layer: usize, head: usize, stream: u64) -> u64 {
    let mut h = Sha256::new();
    for x in [seed, layer as u64, head as u64, stream] {
        h.update(x.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn projection_stream(method: Method, dim: usize) -> u64 {
    let m = match method {
        Method::Pca => 1,
        Method::Tsne => 2,
        Method::Umap => 3,
    };
    (m << 8) | dim as u64
}

/// Digest of everything in `h` that affects its artifacts.
pub fn input_digest(h: &HeadTensors, model: &ModelDescriptor) -> String {
    let mut d = Sha256::new();
    d.update(serde_json::to_vec(model).expect("descriptor serializes"));
    d.update((h.layer as u64).to_le_bytes());
    d.update((h.head as u64).to_le_bytes());
    for m in [Some(&h.queries), Some(&h.keys), h.wq.as_ref(), h.wk.as_ref()] {
        match m {
            Some(m) => {
                d.update([1]);
                d.update((m.rows() as u64).to_le_bytes());
                d.update((m.cols() as u64).to_le_bytes());
                for x in m.as_slice() {
                    d.update(x.to_le_bytes());
                }
            }
            None => d.update([0]),
        }
    }
    d.update(serde_json::to_vec(&h.tokens).expect("tokens serialize"));
    hex::encode(d.finalize())
}

/// Everything computed for one head, before it touches disk.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadArtifacts {
    pub record: HeadRecord,
    pub attention: HeadAttention,
    pub colors: Option<HeadColors>,
    pub projections: Vec<ProjectionResult>,
}

struct Analysis {
    normalization: crate::model::NormalizationParams,
    scale: ScaleSummary,
    diagnostics: HeadDiagnostics,
    sample: SampleInfo,
    colors: HeadColors,
    projections: Vec<ProjectionResult>,
}

fn analyze(h: &HeadTensors, model: &ModelDescriptor, cfg: &PrecomputeConfig, attention: &HeadAttention) -> Result<Analysis> {
    let direction = model.attention_direction;
    let v = key_translation(h)?;
    let search = search_scale(h, &v, &cfg.scale, direction)?;
    let normalized = apply_normalization(h, &search.params)?;
    let wqwk_correlation = match (&h.wq, &h.wk) {
        (Some(wq), Some(wk)) => Some(wqwk_redundancy(wq, wk)?),
        _ => None,
    };
    let diagnostics = HeadDiagnostics {
        layer: h.layer,
        head: h.head,
        spearman_dist_dot: head_distance_attention_correlation(h, &normalized, direction, cfg.include_special)?,
        mean_norm_diff: norm_disparity(h)?,
        wqwk_correlation,
        first_token_attention_mass: null_attention_fraction(&attention.sequences)?,
        chosen_scale: search.params.scale,
        scale_objective: search.objective,
    };

    let sampled = sample_cap(h, cfg.sample_cap, derive_seed(cfg.seed, h.layer, h.head, SAMPLE_STREAM))?;
    let points = apply_normalization(&sampled.head, &search.params)?.joint_points();
    let mut cosine: Option<CosineDistances> = None;
    let mut projections = Vec::new();
    for &method in &cfg.methods {
        for &dim in &cfg.dims {
            let seed = derive_seed(cfg.seed, h.layer, h.head, projection_stream(method, dim));
            let mut result = match method {
                Method::Pca => pca_project(&points, dim)?,
                Method::Tsne | Method::Umap => {
                    let cd = cosine.get_or_insert_with(|| pairwise_cosine(&points));
                    if method == Method::Tsne {
                        tsne_project(&cd.distances, dim, &cfg.tsne, seed)?
                    } else {
                        umap_project(&cd.distances, dim, &cfg.umap, seed)?
                    }
                }
            };
            result.seed = seed;
            if let Some(cd) = cosine.as_ref().filter(|cd| method != Method::Pca && !cd.zero_rows.is_empty()) {
                result.warnings.push(format!("{} zero-norm points placed at cosine distance 1", cd.zero_rows.len()));
            }
            projections.push(result);
        }
    }
    let colors = HeadColors {
        token_ids: sampled.source_token_ids.clone(),
        encodings: encode_colors(&sampled.head.tokens, model.modality),
    };
    Ok(Analysis {
        normalization: search.params,
        scale: ScaleSummary { objective: search.objective, baseline: search.baseline },
        diagnostics,
        sample: SampleInfo { cap: cfg.sample_cap, source_token_ids: sampled.source_token_ids, flagged: sampled.flagged },
        colors,
        projections,
    })
}

/// Compute one head. Failures after attention mark the head degraded.
pub fn compute_head(h: &HeadTensors, model: &ModelDescriptor, cfg: &PrecomputeConfig) -> HeadArtifacts {
    let mut sequences = head_attention(h, Mask::from(model.attention_direction));
    for s in &mut sequences {
        s.scores = None;
    }
    let aggregate = aggregate_pattern(&sequences, AGGREGATE_MAX_LEN).ok();
    let attention = HeadAttention { sequences, aggregate };
    let mut record = HeadRecord {
        layer: h.layer,
        head: h.head,
        status: HeadStatus::Ok,
        reason: None,
        n_q: h.n_queries(),
        n_k: h.n_keys(),
        normalization: None,
        scale_search: None,
        diagnostics: None,
        norms: h.tokens.iter().map(|t| t.norm_prescale).collect(),
        sample: None,
        projections: Vec::new(),
        files: BTreeMap::new(),
        input_digest: input_digest(h, model),
        config_fingerprint: cfg.fingerprint(),
    };
    match analyze(h, model, &cfg.canonical(), &attention) {
        Ok(a) => {
            record.normalization = Some(a.normalization);
            record.scale_search = Some(a.scale);
            record.diagnostics = Some(a.diagnostics);
            record.sample = Some(a.sample);
            record.projections = a
                .projections
                .iter()
                .map(|p| ProjectionEntry {
                    method: p.method,
                    dim: p.dim,
                    file: projection_file_name(p.method, p.dim),
                    quality: p.quality.clone(),
                    seed: p.seed,
                    warnings: p.warnings.clone(),
                })
                .collect();
            HeadArtifacts { record, attention, colors: Some(a.colors), projections: a.projections }
        }
        Err(e) => {
            record.status = HeadStatus::Degraded;
            record.reason = Some(e.to_string());
            HeadArtifacts { record, attention, colors: None, projections: Vec::new() }
        }
    }
}

fn write_head(dir: &Path, mut art: HeadArtifacts) -> Result<HeadEntry> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let marker = dir.join(HEAD_FILE);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let mut files = BTreeMap::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        write_atomic(&dir.join(&name), &bytes)?;
        files.insert(name, sha256_hex(&bytes));
        Ok(())
    };
    put(ATTENTION_FILE.into(), to_json_bytes(&art.attention, &dir.join(ATTENTION_FILE))?)?;
    if let Some(colors) = &art.colors {
        put(COLORS_FILE.into(), to_json_bytes(colors, &dir.join(COLORS_FILE))?)?;
    }
    for p in &art.projections {
        let name = projection_file_name(p.method, p.dim);
        let bytes = to_json_bytes(p, &dir.join(&name))?;
        put(name, bytes)?;
    }
    art.record.files = files.clone();
    let bytes = to_json_bytes(&art.record, &marker)?;
    write_atomic(&marker, &bytes)?;
    files.insert(HEAD_FILE.into(), sha256_hex(&bytes));
    Ok(entry_for(&art.record, files))
}

fn entry_for(record: &HeadRecord, files: BTreeMap<String, String>) -> HeadEntry {
    HeadEntry {
        layer: record.layer,
        head: record.head,
        status: record.status,
        dir: head_dir_name(record.layer, record.head),
        projections: record.projections.iter().map(|p| (p.method, p.dim)).collect(),
        diagnostics: record.diagnostics.clone(),
        files,
    }
}

/// The entry for an existing head directory if its marker matches and every
/// artifact it lists still hashes correctly.
fn reusable(dir: &Path, digest: &str, fingerprint: &str) -> Option<HeadEntry> {
    let marker = dir.join(HEAD_FILE);
    let bytes = fs::read(&marker).ok()?;
    let record: HeadRecord = serde_json::from_slice(&bytes).ok()?;
    if record.input_digest != digest || record.config_fingerprint != fingerprint {
        return None;
    }
    for (name, hash) in &record.files {
        if hash_file(&dir.join(name)).ok()? != *hash {
            return None;
        }
    }
    let mut files = record.files.clone();
    files.insert(HEAD_FILE.into(), sha256_hex(&bytes));
    Some(entry_for(&record, files))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadOutcome {
    Computed,
    Reused,
    Degraded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    pub layer: usize,
    pub head: usize,
    pub outcome: HeadOutcome,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrecomputeSummary {
    pub computed: usize,
    pub reused: usize,
    pub degraded: usize,
    /// Nothing was written: every head and the manifest were already current.
    pub noop: bool,
}

/// Build (or resume) the atlas for `bundle` in `out`.
///
/// `progress` is called once per head, possibly from worker threads.
pub fn precompute(
    bundle: &Bundle,
    out: &Path,
    cfg: &PrecomputeConfig,
    progress: &(dyn Fn(&Progress) + Sync),
) -> Result<PrecomputeSummary> {
    cfg.validate()?;
    let cfg = cfg.canonical();
    let fingerprint = cfg.fingerprint();
    let heads_root = out.join(HEADS_DIR);
    fs::create_dir_all(&heads_root).map_err(|e| Error::io(&heads_root, e))?;

    let results = par::map_slice(&bundle.heads, |h| -> Result<(HeadEntry, HeadOutcome)> {
        let dir = heads_root.join(head_dir_name(h.layer, h.head));
        let digest = input_digest(h, &bundle.model);
        let (entry, outcome, reason) = match reusable(&dir, &digest, &fingerprint) {
            Some(entry) => (entry, HeadOutcome::Reused, None),
            None => {
                let art = compute_head(h, &bundle.model, &cfg);
                let reason = art.record.reason.clone();
                let outcome = if reason.is_some() { HeadOutcome::Degraded } else { HeadOutcome::Computed };
                (write_head(&dir, art)?, outcome, reason)
            }
        };
        progress(&Progress { layer: h.layer, head: h.head, outcome, reason });
        Ok((entry, outcome))
    });

    let mut summary = PrecomputeSummary::default();
    let mut heads = Vec::new();
    for r in results {
        let (entry, outcome) = r?;
        match outcome {
            HeadOutcome::Computed => summary.computed += 1,
            HeadOutcome::Reused => summary.reused += 1,
            HeadOutcome::Degraded => summary.degraded += 1,
        }
        heads.push(entry);
    }
    heads.sort_by_key(|e| (e.layer, e.head));

    let tokens_path = out.join(TOKENS_FILE);
    let tmp = out.join(format!("{TOKENS_FILE}.tmp"));
    write_token_lines(&tmp, &bundle.tokens)?;
    let tokens_sha256 = hash_file(&tmp)?;
    let tokens_changed = hash_file(&tokens_path).ok().as_deref() != Some(tokens_sha256.as_str());
    if tokens_changed {
        fs::rename(&tmp, &tokens_path).map_err(|e| Error::io(&tokens_path, e))?;
    } else {
        fs::remove_file(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }

    let manifest = AtlasManifest {
        schema_version: ATLAS_SCHEMA_VERSION,
        model: bundle.model.clone(),
        dataset: bundle.dataset.clone(),
        sequences: bundle.sequences.clone(),
        exporter: bundle.exporter.clone(),
        config: serde_json::to_value(&cfg).expect("config serializes"),
        config_fingerprint: fingerprint,
        tokens_sha256,
        heads,
    };
    let path = out.join(ATLAS_FILE);
    let bytes = to_json_bytes(&manifest, &path)?;
    let manifest_current = fs::read(&path).is_ok_and(|old| old == bytes);
    if !manifest_current {
        write_atomic(&path, &bytes)?;
    }
    summary.noop = manifest_current && !tokens_changed && summary.reused == bundle.heads.len();
    Ok(summary)
}
