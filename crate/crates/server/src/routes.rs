use std::collections::{BTreeSet, HashMap};

use axum::extract::{Path, Query, State};
use axum::Json;
use qkatlas_core::attention::{
    image_edges, renormalize_hidden, top_k_edges, AggregatePattern, AttentionEdge, AttentionMatrix, ImageEdgeMode,
    IMAGE_EDGE_THRESHOLD,
};
use qkatlas_core::diagnostics::{default_dispersion_eps, search_dispersion, Dispersion, HeadDiagnostics, DISPERSION_MIN_PTS};
use qkatlas_core::matrix::Matrix;
use qkatlas_core::project::{Method, Quality};
use qkatlas_core::store::{derive_seed, ColorScheme, ColorValues, HeadStatus, ScaleSummary};
use qkatlas_core::{Modality, ModelDescriptor, NormalizationParams, TokenRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::catalog::LoadedAtlas;
use crate::error::ApiError;
use crate::AppState;

/// Points per panel in the matrix view.
pub const MATRIX_POINTS: usize = 1000;
/// Edges kept per query row in the sentence view.
pub const TOP_EDGES: usize = 2;
const MATRIX_STREAM: u64 = 0x4D41_5452;

type Params = Query<HashMap<String, String>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Projection {
    pub method: Method,
    pub dim: usize,
}

#[derive(Serialize)]
pub struct ModelSummary {
    pub id: String,
    pub model: ModelDescriptor,
    pub dataset: String,
    pub sequences: usize,
    pub heads: usize,
    pub degraded_heads: usize,
    pub methods: Vec<Method>,
    pub dims: Vec<usize>,
    pub projections: Vec<Projection>,
    pub color_schemes: Vec<ColorScheme>,
}

fn summary(id: &str, a: &LoadedAtlas) -> ModelSummary {
    let m = &a.atlas.manifest;
    let projections: Vec<Projection> =
        m.available_projections().into_iter().map(|(method, dim)| Projection { method, dim }).collect();
    let methods: BTreeSet<Method> = projections.iter().map(|p| p.method).collect();
    let dims: BTreeSet<usize> = projections.iter().map(|p| p.dim).collect();
    ModelSummary {
        id: id.to_string(),
        model: m.model.clone(),
        dataset: m.dataset.clone(),
        sequences: m.sequences.len(),
        heads: m.heads.len(),
        degraded_heads: m.heads.iter().filter(|h| h.status == HeadStatus::Degraded).count(),
        methods: methods.into_iter().collect(),
        dims: dims.into_iter().collect(),
        projections,
        color_schemes: ColorScheme::for_modality(m.model.modality),
    }
}

pub async fn models(State(state): State<AppState>) -> Json<Vec<ModelSummary>> {
    Json(state.catalog.iter().map(|(id, a)| summary(id, a)).collect())
}

/// Method, dimension and color scheme of a scatter request, with defaults
/// filled from what the atlas holds.
#[derive(Debug, Clone, Copy)]
struct View {
    method: Method,
    dim: usize,
    color: ColorScheme,
}

fn view(a: &LoadedAtlas, q: &HashMap<String, String>) -> Result<View, ApiError> {
    let available = a.atlas.manifest.available_projections();
    let methods: BTreeSet<Method> = available.iter().map(|p| p.0).collect();
    let method = match q.get("method") {
        Some(s) => match s.parse::<Method>() {
            Ok(m) if methods.contains(&m) => m,
            _ => return Err(ApiError::invalid("method", s, &methods)),
        },
        None => *methods.first().ok_or_else(|| ApiError::invalid("method", "", Vec::<String>::new()))?,
    };
    let dims: Vec<usize> = available.iter().filter(|p| p.0 == method).map(|p| p.1).collect();
    let dim = match q.get("dim") {
        Some(s) => match s.trim().parse::<usize>() {
            Ok(d) if dims.contains(&d) => d,
            _ => return Err(ApiError::invalid("dim", s, &dims)),
        },
        None => dims[0],
    };
    let schemes = ColorScheme::for_modality(a.atlas.manifest.model.modality);
    let color = match q.get("color") {
        Some(s) => match s.parse::<ColorScheme>() {
            Ok(c) if schemes.contains(&c) => c,
            _ => return Err(ApiError::invalid("color", s, &schemes)),
        },
        None => ColorScheme::TokenType,
    };
    Ok(View { method, dim, color })
}

fn rows(m: &Matrix, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| m.row(i).to_vec()).collect()
}

#[derive(Serialize)]
pub struct Colors {
    pub scheme: ColorScheme,
    #[serde(flatten)]
    pub values: ColorValues,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dark: Option<Vec<bool>>,
}

fn colors_for(a: &LoadedAtlas, layer: usize, head: usize, scheme: ColorScheme, idx: &[usize]) -> Result<(Vec<usize>, Colors), ApiError> {
    let colors = a.colors(layer, head)?;
    let enc = colors
        .encodings
        .iter()
        .find(|e| e.scheme == scheme)
        .ok_or_else(|| ApiError::Internal(format!("head l{layer} h{head} has no {scheme} encoding")))?;
    let token_ids = idx.iter().map(|&i| colors.token_ids[i]).collect();
    let dark = enc.dark.as_ref().map(|d| idx.iter().map(|&i| d[i]).collect());
    Ok((token_ids, Colors { scheme, values: enc.values.select(idx), dark }))
}

#[derive(Serialize)]
pub struct Badges {
    pub spearman_dist_dot: f64,
    pub mean_norm_diff: f64,
}

#[derive(Serialize)]
pub struct Panel {
    pub layer: usize,
    pub head: usize,
    pub status: HeadStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub badges: Option<Badges>,
    /// Points in the head's projection before subsampling.
    pub total_points: usize,
    pub token_ids: Vec<usize>,
    pub coords: Vec<Vec<f64>>,
    pub colors: Option<Colors>,
}

#[derive(Serialize)]
pub struct MatrixView {
    pub model: String,
    pub method: Method,
    pub dim: usize,
    pub color: ColorScheme,
    pub panels: Vec<Panel>,
}

/// Sorted uniform subsample of `0..n` of size at most `cap`.
fn subsample(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, cap).into_vec();
    idx.sort_unstable();
    idx
}

fn atlas_seed(a: &LoadedAtlas) -> u64 {
    a.atlas.manifest.config.get("seed").and_then(|s| s.as_u64()).unwrap_or(0)
}

pub async fn matrix(State(state): State<AppState>, Path(m): Path<String>, Query(q): Params) -> Result<Json<MatrixView>, ApiError> {
    let a = state.catalog.get(&m)?;
    let v = view(a, &q)?;
    let seed = atlas_seed(a);
    let mut panels = Vec::new();
    for e in &a.atlas.manifest.heads {
        let badges = e
            .diagnostics
            .as_ref()
            .map(|d| Badges { spearman_dist_dot: d.spearman_dist_dot, mean_norm_diff: d.mean_norm_diff });
        let mut panel = Panel {
            layer: e.layer,
            head: e.head,
            status: e.status,
            reason: None,
            badges,
            total_points: 0,
            token_ids: Vec::new(),
            coords: Vec::new(),
            colors: None,
        };
        if e.status == HeadStatus::Degraded {
            panel.reason = a.record(e.layer, e.head)?.reason.clone();
        } else {
            let p = a.projection(e.layer, e.head, v.method, v.dim)?;
            let n = p.coords.rows();
            let idx = subsample(n, MATRIX_POINTS, derive_seed(seed, e.layer, e.head, MATRIX_STREAM));
            let (token_ids, colors) = colors_for(a, e.layer, e.head, v.color, &idx)?;
            panel.total_points = n;
            panel.coords = rows(&p.coords, &idx);
            panel.token_ids = token_ids;
            panel.colors = Some(colors);
        }
        panels.push(panel);
    }
    Ok(Json(MatrixView { model: m, method: v.method, dim: v.dim, color: v.color, panels }))
}

#[derive(Serialize)]
pub struct ProjectionInfo {
    pub method: Method,
    pub dim: usize,
    pub quality: Quality,
    pub seed: u64,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
pub struct HeadView {
    pub model: String,
    pub layer: usize,
    pub head: usize,
    pub status: HeadStatus,
    pub degraded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub n_q: usize,
    pub n_k: usize,
    pub normalization: Option<NormalizationParams>,
    pub scale_search: Option<ScaleSummary>,
    pub diagnostics: Option<HeadDiagnostics>,
    /// Set when even one sequence exceeded the sample cap.
    pub sample_flagged: bool,
    pub projection: Option<ProjectionInfo>,
    /// Absent for degraded heads.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<Vec<f64>>>,
    /// Parallel to `coords`.
    pub tokens: Vec<TokenRecord>,
    pub colors: Option<Colors>,
    pub aggregate: Option<AggregatePattern>,
}

pub async fn head(
    State(state): State<AppState>,
    Path((m, layer, head)): Path<(String, usize, usize)>,
    Query(q): Params,
) -> Result<Json<HeadView>, ApiError> {
    let a = state.catalog.get(&m)?;
    if !a.has_head(layer, head) {
        return Err(ApiError::NotFound(format!("no head at layer {layer}, head {head}")));
    }
    let v = view(a, &q)?;
    let rec = a.record(layer, head)?;
    let aggregate = a.attention(layer, head)?.aggregate.clone();
    let mut out = HeadView {
        model: m,
        layer,
        head,
        status: rec.status,
        degraded: rec.status == HeadStatus::Degraded,
        reason: rec.reason.clone(),
        n_q: rec.n_q,
        n_k: rec.n_k,
        normalization: rec.normalization.clone(),
        scale_search: rec.scale_search.clone(),
        diagnostics: rec.diagnostics.clone(),
        sample_flagged: rec.sample.as_ref().is_some_and(|s| s.flagged),
        projection: None,
        coords: None,
        tokens: Vec::new(),
        colors: None,
        aggregate,
    };
    if rec.status == HeadStatus::Ok {
        let p = a.projection(layer, head, v.method, v.dim)?;
        let idx: Vec<usize> = (0..p.coords.rows()).collect();
        let (token_ids, colors) = colors_for(a, layer, head, v.color, &idx)?;
        let table = a.tokens()?;
        out.tokens = token_ids
            .iter()
            .map(|&t| {
                let mut r = table[t].clone();
                r.norm_prescale = rec.norms[t];
                r
            })
            .collect();
        out.coords = Some(rows(&p.coords, &idx));
        out.colors = Some(colors);
        out.projection =
            Some(ProjectionInfo { method: p.method, dim: p.dim, quality: p.quality.clone(), seed: p.seed, warnings: p.warnings.clone() });
    }
    Ok(Json(out))
}

/// Comma-separated positions; blank entries are ignored.
pub fn parse_hide(s: &str) -> Result<BTreeSet<usize>, ApiError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| ApiError::bad(format!("malformed hide list {s:?}: {t:?} is not a position"))))
        .collect()
}

#[derive(Serialize)]
pub struct ImageEdges {
    pub strongest: Vec<AttentionEdge>,
    pub threshold: f64,
    pub above_threshold: Vec<AttentionEdge>,
}

#[derive(Serialize)]
pub struct SequenceAttention {
    pub model: String,
    pub layer: usize,
    pub head: usize,
    pub hidden_keys: Vec<usize>,
    pub hidden_queries: Vec<usize>,
    pub attention: AttentionMatrix,
    /// Query positions whose remaining mass was zero after hiding.
    pub zero_rows: Vec<usize>,
    pub top_edges: Vec<AttentionEdge>,
    pub image_edges: Option<ImageEdges>,
    /// Token records of the sequence's queries then keys.
    pub tokens: Vec<TokenRecord>,
}

pub async fn sequence_attention(
    State(state): State<AppState>,
    Path((m, sid, layer, head)): Path<(String, u32, usize, usize)>,
    Query(q): Params,
) -> Result<Json<SequenceAttention>, ApiError> {
    let a = state.catalog.get(&m)?;
    let list = |key: &str| parse_hide(q.get(key).map(String::as_str).unwrap_or(""));
    let both = list("hide")?;
    let hidden_keys: BTreeSet<usize> = both.union(&list("hide_keys")?).copied().collect();
    let hidden_queries: BTreeSet<usize> = both.union(&list("hide_queries")?).copied().collect();
    let att = a.attention(layer, head)?;
    let raw = att
        .sequences
        .iter()
        .find(|s| s.sequence_id == sid)
        .ok_or_else(|| ApiError::NotFound(format!("no sequence {sid} in layer {layer}, head {head}")))?;
    let positions: BTreeSet<usize> = raw.query_positions.iter().chain(&raw.key_positions).copied().collect();
    if let Some(p) = hidden_keys.iter().chain(&hidden_queries).find(|p| !positions.contains(p)) {
        return Err(ApiError::bad(format!("hide position {p} is not in sequence {sid}")));
    }
    let r = renormalize_hidden(raw, &hidden_keys, &hidden_queries);
    let image_edges = (a.atlas.manifest.model.modality == Modality::Image).then(|| ImageEdges {
        strongest: image_edges(&r.matrix, ImageEdgeMode::Strongest, IMAGE_EDGE_THRESHOLD),
        threshold: IMAGE_EDGE_THRESHOLD,
        above_threshold: image_edges(&r.matrix, ImageEdgeMode::Threshold, IMAGE_EDGE_THRESHOLD),
    });
    let table = a.tokens()?;
    let tokens = raw.query_tokens.iter().chain(&raw.key_tokens).map(|&t| table[t].clone()).collect();
    Ok(Json(SequenceAttention {
        model: m,
        layer,
        head,
        hidden_keys: hidden_keys.into_iter().collect(),
        hidden_queries: hidden_queries.into_iter().collect(),
        top_edges: top_k_edges(&r.matrix, TOP_EDGES),
        attention: r.matrix,
        zero_rows: r.zero_rows,
        image_edges,
        tokens,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Exact,
    Prefix,
    Substring,
}

impl MatchMode {
    const ALL: [&'static str; 3] = ["exact", "prefix", "substring"];

    fn parse(s: &str) -> Result<Self, ApiError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exact" => Ok(MatchMode::Exact),
            "prefix" => Ok(MatchMode::Prefix),
            "substring" => Ok(MatchMode::Substring),
            _ => Err(ApiError::invalid("mode", s, MatchMode::ALL)),
        }
    }

    /// Case-insensitive; `needle` is already lowercased.
    pub fn matches(self, text: &str, needle: &str) -> bool {
        let text = text.to_lowercase();
        match self {
            MatchMode::Exact => text == needle,
            MatchMode::Prefix => text.starts_with(needle),
            MatchMode::Substring => text.contains(needle),
        }
    }
}

#[derive(Serialize)]
pub struct HeadMatches {
    pub layer: usize,
    pub head: usize,
    pub status: HeadStatus,
    pub matches: Vec<usize>,
    /// Matches that appear in the head's projection.
    pub projected: usize,
    pub dispersion: Option<Dispersion>,
}

#[derive(Serialize)]
pub struct SearchResult {
    pub model: String,
    pub query: String,
    pub mode: MatchMode,
    pub method: Method,
    pub dim: usize,
    pub heads: Vec<HeadMatches>,
}

fn scope(a: &LoadedAtlas, q: &HashMap<String, String>) -> Result<Vec<(usize, usize)>, ApiError> {
    let num = |key: &str| -> Result<Option<usize>, ApiError> {
        q.get(key)
            .map(|s| s.trim().parse::<usize>().map_err(|_| ApiError::bad(format!("{key} must be a non-negative integer, got {s:?}"))))
            .transpose()
    };
    match (num("layer")?, num("head")?) {
        (None, None) => Ok(a.atlas.manifest.heads.iter().map(|e| (e.layer, e.head)).collect()),
        (Some(l), Some(h)) if a.has_head(l, h) => Ok(vec![(l, h)]),
        (Some(l), Some(h)) => Err(ApiError::NotFound(format!("no head at layer {l}, head {h}"))),
        _ => Err(ApiError::bad("layer and head must be given together")),
    }
}

pub async fn search(State(state): State<AppState>, Path(m): Path<String>, Query(q): Params) -> Result<Json<SearchResult>, ApiError> {
    let a = state.catalog.get(&m)?;
    let text = q.get("q").map(|s| s.trim()).unwrap_or("");
    if text.is_empty() {
        return Err(ApiError::bad("search query is empty"));
    }
    let mode = q.get("mode").map(|s| MatchMode::parse(s)).transpose()?.unwrap_or(MatchMode::Exact);
    let v = view(a, &q)?;
    let heads = scope(a, &q)?;
    let needle = text.to_lowercase();
    let table = a.tokens()?;
    let matches: Vec<usize> = table.iter().filter(|t| mode.matches(&t.display_text, &needle)).map(|t| t.token_id).collect();

    let mut out = Vec::new();
    for (layer, head) in heads {
        let rec = a.record(layer, head)?;
        let mut hm = HeadMatches { layer, head, status: rec.status, matches: matches.clone(), projected: 0, dispersion: None };
        if rec.status == HeadStatus::Ok {
            let p = a.projection(layer, head, v.method, v.dim)?;
            let colors = a.colors(layer, head)?;
            let row_of: HashMap<usize, usize> = colors.token_ids.iter().enumerate().map(|(r, &t)| (t, r)).collect();
            let hit_rows: Vec<usize> = matches.iter().filter_map(|t| row_of.get(t).copied()).collect();
            hm.projected = hit_rows.len();
            let eps = default_dispersion_eps(&p.coords);
            hm.dispersion = Some(search_dispersion(&p.coords.select_rows(&hit_rows), eps, DISPERSION_MIN_PTS));
        }
        out.push(hm);
    }
    Ok(Json(SearchResult { model: m, query: text.to_string(), mode, method: v.method, dim: v.dim, heads: out }))
}

#[derive(Serialize)]
pub struct DiagnosticsRow {
    pub layer: usize,
    pub head: usize,
    pub status: HeadStatus,
    pub diagnostics: Option<HeadDiagnostics>,
}

pub async fn diagnostics(State(state): State<AppState>, Path(m): Path<String>) -> Result<Json<Vec<DiagnosticsRow>>, ApiError> {
    let a = state.catalog.get(&m)?;
    let rows = a
        .atlas
        .manifest
        .heads
        .iter()
        .map(|e| DiagnosticsRow { layer: e.layer, head: e.head, status: e.status, diagnostics: e.diagnostics.clone() })
        .collect();
    Ok(Json(rows))
}
