//! Attention-preserving normalization of a head's query/key geometry.
//!
//! Two transforms leave within-sequence softmax attention untouched: adding a
//! constant vector to every key, and scaling queries by `c` while scaling keys
//! by `1/c`. Keys are translated so both populations share a centroid, and
//! `c` is chosen on a log2 grid to make query-key cosine distance track the
//! original attention logits as closely as possible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::model::{AttentionDirection, HeadTensors, NormalizationParams};
use crate::par;

/// Correlations closer than this are treated as ties during the scale search.
pub const SCALE_TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    /// σ is the median query-key distance of the candidate being scored.
    MedianDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSearchConfig {
    pub grid_min_log2: f64,
    pub grid_max_log2: f64,
    pub grid_points: usize,
    pub weight_bandwidth_mode: BandwidthMode,
}

impl Default for ScaleSearchConfig {
    fn default() -> Self {
        Self { grid_min_log2: -8.0, grid_max_log2: 8.0, grid_points: 65, weight_bandwidth_mode: BandwidthMode::MedianDistance }
    }
}

impl ScaleSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_min_log2 < self.grid_max_log2) || self.grid_points < 3 {
            return Err(Error::InvalidConfig(format!(
                "scale grid [{}, {}] with {} points",
                self.grid_min_log2, self.grid_max_log2, self.grid_points
            )));
        }
        Ok(())
    }

    /// Candidate log2 scales. `0` (c = 1) is always included.
    pub fn candidates(&self) -> Vec<f64> {
        let step = (self.grid_max_log2 - self.grid_min_log2) / (self.grid_points - 1) as f64;
        let mut g: Vec<f64> = (0..self.grid_points).map(|i| self.grid_min_log2 + step * i as f64).collect();
        if !g.contains(&0.0) {
            g.push(0.0);
            g.sort_by(f64::total_cmp);
        }
        g
    }
}

/// Within-sequence `(query row, key row)` pairs that can receive attention.
pub fn attention_pairs(h: &HeadTensors, direction: AttentionDirection, include_special: bool) -> Vec<(usize, usize)> {
    let n_q = h.n_queries();
    let mut pairs = Vec::new();
    for s in h.sequences() {
        for (qi, &qr) in s.query_rows.iter().enumerate() {
            if !include_special && h.tokens[qr].is_special {
                continue;
            }
            for (ki, &kr) in s.key_rows.iter().enumerate() {
                if direction == AttentionDirection::Causal && s.positions[ki] > s.positions[qi] {
                    continue;
                }
                if !include_special && h.tokens[kr + n_q].is_special {
                    continue;
                }
                pairs.push((qr, kr));
            }
        }
    }
    pairs
}

/// Translation that moves the key centroid onto the query centroid.
pub fn key_translation(h: &HeadTensors) -> Result<Vec<f64>> {
    if h.n_queries() == 0 || h.n_keys() == 0 {
        return Err(Error::EmptyPopulation("queries and keys must be nonempty"));
    }
    let mq = h.queries.column_means();
    let mk = h.keys.column_means();
    Ok(mq.iter().zip(&mk).map(|(q, k)| q - k).collect())
}

/// Weighted Pearson correlation.
pub fn weighted_correlation(xs: &[f64], ys: &[f64], weights: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() != weights.len() {
        return Err(Error::LengthMismatch(format!("{} / {} / {}", xs.len(), ys.len(), weights.len())));
    }
    if xs.len() < 3 {
        return Err(Error::Precondition("weighted correlation needs at least 3 pairs".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Precondition("weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Precondition("weights are all zero".into()));
    }
    let mx = xs.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / total;
    let my = ys.iter().zip(weights).map(|(y, w)| y * w).sum::<f64>() / total;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for ((x, y), w) in xs.iter().zip(ys).zip(weights) {
        let dx = x - mx;
        let dy = y - my;
        sxy += w * dx * dy;
        sxx += w * dx * dx;
        syy += w * dy * dy;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `queries * c`, `(keys + v) / c`; token metadata (including pre-scale norms) is kept.
pub fn apply_normalization(h: &HeadTensors, p: &NormalizationParams) -> Result<HeadTensors> {
    if !(p.scale > 0.0 && p.scale.is_finite()) {
        return Err(Error::Precondition(format!("scale must be positive and finite, got {}", p.scale)));
    }
    if p.translation.len() != h.keys.cols() {
        return Err(Error::DimensionMismatch(format!(
            "translation has {} entries for {}-dimensional keys",
            p.translation.len(),
            h.keys.cols()
        )));
    }
    let c = p.scale;
    let queries = h.queries.map(|x| x * c);
    let mut keys = h.keys.clone();
    for i in 0..keys.rows() {
        for (k, v) in keys.row_mut(i).iter_mut().zip(&p.translation) {
            *k = (*k + v) / c;
        }
    }
    Ok(HeadTensors { queries, keys, ..h.clone() })
}

/// `1 - cos(q, k)`; a zero vector is at distance 1 from everything.
pub fn cosine_distance(q: &[f64], k: &[f64]) -> f64 {
    let n = norm(q) * norm(k);
    if n == 0.0 {
        1.0
    } else {
        1.0 - dot(q, k) / n
    }
}

/// Cosine distances over `pairs` in the given geometry.
pub fn pair_distances(queries: &Matrix, keys: &Matrix, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs.iter().map(|&(q, k)| cosine_distance(queries.row(q), keys.row(k))).collect()
}

/// Original attention logits `<q, k>/sqrt(d)` over `pairs`.
pub fn pair_logits(h: &HeadTensors, pairs: &[(usize, usize)]) -> Vec<f64> {
    let s = 1.0 / (h.dim() as f64).sqrt();
    pairs.iter().map(|&(q, k)| dot(h.queries.row(q), h.keys.row(k)) * s).collect()
}

/// Distance-weighted correlation between original logits and normalized distances.
pub fn scale_objective(logits: &[f64], dists: &[f64]) -> Result<f64> {
    let mut sorted = dists.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sigma = median_sorted(&sorted);
    if !(sigma > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let w: Vec<f64> = dists.iter().map(|d| (-d / sigma).exp()).collect();
    weighted_correlation(logits, dists, &w)
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleCandidate {
    pub log2_scale: f64,
    /// `None` when the candidate's geometry is degenerate.
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSearchResult {
    pub params: NormalizationParams,
    /// Weighted correlation at the chosen scale (more negative is better).
    pub objective: f64,
    /// Weighted correlation at c = 1.
    pub baseline: Option<f64>,
    pub candidates: Vec<ScaleCandidate>,
}

/// Normalization params for candidate scale `c` given the c = 1 translation `v`.
///
/// The returned translation places the key centroid on the query centroid
/// after scaling, i.e. `(mean(K) + v_c) / c == c * mean(Q)`.
pub fn params_for_scale(query_centroid: &[f64], v: &[f64], c: f64) -> NormalizationParams {
    let k = c * c - 1.0;
    NormalizationParams { translation: v.iter().zip(query_centroid).map(|(v, m)| v + k * m).collect(), scale: c }
}

/// Pick the reciprocal query/key scale whose normalized geometry gives the
/// most negative weighted distance-logit correlation.
///
/// Candidates whose geometry is degenerate are skipped; the search fails only
/// when every candidate is degenerate. Near-ties resolve to the smallest
/// `|log2 c|`, then to the smaller `c`, independent of evaluation order.
pub fn search_scale(
    h: &HeadTensors,
    v: &[f64],
    cfg: &ScaleSearchConfig,
    direction: AttentionDirection,
) -> Result<ScaleSearchResult> {
    cfg.validate()?;
    if v.len() != h.dim() {
        return Err(Error::DimensionMismatch(format!("translation length {} for d = {}", v.len(), h.dim())));
    }
    let pairs = attention_pairs(h, direction, true);
    if pairs.len() < 3 {
        return Err(Error::Precondition(format!("scale search needs at least 3 query-key pairs, found {}", pairs.len())));
    }
    let logits = pair_logits(h, &pairs);
    let centroid = h.queries.column_means();
    let grid = cfg.candidates();

    let candidates: Vec<ScaleCandidate> = par::map_slice(&grid, |&log2_scale| {
        let p = params_for_scale(&centroid, v, log2_scale.exp2());
        let correlation = apply_normalization(h, &p)
            .ok()
            .and_then(|n| scale_objective(&logits, &pair_distances(&n.queries, &n.keys, &pairs)).ok());
        ScaleCandidate { log2_scale, correlation }
    });

    let best = candidates.iter().filter_map(|c| c.correlation).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::DegenerateHead);
    }
    let chosen = candidates
        .iter()
        .filter(|c| c.correlation.is_some_and(|r| r <= best + SCALE_TIE_TOLERANCE))
        .min_by(|a, b| a.log2_scale.abs().total_cmp(&b.log2_scale.abs()).then(a.log2_scale.total_cmp(&b.log2_scale)))
        .expect("at least one candidate attains the minimum");
    let baseline = candidates.iter().find(|c| c.log2_scale == 0.0).and_then(|c| c.correlation);

    Ok(ScaleSearchResult {
        params: params_for_scale(&centroid, v, chosen.log2_scale.exp2()),
        objective: chosen.correlation.expect("filtered on Some"),
        baseline,
        candidates,
    })
}
