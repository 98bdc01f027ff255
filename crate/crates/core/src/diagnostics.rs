//! Per-head quantitative signatures.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMatrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{AttentionDirection, HeadTensors};
use crate::normalize::{attention_pairs, pair_distances, pair_logits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDiagnostics {
    pub layer: usize,
    pub head: usize,
    pub spearman_dist_dot: f64,
    pub mean_norm_diff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wqwk_correlation: Option<f64>,
    pub first_token_attention_mass: f64,
    pub chosen_scale: f64,
    pub scale_objective: f64,
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(format!("{} vs {}", xs.len(), ys.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(format!("{} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::Precondition(format!("spearman needs at least 3 pairs, got {}", xs.len())));
    }
    pearson(&average_ranks(xs), &average_ranks(ys)).map_err(|_| Error::DegenerateRanks)
}

/// Spearman correlation between normalized-space cosine distance and the
/// original attention logit over all admissible within-sequence pairs.
///
/// `normalized` must be `original` after [`crate::normalize::apply_normalization`].
pub fn head_distance_attention_correlation(
    original: &HeadTensors,
    normalized: &HeadTensors,
    direction: AttentionDirection,
    include_special: bool,
) -> Result<f64> {
    let pairs = attention_pairs(original, direction, include_special);
    let dists = pair_distances(&normalized.queries, &normalized.keys, &pairs);
    let logits = pair_logits(original, &pairs);
    spearman(&dists, &logits)
}

/// Mean pre-scale query norm minus mean pre-scale key norm.
pub fn norm_disparity(h: &HeadTensors) -> Result<f64> {
    let (q, k) = (h.query_tokens(), h.key_tokens());
    if q.is_empty() || k.is_empty() {
        return Err(Error::EmptyPopulation("norm disparity needs queries and keys"));
    }
    let mean = |ts: &[crate::model::TokenRecord]| ts.iter().map(|t| t.norm_prescale).sum::<f64>() / ts.len() as f64;
    Ok(mean(q) - mean(k))
}

/// Pearson correlation of the flattened query and key projection weights.
pub fn wqwk_redundancy(wq: &Matrix, wk: &Matrix) -> Result<f64> {
    if wq.rows() != wk.rows() || wq.cols() != wk.cols() {
        return Err(Error::DimensionMismatch(format!(
            "wq {}x{} vs wk {}x{}",
            wq.rows(),
            wq.cols(),
            wk.rows(),
            wk.cols()
        )));
    }
    pearson(wq.as_slice(), wk.as_slice())
}

/// Mean attention paid to each sequence's first token, excluding that token's own row.
pub fn null_attention_fraction(mats: &[AttentionMatrix]) -> Result<f64> {
    if mats.is_empty() {
        return Err(Error::EmptyPopulation("null attention needs at least one sequence"));
    }
    let (mut total, mut rows) = (0.0, 0usize);
    for m in mats {
        let Some((first_col, &first_pos)) = m.key_positions.iter().enumerate().min_by_key(|(_, &p)| p) else {
            continue;
        };
        for (i, &qp) in m.query_positions.iter().enumerate() {
            if qp == first_pos {
                continue;
            }
            total += m.weights.get(i, first_col);
            rows += 1;
        }
    }
    if rows == 0 {
        return Ok(0.0);
    }
    Ok(total / rows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dispersion {
    pub clusters: usize,
    pub noise: usize,
}

pub const DISPERSION_MIN_PTS: usize = 3;
pub const DISPERSION_EPS_FRACTION: f64 = 0.05;

/// `DISPERSION_EPS_FRACTION` of the bounding-box diagonal of `plot`.
pub fn default_dispersion_eps(plot: &Matrix) -> f64 {
    if plot.is_empty() {
        return 0.0;
    }
    let diag2: f64 = (0..plot.cols())
        .map(|k| {
            let (lo, hi) = plot.iter_rows().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| (l.min(r[k]), h.max(r[k])));
            (hi - lo).powi(2)
        })
        .sum();
    DISPERSION_EPS_FRACTION * diag2.sqrt()
}

/// DBSCAN cluster count over search-result coordinates. Neighborhoods are
/// closed balls (`distance <= eps`) that include the point itself.
pub fn search_dispersion(coords: &Matrix, eps: f64, min_pts: usize) -> Dispersion {
    let n = coords.rows();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| crate::matrix::squared_euclidean(coords.row(i), coords.row(j)).sqrt() <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut clusters = 0;
    for start in 0..n {
        if !core[start] || label[start].is_some() {
            continue;
        }
        let id = clusters;
        clusters += 1;
        label[start] = Some(id);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            if !core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if label[q].is_none() {
                    label[q] = Some(id);
                    stack.push(q);
                }
            }
        }
    }
    Dispersion { clusters, noise: label.iter().filter(|l| l.is_none()).count() }
}
