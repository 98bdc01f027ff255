//! Attention arithmetic: bilinear scores, masked softmax, edge extraction,
//! hiding with re-normalization and aggregate patterns.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::model::{AttentionDirection, HeadTensors, SequenceLayout};
use crate::par;

/// Default side length of [`aggregate_pattern`] output.
pub const AGGREGATE_MAX_LEN: usize = 64;
/// Image View edge-graph threshold.
pub const IMAGE_EDGE_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mask {
    None,
    Causal,
}

impl From<AttentionDirection> for Mask {
    fn from(d: AttentionDirection) -> Self {
        match d {
            AttentionDirection::Bidirectional => Mask::None,
            AttentionDirection::Causal => Mask::Causal,
        }
    }
}

/// Attention of one sequence within one head. Rows are queries, columns keys,
/// both in position order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    pub sequence_id: u32,
    pub mask: Mask,
    pub query_positions: Vec<usize>,
    pub key_positions: Vec<usize>,
    pub query_tokens: Vec<usize>,
    pub key_tokens: Vec<usize>,
    pub key_is_special: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Matrix>,
    pub weights: Matrix,
}

impl AttentionMatrix {
    /// Whether the causal mask (if any) lets query row `i` see key column `j`.
    pub fn admissible(&self, i: usize, j: usize) -> bool {
        match self.mask {
            Mask::None => true,
            Mask::Causal => self.key_positions[j] <= self.query_positions[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionEdge {
    pub query_token: usize,
    pub key_token: usize,
    pub weight: f64,
    /// The key is a special token (e.g. CLS) rather than a content token.
    pub is_cls: bool,
}

/// `<q_i, k_j> / sqrt(d)` for every query/key row pair.
pub fn raw_scores(q_rows: &Matrix, k_rows: &Matrix, d: usize) -> Result<Matrix> {
    if d == 0 || q_rows.cols() != d || k_rows.cols() != d {
        return Err(Error::DimensionMismatch(format!(
            "queries {} wide, keys {} wide, d = {d}",
            q_rows.cols(),
            k_rows.cols()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(q_rows.rows(), k_rows.rows());
    for i in 0..q_rows.rows() {
        let q = q_rows.row(i);
        for j in 0..k_rows.rows() {
            out.set(i, j, dot(q, k_rows.row(j)) * scale);
        }
    }
    Ok(out)
}

/// Row-wise softmax. Under [`Mask::Causal`] column `j > i` is excluded and set to 0.
pub fn softmax_attention(scores: &Matrix, mask: Mask) -> Matrix {
    let mut w = Matrix::zeros(scores.rows(), scores.cols());
    for i in 0..scores.rows() {
        let s = scores.row(i);
        let limit = match mask {
            Mask::None => s.len(),
            Mask::Causal => (i + 1).min(s.len()),
        };
        let max = s[..limit].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = w.row_mut(i);
        let mut total = 0.0;
        for j in 0..limit {
            let e = (s[j] - max).exp();
            row[j] = e;
            total += e;
        }
        for x in &mut row[..limit] {
            *x /= total;
        }
    }
    w
}

/// Attention for one sequence of `head`, computed from its stored vectors.
pub fn sequence_attention(head: &HeadTensors, layout: &SequenceLayout, mask: Mask) -> AttentionMatrix {
    let q = head.queries.select_rows(&layout.query_rows);
    let k = head.keys.select_rows(&layout.key_rows);
    let scores = raw_scores(&q, &k, head.dim()).expect("validated head has matching widths");
    let weights = softmax_attention(&scores, mask);
    AttentionMatrix {
        sequence_id: layout.sequence_id,
        mask,
        query_positions: layout.positions.clone(),
        key_positions: layout.positions.clone(),
        query_tokens: layout.query_token_ids(),
        key_tokens: layout.key_token_ids(head.n_queries()),
        key_is_special: layout.key_is_special.clone(),
        scores: Some(scores),
        weights,
    }
}

/// Attention for every sequence of `head`, in sequence-id order.
pub fn head_attention(head: &HeadTensors, mask: Mask) -> Vec<AttentionMatrix> {
    let layouts = head.sequences();
    par::map_slice(&layouts, |l| sequence_attention(head, l, mask))
}

fn edge(a: &AttentionMatrix, i: usize, j: usize) -> AttentionEdge {
    AttentionEdge {
        query_token: a.query_tokens[i],
        key_token: a.key_tokens[j],
        weight: a.weights.get(i, j),
        is_cls: a.key_is_special[j],
    }
}

/// The `k` strongest edges out of every query row.
///
/// Only admissible keys with positive weight are candidates, so causally
/// masked and hidden keys never appear. Ties go to the lower key position.
pub fn top_k_edges(a: &AttentionMatrix, k: usize) -> Vec<AttentionEdge> {
    let mut out = Vec::new();
    for i in 0..a.weights.rows() {
        let mut cand: Vec<usize> =
            (0..a.weights.cols()).filter(|&j| a.admissible(i, j) && a.weights.get(i, j) > 0.0).collect();
        cand.sort_by(|&x, &y| {
            a.weights
                .get(i, y)
                .total_cmp(&a.weights.get(i, x))
                .then(a.key_positions[x].cmp(&a.key_positions[y]))
        });
        out.extend(cand.into_iter().take(k).map(|j| edge(a, i, j)));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Renormalized {
    pub matrix: AttentionMatrix,
    /// Query positions whose surviving attention mass was zero; their rows are all zeros.
    pub zero_rows: Vec<usize>,
}

/// Drop hidden query rows, zero hidden key columns and rescale each
/// remaining row to sum to one.
pub fn renormalize_hidden(
    a: &AttentionMatrix,
    hidden_keys: &BTreeSet<usize>,
    hidden_queries: &BTreeSet<usize>,
) -> Renormalized {
    let keep: Vec<usize> =
        (0..a.weights.rows()).filter(|&i| !hidden_queries.contains(&a.query_positions[i])).collect();
    let mut weights = a.weights.select_rows(&keep);
    let mut zero_rows = Vec::new();
    for (r, &i) in keep.iter().enumerate() {
        let row = weights.row_mut(r);
        for (j, w) in row.iter_mut().enumerate() {
            if hidden_keys.contains(&a.key_positions[j]) {
                *w = 0.0;
            }
        }
        let mass: f64 = row.iter().sum();
        if mass > 0.0 {
            row.iter_mut().for_each(|w| *w /= mass);
        } else {
            row.iter_mut().for_each(|w| *w = 0.0);
            zero_rows.push(a.query_positions[i]);
        }
    }
    let matrix = AttentionMatrix {
        sequence_id: a.sequence_id,
        mask: a.mask,
        query_positions: keep.iter().map(|&i| a.query_positions[i]).collect(),
        key_positions: a.key_positions.clone(),
        query_tokens: keep.iter().map(|&i| a.query_tokens[i]).collect(),
        key_tokens: a.key_tokens.clone(),
        key_is_special: a.key_is_special.clone(),
        scores: a.scores.as_ref().map(|s| s.select_rows(&keep)),
        weights,
    };
    Renormalized { matrix, zero_rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatePattern {
    pub size: usize,
    /// `mean[qpos][kpos]` over the sequences that contain both positions.
    pub mean: Matrix,
    /// Number of sequences contributing to each cell, row-major.
    pub counts: Vec<u32>,
}

/// Mean attention by `(query position, key position)` across sequences,
/// truncated to `max_len` positions.
pub fn aggregate_pattern(mats: &[AttentionMatrix], max_len: usize) -> Result<AggregatePattern> {
    if mats.is_empty() {
        return Err(Error::EmptyPopulation("aggregate pattern needs at least one sequence"));
    }
    let longest = mats
        .iter()
        .flat_map(|m| m.query_positions.iter().chain(&m.key_positions))
        .map(|&p| p + 1)
        .max()
        .unwrap_or(0);
    let size = longest.min(max_len);
    let mut sum = Matrix::zeros(size, size);
    let mut counts = vec![0u32; size * size];
    for m in mats {
        for (i, &qp) in m.query_positions.iter().enumerate() {
            if qp >= size {
                continue;
            }
            for (j, &kp) in m.key_positions.iter().enumerate() {
                if kp >= size {
                    continue;
                }
                sum.set(qp, kp, sum.get(qp, kp) + m.weights.get(i, j));
                counts[qp * size + kp] += 1;
            }
        }
    }
    let mut mean = sum;
    for qp in 0..size {
        for kp in 0..size {
            let c = counts[qp * size + kp];
            if c > 0 {
                mean.set(qp, kp, mean.get(qp, kp) / f64::from(c));
            }
        }
    }
    Ok(AggregatePattern { size, mean, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageEdgeMode {
    /// One edge per patch, to its highest-weight key.
    Strongest,
    /// Every edge strictly above the threshold.
    Threshold,
}

pub fn image_edges(a: &AttentionMatrix, mode: ImageEdgeMode, threshold: f64) -> Vec<AttentionEdge> {
    let mut out = Vec::new();
    for i in 0..a.weights.rows() {
        match mode {
            ImageEdgeMode::Strongest => {
                let best = (0..a.weights.cols()).filter(|&j| a.admissible(i, j)).fold(None, |best, j| match best {
                    Some(b) if a.weights.get(i, b) >= a.weights.get(i, j) => Some(b),
                    _ => Some(j),
                });
                if let Some(j) = best {
                    out.push(edge(a, i, j));
                }
            }
            ImageEdgeMode::Threshold => {
                out.extend((0..a.weights.cols()).filter(|&j| a.weights.get(i, j) > threshold).map(|j| edge(a, i, j)))
            }
        }
    }
    out
}
