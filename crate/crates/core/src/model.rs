//! Domain model shared by every stage: model descriptors, token metadata and
//! per-head query/key tensors.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionDirection {
    Bidirectional,
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Key,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub model_id: String,
    pub modality: Modality,
    pub attention_direction: AttentionDirection,
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub head_dim: usize,
}

impl ModelDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.heads_per_layer == 0 {
            return Err(Error::InvalidDescriptor("model must have at least one head".into()));
        }
        if self.head_dim == 0 {
            return Err(Error::InvalidDescriptor("head_dim must be positive".into()));
        }
        if self.attention_direction == AttentionDirection::Causal && self.modality == Modality::Image {
            return Err(Error::InvalidDescriptor("causal attention is only supported for text models".into()));
        }
        Ok(())
    }

    pub fn head_count(&self) -> usize {
        self.num_layers * self.heads_per_layer
    }
}

/// Metadata for one query or key token instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: usize,
    pub sequence_id: u32,
    pub position: usize,
    pub role: Role,
    pub display_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_rgb: Option<[u8; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_label: Option<String>,
    #[serde(default)]
    pub is_special: bool,
    /// L2 norm of the token's vector before any normalization.
    #[serde(default)]
    pub norm_prescale: f64,
}

/// All query and key vectors for one `(layer, head)`.
///
/// Queries occupy token ids `0..n_q`, keys `n_q..n_q + n_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTensors {
    pub layer: usize,
    pub head: usize,
    pub queries: Matrix,
    pub keys: Matrix,
    pub tokens: Vec<TokenRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wq: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wk: Option<Matrix>,
}

/// Positions and row indices of one sequence inside a head, ordered by position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub sequence_id: u32,
    pub positions: Vec<usize>,
    /// Row indices into `HeadTensors::queries`.
    pub query_rows: Vec<usize>,
    /// Row indices into `HeadTensors::keys`.
    pub key_rows: Vec<usize>,
    pub key_is_special: Vec<bool>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn query_token_ids(&self) -> Vec<usize> {
        self.query_rows.clone()
    }

    pub fn key_token_ids(&self, n_q: usize) -> Vec<usize> {
        self.key_rows.iter().map(|r| r + n_q).collect()
    }
}

/// Query `(position, row)` and key `(position, row, special)` entries of one sequence.
type SequenceSlots = (Vec<(usize, usize)>, Vec<(usize, usize, bool)>);

impl HeadTensors {
    pub fn n_queries(&self) -> usize {
        self.queries.rows()
    }

    pub fn n_keys(&self) -> usize {
        self.keys.rows()
    }

    pub fn dim(&self) -> usize {
        self.queries.cols()
    }

    pub fn token_count(&self) -> usize {
        self.n_queries() + self.n_keys()
    }

    pub fn query_tokens(&self) -> &[TokenRecord] {
        &self.tokens[..self.n_queries().min(self.tokens.len())]
    }

    pub fn key_tokens(&self) -> &[TokenRecord] {
        &self.tokens[self.n_queries().min(self.tokens.len())..]
    }

    /// Queries stacked over keys, in token-id order.
    pub fn joint_points(&self) -> Matrix {
        self.queries.vstack(&self.keys)
    }

    /// Per-sequence layouts sorted by sequence id. Assumes a head that
    /// passes [`validate_head`].
    pub fn sequences(&self) -> Vec<SequenceLayout> {
        let n_q = self.n_queries();
        let mut by_seq: BTreeMap<u32, SequenceSlots> = BTreeMap::new();
        for t in &self.tokens {
            let entry = by_seq.entry(t.sequence_id).or_default();
            match t.role {
                Role::Query => entry.0.push((t.position, t.token_id)),
                Role::Key => entry.1.push((t.position, t.token_id - n_q, t.is_special)),
            }
        }
        by_seq
            .into_iter()
            .map(|(sequence_id, (mut qs, mut ks))| {
                qs.sort_unstable();
                ks.sort_unstable();
                SequenceLayout {
                    sequence_id,
                    positions: qs.iter().map(|&(p, _)| p).collect(),
                    query_rows: qs.iter().map(|&(_, r)| r).collect(),
                    key_rows: ks.iter().map(|&(_, r, _)| r).collect(),
                    key_is_special: ks.iter().map(|&(_, _, s)| s).collect(),
                }
            })
            .collect()
    }
}

/// Translation `v` added to keys and scale `c` applied as `q * c`, `(k + v) / c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub translation: Vec<f64>,
    pub scale: f64,
}

impl NormalizationParams {
    pub fn identity(dim: usize) -> Self {
        Self { translation: vec![0.0; dim], scale: 1.0 }
    }
}

/// A single broken invariant found by [`validate_head`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Violation {
    #[error("head dimension {found} does not match model head_dim {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("queries have {queries} columns but keys have {keys}")]
    QueryKeyWidth { queries: usize, keys: usize },
    #[error("{tokens} token records for {rows} query/key rows")]
    TokenCount { tokens: usize, rows: usize },
    #[error("token at index {index} has token_id {found}")]
    TokenId { index: usize, found: usize },
    #[error("token {token_id} has role {found:?}, expected {expected:?}")]
    TokenRole { token_id: usize, expected: Role, found: Role },
    #[error("duplicate token (sequence {sequence_id}, position {position}, {role:?})")]
    DuplicateToken { sequence_id: u32, position: usize, role: Role },
    #[error("sequence {sequence_id}: query positions do not align with key positions")]
    UnalignedSequence { sequence_id: u32 },
    #[error("non-finite {which} entry at row {row}, column {col}")]
    NonFinite { which: &'static str, row: usize, col: usize },
    #[error("token {token_id} has invalid norm_prescale {value}")]
    BadNorm { token_id: usize, value: f64 },
    #[error("token {token_id}: {reason}")]
    PatchCoordinates { token_id: usize, reason: &'static str },
    #[error("projection weights: {0}")]
    Weights(String),
}

/// Every broken [`HeadTensors`] invariant. Empty means the head is valid for `model`.
pub fn validate_head(h: &HeadTensors, model: &ModelDescriptor) -> Vec<Violation> {
    let mut out = Vec::new();
    let n_q = h.n_queries();
    let n_k = h.n_keys();

    if h.queries.cols() != model.head_dim {
        out.push(Violation::DimMismatch { expected: model.head_dim, found: h.queries.cols() });
    }
    if h.keys.cols() != h.queries.cols() {
        out.push(Violation::QueryKeyWidth { queries: h.queries.cols(), keys: h.keys.cols() });
    }
    for (which, m) in [("query", &h.queries), ("key", &h.keys)] {
        for (row, r) in m.iter_rows().enumerate() {
            for (col, x) in r.iter().enumerate() {
                if !x.is_finite() {
                    out.push(Violation::NonFinite { which, row, col });
                }
            }
        }
    }

    if h.tokens.len() != n_q + n_k {
        out.push(Violation::TokenCount { tokens: h.tokens.len(), rows: n_q + n_k });
        return out;
    }

    let mut seen = HashSet::new();
    let mut positions: BTreeMap<u32, [Vec<usize>; 2]> = BTreeMap::new();
    for (index, t) in h.tokens.iter().enumerate() {
        if t.token_id != index {
            out.push(Violation::TokenId { index, found: t.token_id });
        }
        let expected = if index < n_q { Role::Query } else { Role::Key };
        if t.role != expected {
            out.push(Violation::TokenRole { token_id: t.token_id, expected, found: t.role });
        }
        if !seen.insert((t.sequence_id, t.position, t.role)) {
            out.push(Violation::DuplicateToken { sequence_id: t.sequence_id, position: t.position, role: t.role });
        }
        positions.entry(t.sequence_id).or_default()[t.role as usize].push(t.position);
        if !(t.norm_prescale.is_finite() && t.norm_prescale >= 0.0) {
            out.push(Violation::BadNorm { token_id: t.token_id, value: t.norm_prescale });
        }
        let has_coords = t.row.is_some() && t.col.is_some();
        match model.modality {
            Modality::Text if t.row.is_some() || t.col.is_some() => out.push(Violation::PatchCoordinates {
                token_id: t.token_id,
                reason: "text token carries image row/col",
            }),
            Modality::Image if !has_coords && !t.is_special => out.push(Violation::PatchCoordinates {
                token_id: t.token_id,
                reason: "image patch is missing row/col",
            }),
            _ => {}
        }
    }
    for (sequence_id, [mut qp, mut kp]) in positions {
        qp.sort_unstable();
        kp.sort_unstable();
        if qp != kp {
            out.push(Violation::UnalignedSequence { sequence_id });
        }
    }

    match (&h.wq, &h.wk) {
        (None, None) => {}
        (Some(wq), Some(wk)) => {
            if wq.rows() != wk.rows() || wq.cols() != wk.cols() {
                out.push(Violation::Weights(format!(
                    "wq is {}x{} but wk is {}x{}",
                    wq.rows(),
                    wq.cols(),
                    wk.rows(),
                    wk.cols()
                )));
            }
            if wq.as_slice().iter().chain(wk.as_slice()).any(|x| !x.is_finite()) {
                out.push(Violation::Weights("non-finite entry".into()));
            }
        }
        _ => out.push(Violation::Weights("wq and wk must be provided together".into())),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn fixture() -> (HeadTensors, ModelDescriptor) {
        let model = synthetic::text_model("fixture", 1, 1, 4, AttentionDirection::Bidirectional);
        let h = synthetic::gaussian_head(0, 0, &[3, 4], 4, 1.0, 1.0, 7);
        (h, model)
    }

    #[test]
    fn well_formed_head_has_no_violations() {
        let (h, m) = fixture();
        assert_eq!(validate_head(&h, &m), vec![]);
    }

    #[test]
    fn nan_entry_is_named() {
        let (mut h, m) = fixture();
        h.queries.set(2, 1, f64::NAN);
        let v = validate_head(&h, &m);
        assert_eq!(v, vec![Violation::NonFinite { which: "query", row: 2, col: 1 }]);
    }

    #[test]
    fn dropped_token_is_detected() {
        let (mut h, m) = fixture();
        h.tokens.pop();
        let v = validate_head(&h, &m);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::TokenCount { tokens: 13, rows: 14 }));
    }

    #[test]
    fn validation_is_pure() {
        let (mut h, m) = fixture();
        h.keys.set(0, 0, f64::INFINITY);
        assert_eq!(validate_head(&h, &m), validate_head(&h, &m));
    }

    #[test]
    fn misaligned_positions_and_dim() {
        let (mut h, mut m) = fixture();
        let n_q = h.n_queries();
        h.tokens[n_q].position = 99;
        m.head_dim = 8;
        let v = validate_head(&h, &m);
        assert!(v.contains(&Violation::DimMismatch { expected: 8, found: 4 }));
        assert!(v.iter().any(|x| matches!(x, Violation::UnalignedSequence { .. })));
    }

    #[test]
    fn causal_image_descriptor_rejected() {
        let mut m = synthetic::text_model("m", 1, 1, 2, AttentionDirection::Causal);
        assert!(m.validate().is_ok());
        m.modality = Modality::Image;
        assert!(m.validate().is_err());
    }

    #[test]
    fn sequences_follow_position_order() {
        let (h, _) = fixture();
        let seqs = h.sequences();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[1].positions, vec![0, 1, 2, 3]);
        assert_eq!(seqs[1].query_rows, vec![3, 4, 5, 6]);
        assert_eq!(seqs[1].key_rows, vec![3, 4, 5, 6]);
    }
}
