//! Synthetic heads and export bundles for tests, benchmarks and demos.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::matrix::{norm, Matrix};
use crate::model::{AttentionDirection, HeadTensors, Modality, ModelDescriptor, Role, TokenRecord};
use crate::store::{Bundle, SequenceInfo};

const VOCAB: [&str; 12] = ["the", "cat", "sat", "on", "mat", "then", "there", "a", "dog", "ran", "thin", "path"];

pub fn text_model(id: &str, layers: usize, heads: usize, d: usize, direction: AttentionDirection) -> ModelDescriptor {
    ModelDescriptor {
        model_id: id.to_string(),
        modality: Modality::Text,
        attention_direction: direction,
        num_layers: layers,
        heads_per_layer: heads,
        head_dim: d,
    }
}

pub fn image_model(id: &str, layers: usize, heads: usize, d: usize) -> ModelDescriptor {
    ModelDescriptor {
        model_id: id.to_string(),
        modality: Modality::Image,
        attention_direction: AttentionDirection::Bidirectional,
        num_layers: layers,
        heads_per_layer: heads,
        head_dim: d,
    }
}

pub fn word(sequence: usize, position: usize) -> &'static str {
    VOCAB[(sequence * 7 + position * 5) % VOCAB.len()]
}

fn with_roles(base: Vec<TokenRecord>) -> Vec<TokenRecord> {
    let keys: Vec<TokenRecord> = base.iter().cloned().map(|t| TokenRecord { role: Role::Key, ..t }).collect();
    base.into_iter().chain(keys).enumerate().map(|(i, t)| TokenRecord { token_id: i, ..t }).collect()
}

/// Query block then key block for sequences of the given lengths.
/// With `special_first`, position 0 of each sequence is a `[CLS]` token.
pub fn text_tokens(seq_lens: &[usize], special_first: bool) -> Vec<TokenRecord> {
    let mut base = Vec::new();
    for (s, &len) in seq_lens.iter().enumerate() {
        for p in 0..len {
            let special = special_first && p == 0;
            base.push(TokenRecord {
                token_id: 0,
                sequence_id: s as u32,
                position: p,
                role: Role::Query,
                display_text: if special { "[CLS]".into() } else { word(s, p).into() },
                row: None,
                col: None,
                patch_rgb: None,
                semantic_label: None,
                is_special: special,
                norm_prescale: 0.0,
            });
        }
    }
    with_roles(base)
}

/// `images` square patch grids of side `grid`, each preceded by a CLS token.
pub fn image_tokens(images: usize, grid: usize) -> Vec<TokenRecord> {
    let mut base = Vec::new();
    for s in 0..images {
        for p in 0..=grid * grid {
            let cls = p == 0;
            let (r, c) = ((p.saturating_sub(1) / grid) as u32, (p.saturating_sub(1) % grid) as u32);
            base.push(TokenRecord {
                token_id: 0,
                sequence_id: s as u32,
                position: p,
                role: Role::Query,
                display_text: if cls { "<CLS>".into() } else { format!("patch {r},{c}") },
                row: (!cls).then_some(r),
                col: (!cls).then_some(c),
                patch_rgb: (!cls).then(|| [(40 * r + 17 * s as u32) as u8, (40 * c) as u8, 128]),
                semantic_label: (!cls).then(|| if r < grid as u32 / 2 { "sky".to_string() } else { "ground".to_string() }),
                is_special: cls,
                norm_prescale: 0.0,
            });
        }
    }
    with_roles(base)
}

/// Shape of a synthetic head's query/key clouds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadStyle {
    pub query_scale: f64,
    pub key_scale: f64,
    /// Added to every query coordinate.
    pub query_offset: f64,
    /// Added to every key coordinate.
    pub key_offset: f64,
    /// Keys at position 0 are pushed this far along the query mean direction.
    pub first_key_boost: f64,
}

impl HeadStyle {
    pub fn isotropic() -> Self {
        Self { query_scale: 1.0, key_scale: 1.0, query_offset: 0.0, key_offset: 0.0, first_key_boost: 0.0 }
    }

    /// Query norms an order of magnitude above key norms, with a strong first-token sink.
    pub fn decoder_like() -> Self {
        Self { query_scale: 3.0, key_scale: 0.3, query_offset: 1.5, key_offset: -0.2, first_key_boost: 4.0 }
    }
}

pub fn head_seed(seed: u64, layer: usize, head: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((layer as u64) << 32 | head as u64)
}

/// Fill query/key rows for `tokens` with Gaussian vectors shaped by `style`.
pub fn fill_head(layer: usize, head: usize, tokens: &[TokenRecord], d: usize, style: HeadStyle, seed: u64) -> HeadTensors {
    let mut rng = ChaCha8Rng::seed_from_u64(head_seed(seed, layer, head));
    let n_q = tokens.iter().filter(|t| t.role == Role::Query).count();
    let n_k = tokens.len() - n_q;
    let mut sample = |n: usize, scale: f64, offset: f64| {
        Matrix::from_vec(
            n,
            d,
            (0..n * d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z + offset
                })
                .collect(),
        )
    };
    let queries = sample(n_q, style.query_scale, style.query_offset);
    let mut keys = sample(n_k, style.key_scale, style.key_offset);
    if style.first_key_boost != 0.0 {
        let mean = queries.column_means();
        let m = norm(&mean);
        if m > 0.0 {
            for (r, t) in tokens[n_q..].iter().enumerate() {
                if t.position == 0 {
                    for (k, mu) in keys.row_mut(r).iter_mut().zip(&mean) {
                        *k += style.first_key_boost * mu / m;
                    }
                }
            }
        }
    }
    let mut h = HeadTensors { layer, head, queries, keys, tokens: tokens.to_vec(), wq: None, wk: None };
    refresh_norms(&mut h);
    h
}

/// Gaussian text head over sequences of the given lengths, no special tokens.
pub fn gaussian_head(layer: usize, head: usize, seq_lens: &[usize], d: usize, q_scale: f64, k_scale: f64, seed: u64) -> HeadTensors {
    let style = HeadStyle { query_scale: q_scale, key_scale: k_scale, ..HeadStyle::isotropic() };
    fill_head(layer, head, &text_tokens(seq_lens, false), d, style, seed)
}

/// Set every token's `norm_prescale` to the L2 norm of its current row.
pub fn refresh_norms(h: &mut HeadTensors) {
    let norms: Vec<f64> = h.queries.row_norms().into_iter().chain(h.keys.row_norms()).collect();
    for (t, n) in h.tokens.iter_mut().zip(norms) {
        t.norm_prescale = n;
    }
}

/// Random `rows x cols` projection weights; with `redundancy` near 1 the key
/// weights closely track the query weights.
pub fn projection_weights(rows: usize, cols: usize, redundancy: f64, seed: u64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let wq: Vec<f64> = (0..rows * cols).map(|_| draw()).collect();
    let wk: Vec<f64> = wq.iter().map(|q| redundancy * q + (1.0 - redundancy) * draw()).collect();
    (Matrix::from_vec(rows, cols, wq), Matrix::from_vec(rows, cols, wk))
}

fn sequence_table(tokens: &[TokenRecord], modality: Modality) -> Vec<SequenceInfo> {
    let mut seqs: Vec<SequenceInfo> = Vec::new();
    for t in tokens.iter().filter(|t| t.role == Role::Query) {
        match seqs.last_mut() {
            Some(s) if s.sequence_id == t.sequence_id => s.length += 1,
            _ => seqs.push(SequenceInfo { sequence_id: t.sequence_id, length: 1, text: None, image: None }),
        }
    }
    for s in &mut seqs {
        match modality {
            Modality::Text => {
                let words: Vec<&str> = tokens
                    .iter()
                    .filter(|t| t.role == Role::Query && t.sequence_id == s.sequence_id)
                    .map(|t| t.display_text.as_str())
                    .collect();
                s.text = Some(words.join(" "));
            }
            Modality::Image => s.image = Some(format!("image_{}.png", s.sequence_id)),
        }
    }
    seqs
}

/// A complete text export with `layers x heads` heads.
pub fn text_bundle(model: ModelDescriptor, seq_lens: &[usize], style: HeadStyle, with_weights: bool, seed: u64) -> Bundle {
    let special_first = model.attention_direction == AttentionDirection::Bidirectional;
    let tokens = text_tokens(seq_lens, special_first);
    bundle_from_tokens(model, "synthetic-text", tokens, style, with_weights, seed)
}

pub fn image_bundle(model: ModelDescriptor, images: usize, grid: usize, with_weights: bool, seed: u64) -> Bundle {
    let tokens = image_tokens(images, grid);
    bundle_from_tokens(model, "synthetic-images", tokens, HeadStyle::isotropic(), with_weights, seed)
}

fn bundle_from_tokens(
    model: ModelDescriptor,
    dataset: &str,
    tokens: Vec<TokenRecord>,
    style: HeadStyle,
    with_weights: bool,
    seed: u64,
) -> Bundle {
    let d = model.head_dim;
    let mut heads = Vec::new();
    for layer in 0..model.num_layers {
        for head in 0..model.heads_per_layer {
            let mut h = fill_head(layer, head, &tokens, d, style, seed);
            if with_weights {
                let redundancy = if layer == 0 { 0.95 } else { 0.1 };
                let (wq, wk) = projection_weights(d, 2 * d, redundancy, head_seed(seed ^ 0xABCD, layer, head));
                h.wq = Some(wq);
                h.wk = Some(wk);
            }
            heads.push(h);
        }
    }
    let sequences = sequence_table(&tokens, model.modality);
    Bundle {
        model,
        dataset: dataset.to_string(),
        sequences,
        tokens: tokens.into_iter().map(|t| TokenRecord { norm_prescale: 0.0, ..t }).collect(),
        heads,
        exporter: serde_json::json!({ "generator": "synthetic", "seed": seed }),
    }
}
