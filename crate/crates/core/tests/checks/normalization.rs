use qkatlas_core::attention::{head_attention, Mask};
use qkatlas_core::model::{AttentionDirection, HeadTensors};
use qkatlas_core::normalize::{apply_normalization, key_translation, search_scale, ScaleSearchConfig};
use qkatlas_core::synthetic::{self, HeadStyle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::oracle_objective;

/// Random heads with up to 200 queries in sequences of 5 to 40 tokens.
pub fn random_heads(count: usize, d: usize, seed: u64) -> Vec<(HeadTensors, AttentionDirection)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let total = rng.random_range(20..=200);
            let mut lens = Vec::new();
            let mut left = total;
            while left > 0 {
                let l = rng.random_range(5..=40).min(left);
                lens.push(l);
                left -= l;
            }
            let style = HeadStyle {
                query_scale: rng.random_range(0.2..4.0),
                key_scale: rng.random_range(0.2..4.0),
                query_offset: rng.random_range(-2.0..2.0),
                key_offset: rng.random_range(-2.0..2.0),
                first_key_boost: if rng.random_bool(0.3) { rng.random_range(0.0..3.0) } else { 0.0 },
            };
            let dir = if rng.random_bool(0.5) { AttentionDirection::Causal } else { AttentionDirection::Bidirectional };
            let tokens = synthetic::text_tokens(&lens, dir == AttentionDirection::Bidirectional);
            (synthetic::fill_head(0, i, &tokens, d, style, rng.random()), dir)
        })
        .collect()
}

/// Largest per-sequence max-abs attention change after the searched
/// normalization, over all heads.
pub fn attention_invariance(heads: &[(HeadTensors, AttentionDirection)]) -> f64 {
    let mut worst = 0.0f64;
    for (h, dir) in heads {
        let v = key_translation(h).unwrap();
        let s = search_scale(h, &v, &ScaleSearchConfig::default(), *dir).unwrap();
        let n = apply_normalization(h, &s.params).unwrap();
        for (a, b) in head_attention(h, Mask::from(*dir)).iter().zip(head_attention(&n, Mask::from(*dir))) {
            let diff = a.weights.as_slice().iter().zip(b.weights.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9, "l{} h{}: {diff}", h.layer, h.head);
            worst = worst.max(diff);
        }
    }
    worst
}

/// The chosen scale never does worse than c = 1, as scored by the
/// first-principles objective, and a rerun picks the same scale.
pub fn scale_search_is_monotone(heads: &[(HeadTensors, AttentionDirection)]) {
    let cfg = ScaleSearchConfig::default();
    for (h, dir) in heads {
        let v = key_translation(h).unwrap();
        let first = search_scale(h, &v, &cfg, *dir).unwrap();
        let at_one = oracle_objective(h, *dir == AttentionDirection::Causal, 0.0);
        assert!(first.objective <= at_one + 1e-9, "h{}: {} > {at_one}", h.head, first.objective);
        let again = search_scale(h, &v, &cfg, *dir).unwrap();
        assert_eq!(first, again);
    }
}
