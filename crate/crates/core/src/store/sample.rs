//! Whole-sequence sampling to bound projection cost.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadTensors, Role, TokenRecord};

pub const DEFAULT_SAMPLE_CAP: usize = 4000;
pub const MIN_SAMPLE_CAP: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub head: HeadTensors,
    /// Token id in the source head of every retained token, in new token-id order.
    pub source_token_ids: Vec<usize>,
    /// Set when even the smallest sequence exceeded the cap and one was kept anyway.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub cap: usize,
    pub source_token_ids: Vec<usize>,
    pub flagged: bool,
}

/// Keep whole sequences, visited in seeded random order, while the total
/// token count (queries plus keys) stays within `cap`.
///
/// Heads already within the cap come back unchanged. Retained sequences keep
/// their original relative order and token ids are renumbered densely.
pub fn sample_cap(h: &HeadTensors, cap: usize, seed: u64) -> Result<Sampled> {
    if cap < MIN_SAMPLE_CAP {
        return Err(Error::InvalidConfig(format!("sample cap must be at least {MIN_SAMPLE_CAP}, got {cap}")));
    }
    if h.token_count() <= cap {
        return Ok(Sampled { head: h.clone(), source_token_ids: (0..h.token_count()).collect(), flagged: false });
    }
    let layouts = h.sequences();
    let mut order: Vec<usize> = (0..layouts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut keep = Vec::new();
    let mut total = 0;
    for &i in &order {
        let size = layouts[i].query_rows.len() + layouts[i].key_rows.len();
        if total + size > cap {
            break;
        }
        total += size;
        keep.push(i);
    }
    let flagged = keep.is_empty();
    if flagged {
        keep.push(order[0]);
    }
    keep.sort_unstable();

    let n_q = h.n_queries();
    let mut q_rows = Vec::new();
    let mut k_rows = Vec::new();
    for &i in &keep {
        q_rows.extend(&layouts[i].query_rows);
        k_rows.extend(&layouts[i].key_rows);
    }
    let source_token_ids: Vec<usize> = q_rows.iter().copied().chain(k_rows.iter().map(|r| r + n_q)).collect();
    let tokens: Vec<TokenRecord> = source_token_ids
        .iter()
        .enumerate()
        .map(|(new_id, &old)| TokenRecord { token_id: new_id, ..h.tokens[old].clone() })
        .collect();
    debug_assert!(tokens[..q_rows.len()].iter().all(|t| t.role == Role::Query));
    Ok(Sampled {
        head: HeadTensors {
            layer: h.layer,
            head: h.head,
            queries: h.queries.select_rows(&q_rows),
            keys: h.keys.select_rows(&k_rows),
            tokens,
            wq: h.wq.clone(),
            wk: h.wk.clone(),
        },
        source_token_ids,
        flagged,
    })
}
