//! Each routine against an independent brute-force implementation.

use std::collections::BTreeSet;

use qkatlas_core::attention::{image_edges, renormalize_hidden, top_k_edges, AttentionEdge, AttentionMatrix, ImageEdgeMode, Mask};
use qkatlas_core::diagnostics::{norm_disparity, spearman, wqwk_redundancy};
use qkatlas_core::matrix::Matrix;
use qkatlas_core::model::{AttentionDirection, HeadTensors, Role};
use qkatlas_core::normalize::{key_translation, search_scale, ScaleSearchConfig};
use qkatlas_core::synthetic::{self, HeadStyle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_attention(rng: &mut ChaCha8Rng) -> AttentionMatrix {
    let n = rng.random_range(1..9);
    let mask = if rng.random_bool(0.5) { Mask::Causal } else { Mask::None };
    let mut weights = Matrix::zeros(n, n);
    for i in 0..n {
        let limit = if mask == Mask::Causal { i + 1 } else { n };
        // Integer logits produce exact ties often enough to exercise tie-breaking.
        let e: Vec<f64> = (0..limit).map(|_| f64::from(rng.random_range(-2i32..3)).exp()).collect();
        let s: f64 = e.iter().sum();
        for (j, x) in e.iter().enumerate() {
            weights.set(i, j, x / s);
        }
    }
    AttentionMatrix {
        sequence_id: 0,
        mask,
        query_positions: (0..n).collect(),
        key_positions: (0..n).collect(),
        query_tokens: (0..n).collect(),
        key_tokens: (n..2 * n).collect(),
        key_is_special: (0..n).map(|j| j == 0 && rng.random_bool(0.5)).collect(),
        scores: None,
        weights,
    }
}

fn oracle_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            let below = xs.iter().filter(|y| *y < x).count() as f64;
            let equal = xs.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn oracle_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().rev().sum::<f64>() / n;
    let my = ys.iter().rev().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).rev().map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().rev().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().rev().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn spearman_matches(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for _ in 0..instances {
        let n = rng.random_range(3..30);
        let xs: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8))).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let (rx, ry) = (oracle_ranks(&xs), oracle_ranks(&ys));
        match spearman(&xs, &ys) {
            Ok(r) => {
                assert!((r - oracle_pearson(&rx, &ry)).abs() < 1e-12);
                checked += 1;
            }
            Err(_) => assert!(rx.iter().all(|r| *r == rx[0])),
        }
    }
    assert!(checked > instances * 9 / 10);
}

fn oracle_top_k(a: &AttentionMatrix, k: usize) -> Vec<AttentionEdge> {
    let n = a.weights.cols();
    let mut out = Vec::new();
    for i in 0..a.weights.rows() {
        let mut taken = vec![false; n];
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for j in 0..n {
                let visible = a.mask == Mask::None || a.key_positions[j] <= a.query_positions[i];
                let w = a.weights.get(i, j);
                if taken[j] || !visible || w <= 0.0 {
                    continue;
                }
                if best.is_none_or(|b| w > a.weights.get(i, b)) {
                    best = Some(j);
                }
            }
            let Some(j) = best else { break };
            taken[j] = true;
            out.push(AttentionEdge {
                query_token: a.query_tokens[i],
                key_token: a.key_tokens[j],
                weight: a.weights.get(i, j),
                is_cls: a.key_is_special[j],
            });
        }
    }
    out
}

pub fn top_k_matches(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..instances {
        let a = random_attention(&mut rng);
        let k = rng.random_range(1..4);
        assert_eq!(top_k_edges(&a, k), oracle_top_k(&a, k));
    }
}

pub fn renormalize_matches(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..instances {
        let a = random_attention(&mut rng);
        let n = a.weights.rows();
        let hidden_keys: BTreeSet<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
        let hidden_queries: BTreeSet<usize> = (0..n).filter(|_| rng.random_bool(0.2)).collect();
        let got = renormalize_hidden(&a, &hidden_keys, &hidden_queries);
        let mut row = 0;
        let mut zero_rows = Vec::new();
        for i in 0..n {
            if hidden_queries.contains(&i) {
                continue;
            }
            let kept: Vec<f64> = (0..n).map(|j| if hidden_keys.contains(&j) { 0.0 } else { a.weights.get(i, j) }).collect();
            let mass: f64 = kept.iter().sum();
            if mass == 0.0 {
                zero_rows.push(i);
            }
            for (j, w) in kept.iter().enumerate() {
                let want = if mass > 0.0 { w / mass } else { 0.0 };
                assert!((got.matrix.weights.get(row, j) - want).abs() < 1e-12);
            }
            assert_eq!(got.matrix.query_positions[row], i);
            row += 1;
        }
        assert_eq!(got.matrix.weights.rows(), row);
        assert_eq!(got.zero_rows, zero_rows);
    }
}

fn oracle_image_edges(a: &AttentionMatrix, mode: ImageEdgeMode, threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..a.weights.rows() {
        let row = a.weights.row(i);
        match mode {
            ImageEdgeMode::Strongest => {
                let mut best = 0;
                for j in 1..row.len() {
                    let visible = a.mask == Mask::None || j <= i;
                    if visible && row[j] > row[best] {
                        best = j;
                    }
                }
                out.push((a.query_tokens[i], a.key_tokens[best]));
            }
            ImageEdgeMode::Threshold => {
                out.extend((0..row.len()).filter(|&j| row[j] > threshold).map(|j| (a.query_tokens[i], a.key_tokens[j])))
            }
        }
    }
    out
}

pub fn image_edges_match(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..instances {
        let a = random_attention(&mut rng);
        for mode in [ImageEdgeMode::Strongest, ImageEdgeMode::Threshold] {
            let got: Vec<(usize, usize)> = image_edges(&a, mode, 0.1).iter().map(|e| (e.query_token, e.key_token)).collect();
            assert_eq!(got, oracle_image_edges(&a, mode, 0.1));
        }
    }
}

pub fn norm_disparity_matches(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..instances {
        let lens: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect();
        let d = rng.random_range(1..6);
        let h = synthetic::gaussian_head(0, 0, &lens, d, rng.random_range(0.1..4.0), rng.random_range(0.1..4.0), i as u64);
        let (mut qs, mut nq, mut ks, mut nk) = (0.0, 0.0, 0.0, 0.0);
        for t in &h.tokens {
            let row = if t.role == Role::Query { h.queries.row(t.token_id) } else { h.keys.row(t.token_id - h.n_queries()) };
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if t.role == Role::Query {
                qs += norm;
                nq += 1.0;
            } else {
                ks += norm;
                nk += 1.0;
            }
        }
        assert!((norm_disparity(&h).unwrap() - (qs / nq - ks / nk)).abs() < 1e-12);
    }
}

pub fn wqwk_matches(instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..instances {
        let (r, c) = (rng.random_range(1..6), rng.random_range(2..8));
        let (wq, wk) = synthetic::projection_weights(r, c, rng.random::<f64>(), i as u64);
        let want = oracle_pearson(wq.as_slice(), wk.as_slice());
        assert!((wqwk_redundancy(&wq, &wk).unwrap() - want).abs() < 1e-12);
    }
    let (wq, _) = synthetic::projection_weights(4, 8, 0.0, 1);
    assert!((wqwk_redundancy(&wq, &wq).unwrap() - 1.0).abs() < 1e-15);
    assert!((wqwk_redundancy(&wq, &wq.map(|x| -x)).unwrap() + 1.0).abs() < 1e-15);
}

/// Weighted distance-logit correlation at scale `2^log2c`, written out from
/// first principles: translate keys onto the query centroid, scale, take
/// cosine distances, weight by `exp(-d / median d)`.
pub fn oracle_objective(h: &HeadTensors, causal: bool, log2c: f64) -> f64 {
    let d = h.dim();
    let n_q = h.n_queries();
    let mean = |m: &Matrix| -> Vec<f64> {
        (0..d).map(|k| (0..m.rows()).map(|i| m.get(i, k)).sum::<f64>() / m.rows() as f64).collect()
    };
    let (mq, mk) = (mean(&h.queries), mean(&h.keys));
    let mut pairs = Vec::new();
    for (qi, qt) in h.tokens[..n_q].iter().enumerate() {
        for (ki, kt) in h.tokens[n_q..].iter().enumerate() {
            if qt.sequence_id == kt.sequence_id && (!causal || kt.position <= qt.position) {
                pairs.push((qi, ki));
            }
        }
    }
    let logits: Vec<f64> =
        pairs.iter().map(|&(i, j)| (0..d).map(|k| h.queries.get(i, k) * h.keys.get(j, k)).sum::<f64>() / (d as f64).sqrt()).collect();
    let c = log2c.exp2();
    let dists: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| {
            let q: Vec<f64> = (0..d).map(|k| c * h.queries.get(i, k)).collect();
            let kv: Vec<f64> = (0..d).map(|k| (h.keys.get(j, k) + c * c * mq[k] - mk[k]) / c).collect();
            let dot: f64 = q.iter().zip(&kv).map(|(a, b)| a * b).sum();
            let nn = q.iter().map(|a| a * a).sum::<f64>().sqrt() * kv.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nn == 0.0 { 1.0 } else { 1.0 - dot / nn }
        })
        .collect();
    let mut sorted = dists.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let sigma = if m % 2 == 1 { sorted[m / 2] } else { (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0 };
    let w: Vec<f64> = dists.iter().map(|x| (-x / sigma).exp()).collect();
    let sw: f64 = w.iter().sum();
    let ax = logits.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ay = dists.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut s = [0.0; 3];
    for ((x, y), wt) in logits.iter().zip(&dists).zip(&w) {
        s[0] += wt * (x - ax) * (y - ay);
        s[1] += wt * (x - ax) * (x - ax);
        s[2] += wt * (y - ay) * (y - ay);
    }
    s[0] / (s[1].sqrt() * s[2].sqrt())
}

/// Exhaustive sweep over the grid; returns the winning `(log2 c, correlation)`.
fn sweep(h: &HeadTensors, causal: bool, cfg: &ScaleSearchConfig) -> (f64, f64) {
    let mut grid: Vec<f64> = (0..cfg.grid_points)
        .map(|i| cfg.grid_min_log2 + (cfg.grid_max_log2 - cfg.grid_min_log2) * i as f64 / (cfg.grid_points - 1) as f64)
        .collect();
    if !grid.contains(&0.0) {
        grid.push(0.0);
    }
    let mut best: Option<(f64, f64)> = None;
    for &l in &grid {
        let r = oracle_objective(h, causal, l);
        let better = match best {
            None => true,
            Some((bl, br)) => r < br - 1e-12 || ((r - br).abs() <= 1e-12 && (l.abs(), l) < (bl.abs(), bl)),
        };
        if better {
            best = Some((l, r));
        }
    }
    best.unwrap()
}

pub fn scale_search_matches_sweep(heads: u64) {
    let cfg = ScaleSearchConfig { grid_points: 33, ..Default::default() };
    for seed in 0..heads {
        let causal = seed % 2 == 0;
        let style = if seed % 3 == 0 { HeadStyle::decoder_like() } else { HeadStyle::isotropic() };
        let h = synthetic::fill_head(0, 0, &synthetic::text_tokens(&[6, 9, 4], false), 6, style, seed);
        let dir = if causal { AttentionDirection::Causal } else { AttentionDirection::Bidirectional };
        let got = search_scale(&h, &key_translation(&h).unwrap(), &cfg, dir).unwrap();
        let (l, r) = sweep(&h, causal, &cfg);
        assert!((got.params.scale - l.exp2()).abs() < 1e-12, "seed {seed}: {} vs {}", got.params.scale, l.exp2());
        assert!((got.objective - r).abs() < 1e-9, "seed {seed}");
        assert!(got.objective <= got.baseline.unwrap() + 1e-12);
    }
}
