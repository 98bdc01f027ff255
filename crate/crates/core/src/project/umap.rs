//! A compact UMAP: k-NN fuzzy simplicial set, probabilistic-union
//! symmetrization, spectral initialization and negative-sampling SGD.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{center, check_dim, trustworthiness, CondensedDistances, Method, ProjectionResult, Quality, TRUSTWORTHINESS_K};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Curve parameters fitted for `min_dist = 0.1`, `spread = 1`.
const CURVE_A: f64 = 1.576_943_460_405_378;
const CURVE_B: f64 = 0.895_060_878_122_785_9;
const GRAD_CLIP: f64 = 4.0;
const BANDWIDTH_STEPS: usize = 64;
const INIT_EXTENT: f64 = 10.0;
/// Spacing between component boxes; boxes are `INIT_EXTENT` wide.
const BOX_SPACING: f64 = 3.0 * INIT_EXTENT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmapConfig {
    pub n_neighbors: usize,
    pub epochs: usize,
    pub negative_samples: usize,
    pub learning_rate: f64,
    pub spectral_iters: usize,
}

impl Default for UmapConfig {
    fn default() -> Self {
        Self { n_neighbors: 15, epochs: 200, negative_samples: 5, learning_rate: 1.0, spectral_iters: 300 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    a: usize,
    b: usize,
    w: f64,
}

fn nearest_neighbors(dists: &CondensedDistances, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = dists.len();
    crate::par::map_range(n, |i| {
        let mut others: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, dists.get(i, j))).collect();
        others.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        others.truncate(k);
        others
    })
}

/// Membership strengths of one point's neighbors: `exp(-(d - rho) / sigma)`
/// with `sigma` chosen so the strengths sum to `log2(k)`.
fn smooth_memberships(neighbors: &[(usize, f64)]) -> Vec<f64> {
    let k = neighbors.len();
    let target = (k as f64).log2();
    let rho = neighbors.iter().map(|&(_, d)| d).find(|&d| d > 0.0).unwrap_or(0.0);
    let mean = neighbors.iter().map(|&(_, d)| d).sum::<f64>() / k.max(1) as f64;
    let strengths = |sigma: f64| -> Vec<f64> {
        neighbors.iter().map(|&(_, d)| (-(d - rho).max(0.0) / sigma).exp()).collect()
    };
    let (mut lo, mut hi, mut sigma) = (0.0, f64::INFINITY, 1.0);
    for _ in 0..BANDWIDTH_STEPS {
        let total: f64 = strengths(sigma).iter().sum();
        if (total - target).abs() < 1e-5 {
            break;
        }
        if total > target {
            hi = sigma;
            sigma = 0.5 * (lo + hi);
        } else {
            lo = sigma;
            sigma = if hi.is_finite() { 0.5 * (lo + hi) } else { sigma * 2.0 };
        }
    }
    strengths(sigma.max(1e-3 * mean).max(f64::MIN_POSITIVE))
}

/// Fuzzy union `w_ab + w_ba - w_ab * w_ba` over directed k-NN memberships.
fn fuzzy_graph(dists: &CondensedDistances, k: usize) -> Vec<Edge> {
    let knn = nearest_neighbors(dists, k);
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, nb) in knn.iter().enumerate() {
        for (&(j, _), w) in nb.iter().zip(smooth_memberships(nb)) {
            directed.insert((i, j), w);
        }
    }
    let mut edges = BTreeMap::new();
    for (&(i, j), &w) in &directed {
        let back = directed.get(&(j, i)).copied().unwrap_or(0.0);
        let key = (i.min(j), i.max(j));
        edges.entry(key).or_insert(w + back - w * back);
    }
    edges.into_iter().filter(|&(_, w)| w > 0.0).map(|((a, b), w)| Edge { a, b, w }).collect()
}

fn components(n: usize, edges: &[Edge]) -> Vec<Vec<usize>> {
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut parent: Vec<usize> = (0..n).collect();
    for e in edges {
        let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

fn orthonormalize(cols: &mut [Vec<f64>], against: &[f64]) {
    for c in 0..cols.len() {
        let proj = dot(&cols[c], against);
        cols[c].iter_mut().zip(against).for_each(|(x, a)| *x -= proj * a);
        for prev in 0..c {
            let (done, rest) = cols.split_at_mut(c);
            let p = dot(&rest[0], &done[prev]);
            rest[0].iter_mut().zip(&done[prev]).for_each(|(x, a)| *x -= p * a);
        }
        let n = dot(&cols[c], &cols[c]).sqrt();
        if n > 0.0 {
            cols[c].iter_mut().for_each(|x| *x /= n);
        }
    }
}

/// Leading non-trivial eigenvectors of the normalized adjacency
/// `D^-1/2 W D^-1/2`, i.e. the smallest of the normalized Laplacian, by
/// orthogonal iteration on `(I + A) / 2`.
fn spectral_layout(n: usize, edges: &[Edge], dim: usize, iters: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut degree = vec![0.0; n];
    for e in edges {
        degree[e.a] += e.w;
        degree[e.b] += e.w;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let mut trivial: Vec<f64> = degree.iter().map(|d| d.sqrt()).collect();
    let tn = dot(&trivial, &trivial).sqrt();
    trivial.iter_mut().for_each(|x| *x /= tn);

    let mut cols: Vec<Vec<f64>> = (0..dim).map(|_| (0..n).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
    orthonormalize(&mut cols, &trivial);
    for _ in 0..iters {
        for col in cols.iter_mut() {
            let mut next: Vec<f64> = col.iter().map(|x| 0.5 * x).collect();
            for e in edges {
                let a = 0.5 * e.w * inv_sqrt[e.a] * inv_sqrt[e.b];
                next[e.a] += a * col[e.b];
                next[e.b] += a * col[e.a];
            }
            *col = next;
        }
        orthonormalize(&mut cols, &trivial);
    }
    let mut out = Matrix::zeros(n, dim);
    for (k, col) in cols.iter().enumerate() {
        for i in 0..n {
            out.set(i, k, col[i]);
        }
    }
    out
}

fn clip(x: f64) -> f64 {
    x.clamp(-GRAD_CLIP, GRAD_CLIP)
}

fn optimize(y: &mut Matrix, edges: &[Edge], cfg: &UmapConfig, rng: &mut ChaCha8Rng) {
    let n = y.rows();
    let dim = y.cols();
    if edges.is_empty() || n < 2 {
        return;
    }
    let max_w = edges.iter().map(|e| e.w).fold(0.0, f64::max);
    let epochs_f = cfg.epochs as f64;
    let active: Vec<&Edge> = edges.iter().filter(|e| e.w >= max_w / epochs_f).collect();
    let per_sample: Vec<f64> = active.iter().map(|e| max_w / e.w).collect();
    let per_negative: Vec<f64> = per_sample.iter().map(|p| p / cfg.negative_samples.max(1) as f64).collect();
    let mut next_sample = per_sample.clone();
    let mut next_negative = per_negative.clone();
    let (a, b) = (CURVE_A, CURVE_B);

    for epoch in 0..cfg.epochs {
        let alpha = cfg.learning_rate * (1.0 - epoch as f64 / epochs_f);
        let now = epoch as f64;
        for (e, edge) in active.iter().enumerate() {
            if next_sample[e] > now {
                continue;
            }
            let (i, j) = (edge.a, edge.b);
            let d2: f64 = (0..dim).map(|k| (y.get(i, k) - y.get(j, k)).powi(2)).sum();
            if d2 > 0.0 {
                let coeff = -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0);
                for k in 0..dim {
                    let g = clip(coeff * (y.get(i, k) - y.get(j, k))) * alpha;
                    y.set(i, k, y.get(i, k) + g);
                    y.set(j, k, y.get(j, k) - g);
                }
            }
            next_sample[e] += per_sample[e];

            let negatives = ((now - next_negative[e]) / per_negative[e]).floor().max(0.0) as usize;
            for _ in 0..negatives {
                let other = rng.random_range(0..n);
                if other == i {
                    continue;
                }
                let d2: f64 = (0..dim).map(|k| (y.get(i, k) - y.get(other, k)).powi(2)).sum();
                let coeff = if d2 > 0.0 { 2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0)) } else { 0.0 };
                for k in 0..dim {
                    let g = if coeff > 0.0 { clip(coeff * (y.get(i, k) - y.get(other, k))) } else { GRAD_CLIP };
                    y.set(i, k, y.get(i, k) + g * alpha);
                }
            }
            next_negative[e] += negatives as f64 * per_negative[e];
        }
    }
}

/// Fuzzy-set cross-entropy between graph memberships and the embedding, over graph edges.
fn edge_cross_entropy(y: &Matrix, edges: &[Edge]) -> f64 {
    edges
        .iter()
        .map(|e| {
            let d2: f64 = (0..y.cols()).map(|k| (y.get(e.a, k) - y.get(e.b, k)).powi(2)).sum();
            let v = (1.0 / (1.0 + CURVE_A * d2.powf(CURVE_B))).clamp(1e-12, 1.0 - 1e-12);
            let w = e.w.min(1.0);
            let mut ce = w * (w / v).ln();
            if w < 1.0 {
                ce += (1.0 - w) * ((1.0 - w) / (1.0 - v)).ln();
            }
            ce
        })
        .sum()
}

fn embed_component(members: &[usize], edges: &[Edge], dim: usize, cfg: &UmapConfig, rng: &mut ChaCha8Rng) -> Matrix {
    let m = members.len();
    let mut local = vec![usize::MAX; members.iter().max().map_or(0, |&x| x + 1)];
    for (li, &g) in members.iter().enumerate() {
        local[g] = li;
    }
    let sub: Vec<Edge> = edges
        .iter()
        .filter(|e| local.get(e.a).is_some_and(|&x| x != usize::MAX))
        .map(|e| Edge { a: local[e.a], b: local[e.b], w: e.w })
        .collect();
    let noise = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = if m >= dim + 2 {
        spectral_layout(m, &sub, dim, cfg.spectral_iters, rng)
    } else {
        Matrix::from_vec(m, dim, (0..m * dim).map(|_| rng.random::<f64>() - 0.5).collect())
    };
    let extent = y.as_slice().iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let expand = if extent > 0.0 { INIT_EXTENT / extent } else { 1.0 };
    let jittered: Vec<f64> = y.as_slice().iter().map(|x| x * expand + noise.sample(rng)).collect();
    y = Matrix::from_vec(m, dim, jittered);
    optimize(&mut y, &sub, cfg, rng);
    y
}

pub fn umap_project(dists: &CondensedDistances, dim: usize, cfg: &UmapConfig, seed: u64) -> Result<ProjectionResult> {
    check_dim(dim)?;
    let n = dists.len();
    if cfg.n_neighbors < 2 || n <= cfg.n_neighbors {
        return Err(Error::Precondition(format!("UMAP needs n > n_neighbors >= 2, got n = {n}, n_neighbors = {}", cfg.n_neighbors)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = fuzzy_graph(dists, cfg.n_neighbors);
    let groups = components(n, &edges);
    let mut warnings = Vec::new();
    let mut coords = Matrix::zeros(n, dim);

    if groups.len() == 1 {
        let y = embed_component(&groups[0], &edges, dim, cfg, &mut rng);
        for (li, &g) in groups[0].iter().enumerate() {
            coords.row_mut(g).copy_from_slice(y.row(li));
        }
    } else {
        warnings.push(format!("k-NN graph has {} components; laid out in separate boxes", groups.len()));
        let per_row = (groups.len() as f64).sqrt().ceil() as usize;
        for (c, members) in groups.iter().enumerate() {
            let y = embed_component(members, &edges, dim, cfg, &mut rng);
            let lo: Vec<f64> = (0..dim).map(|k| (0..y.rows()).map(|i| y.get(i, k)).fold(f64::INFINITY, f64::min)).collect();
            let hi: Vec<f64> = (0..dim).map(|k| (0..y.rows()).map(|i| y.get(i, k)).fold(f64::NEG_INFINITY, f64::max)).collect();
            let span = lo.iter().zip(&hi).map(|(l, h)| h - l).fold(0.0, f64::max);
            let fit = if span > 0.0 { INIT_EXTENT / span } else { 0.0 };
            let offset = [(c % per_row) as f64 * BOX_SPACING, (c / per_row) as f64 * BOX_SPACING, 0.0];
            for (li, &g) in members.iter().enumerate() {
                for k in 0..dim {
                    coords.set(g, k, (y.get(li, k) - lo[k]) * fit + offset[k]);
                }
            }
        }
    }
    center(&mut coords);
    if coords.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::Precondition("UMAP produced non-finite coordinates".into()));
    }
    let trust = trustworthiness(dists, &coords, TRUSTWORTHINESS_K.min(n - 1))?;
    Ok(ProjectionResult {
        method: Method::Umap,
        dim,
        quality: Quality { final_objective: edge_cross_entropy(&coords, &edges), trustworthiness_k10: trust },
        coords,
        seed,
        warnings,
    })
}
