//! Exact t-SNE over a precomputed distance matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{center, check_dim, trustworthiness, CondensedDistances, Method, ProjectionResult, Quality, TRUSTWORTHINESS_K};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par;

const ENTROPY_TOLERANCE: f64 = 1e-5;
const BANDWIDTH_STEPS: usize = 200;
const MIN_GAIN: f64 = 0.01;
const MIN_PROBABILITY: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    /// Defaults to `min(30, (n - 1) / 3)`.
    pub perplexity: Option<f64>,
    pub iters: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: None,
            iters: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
        }
    }
}

/// Conditional probabilities of row `i` at precision `beta`, and their entropy.
fn row_probabilities(sq: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let min = sq.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&d, p)) in sq.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *p = 0.0;
            continue;
        }
        let shifted = d - min;
        *p = (-shifted * beta).exp();
        sum += *p;
        weighted += shifted * *p;
    }
    out.iter_mut().for_each(|p| *p /= sum);
    sum.ln() + beta * weighted / sum
}

/// Symmetric joint probabilities `P` (row-major `n x n`, zero diagonal, sums to 1).
///
/// Per-point Gaussian precisions are binary-searched so each conditional
/// distribution has the requested perplexity. Distances are squared before
/// entering the kernel.
pub fn joint_probabilities(dists: &CondensedDistances, perplexity: f64) -> Result<Vec<f64>> {
    let n = dists.len();
    if n < 2 || !(perplexity > 0.0) {
        return Err(Error::Precondition(format!("perplexity {perplexity} with {n} points")));
    }
    let target = perplexity.ln();
    let rows = par::map_range(n, |i| {
        let sq: Vec<f64> = dists.row(i).iter().map(|d| d * d).collect();
        let mut p = vec![0.0; n];
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        for _ in 0..BANDWIDTH_STEPS {
            let h = row_probabilities(&sq, i, beta, &mut p);
            let diff = h - target;
            if diff.abs() < ENTROPY_TOLERANCE {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        p
    });
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = rows[i][j] + rows[j][i];
        }
    }
    let total: f64 = joint.iter().sum();
    joint.iter_mut().for_each(|p| *p /= total);
    Ok(joint)
}

/// Student-t kernel row sums `sum_j 1 / (1 + |y_i - y_j|^2)`, in row order.
fn kernel_row_sums(y: &Matrix) -> Vec<f64> {
    let n = y.rows();
    par::map_range(n, |i| (0..n).filter(|&j| j != i).map(|j| kernel(y.row(i), y.row(j))).sum())
}

fn kernel(a: &[f64], b: &[f64]) -> f64 {
    1.0 / (1.0 + a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
}

/// `KL(P || Q)` for embedding `y`.
pub fn kl_divergence(p: &[f64], y: &Matrix) -> f64 {
    let n = y.rows();
    let z: f64 = kernel_row_sums(y).iter().sum();
    let rows = par::map_range(n, |i| {
        let mut kl = 0.0;
        for j in 0..n {
            let pij = p[i * n + j];
            if j != i && pij > 0.0 {
                let q = (kernel(y.row(i), y.row(j)) / z).max(MIN_PROBABILITY);
                kl += pij * (pij / q).ln();
            }
        }
        kl
    });
    rows.iter().sum()
}

#[derive(Debug, Clone)]
pub struct TsneFit {
    pub result: ProjectionResult,
    pub initial_kl: f64,
    pub perplexity: f64,
}

/// Exact t-SNE with early exaggeration, momentum and per-coordinate gains.
///
/// Gradients are computed row by row with a fixed summation order, so the
/// output is identical with or without the `parallel` feature.
pub fn tsne_fit(dists: &CondensedDistances, dim: usize, cfg: &TsneConfig, seed: u64) -> Result<TsneFit> {
    check_dim(dim)?;
    let n = dists.len();
    if n < 5 {
        return Err(Error::Precondition(format!("t-SNE needs at least 5 points, got {n}")));
    }
    let default_perplexity = ((n - 1) as f64 / 3.0).min(30.0);
    let mut warnings = Vec::new();
    let perplexity = match cfg.perplexity {
        Some(p) if p >= n as f64 => {
            warnings.push(format!("perplexity {p} >= n = {n}; clamped to {default_perplexity:.3}"));
            default_perplexity
        }
        Some(p) => p,
        None => default_perplexity,
    };
    let p = joint_probabilities(dists, perplexity)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = Matrix::from_vec(n, dim, (0..n * dim).map(|_| normal.sample(&mut rng)).collect());
    let initial_kl = kl_divergence(&p, &y);

    let mut velocity = vec![0.0; n * dim];
    let mut gains = vec![1.0_f64; n * dim];
    for iter in 0..cfg.iters {
        let (exaggeration, momentum) = if iter < cfg.exaggeration_iters {
            (cfg.early_exaggeration, cfg.initial_momentum)
        } else {
            (1.0, cfg.final_momentum)
        };
        let z: f64 = kernel_row_sums(&y).iter().sum();
        let mut grad = vec![0.0; n * dim];
        par::for_each_chunk_mut(&mut grad, dim, |i, g| {
            let yi = y.row(i);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let yj = y.row(j);
                let num = kernel(yi, yj);
                let coeff = 4.0 * (exaggeration * p[i * n + j] - num / z) * num;
                for k in 0..dim {
                    g[k] += coeff * (yi[k] - yj[k]);
                }
            }
        });
        let flat = y.as_slice().to_vec();
        let mut next = flat.clone();
        for idx in 0..n * dim {
            gains[idx] = if (grad[idx] > 0.0) != (velocity[idx] > 0.0) {
                gains[idx] + 0.2
            } else {
                (gains[idx] * 0.8).max(MIN_GAIN)
            };
            velocity[idx] = momentum * velocity[idx] - cfg.learning_rate * gains[idx] * grad[idx];
            next[idx] = flat[idx] + velocity[idx];
        }
        y = Matrix::from_vec(n, dim, next);
        center(&mut y);
    }

    let final_kl = kl_divergence(&p, &y);
    if y.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::Precondition("t-SNE diverged to non-finite coordinates".into()));
    }
    let trust = trustworthiness(dists, &y, TRUSTWORTHINESS_K.min(n - 1))?;
    Ok(TsneFit {
        result: ProjectionResult {
            method: Method::Tsne,
            dim,
            coords: y,
            quality: Quality { final_objective: final_kl, trustworthiness_k10: trust },
            seed,
            warnings,
        },
        initial_kl,
        perplexity,
    })
}

pub fn tsne_project(dists: &CondensedDistances, dim: usize, cfg: &TsneConfig, seed: u64) -> Result<ProjectionResult> {
    tsne_fit(dists, dim, cfg, seed).map(|f| f.result)
}
