use std::time::{Duration, Instant};

use qkatlas_core::matrix::Matrix;
use qkatlas_core::project::{
    pairwise_cosine, pairwise_euclidean, pca_fit, pca_project, trustworthiness, tsne_fit, umap_project, CondensedDistances,
    TsneConfig, UmapConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const TSNE_BUDGET: Duration = Duration::from_secs(60);

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, descending.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn axis_variances(coords: &Matrix) -> Vec<f64> {
    let n = coords.rows() as f64;
    (0..coords.cols())
        .map(|k| {
            let m = (0..coords.rows()).map(|i| coords.get(i, k)).sum::<f64>() / n;
            (0..coords.rows()).map(|i| (coords.get(i, k) - m).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .collect()
}

/// Axis variances against Jacobi eigenvalues of the sample covariance.
pub fn pca_variances_are_top_eigenvalues(seeds: u64) {
    for seed in 0..seeds {
        // Anisotropic columns so the top eigenvalues are well separated.
        let mut x = gaussian(100, 64, seed);
        for i in 0..100 {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v *= 1.0 + 3.0 / (1.0 + j as f64);
            }
        }
        let means = x.column_means();
        let cov: Vec<Vec<f64>> = (0..64)
            .map(|a| {
                (0..64)
                    .map(|b| (0..100).map(|i| (x.get(i, a) - means[a]) * (x.get(i, b) - means[b])).sum::<f64>() / 99.0)
                    .collect()
            })
            .collect();
        let ev = jacobi_eigenvalues(cov);
        for dim in [2, 3] {
            let fit = pca_fit(&x, dim).unwrap();
            for (k, v) in axis_variances(&fit.coords).iter().enumerate() {
                assert!((v - ev[k]).abs() < 1e-8, "axis {k}: {v} vs {}", ev[k]);
                assert!((fit.explained_variance[k] - ev[k]).abs() < 1e-8);
            }
        }
    }
}

pub fn pca_rank_one_has_flat_second_axis() {
    let dir = [0.3, -1.2, 0.5, 2.0];
    let rows: Vec<Vec<f64>> = (0..50).map(|i| dir.iter().map(|d| d * (i as f64 * 0.37 - 4.0)).collect()).collect();
    let r = pca_project(&Matrix::from_rows(&rows), 2).unwrap();
    assert!((0..50).all(|i| r.coords.get(i, 1) == 0.0));
    assert!(!r.warnings.is_empty());
}

fn two_clusters(per: usize, d: usize, ratio: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        let centre = if c == 0 { 1.0 } else { -1.0 };
        for _ in 0..per {
            let z: Vec<f64> = (0..d).map(|_| centre + ratio * 2.0 * normal(&mut rng)).collect();
            rows.push(z);
            labels.push(c);
        }
    }
    (Matrix::from_rows(&rows), labels)
}

fn separated(coords: &Matrix, labels: &[usize]) -> bool {
    let n = coords.rows();
    let (mut intra, mut inter) = (0.0f64, f64::INFINITY);
    for i in 0..n {
        for j in i + 1..n {
            let d = coords.row(i).iter().zip(coords.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if labels[i] == labels[j] {
                intra = intra.max(d);
            } else {
                inter = inter.min(d);
            }
        }
    }
    intra < inter
}

fn mixture(n: usize, d: usize, k: usize, seed: u64) -> CondensedDistances {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| 6.0 * rng.random::<f64>() - 3.0).collect()).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| centres[i % k].iter().map(|c| c + 0.5 * normal(&mut rng)).collect())
        .collect();
    pairwise_euclidean(&Matrix::from_rows(&rows))
}

pub fn tsne_separates_and_decreases_kl() {
    let (x, labels) = two_clusters(40, 8, 0.1, 11);
    for dists in [pairwise_euclidean(&x), pairwise_cosine(&x).distances] {
        let start = Instant::now();
        let fit = tsne_fit(&dists, 2, &TsneConfig::default(), 3).unwrap();
        assert!(start.elapsed() < TSNE_BUDGET, "{:?}", start.elapsed());
        assert!(fit.result.quality.final_objective < fit.initial_kl);
        assert!(separated(&fit.result.coords, &labels));
    }
}

pub fn tsne_mixture_trustworthiness(seeds: u64) {
    for seed in 0..seeds {
        let dists = mixture(200, 10, 4, seed);
        let start = Instant::now();
        let fit = tsne_fit(&dists, 2, &TsneConfig::default(), seed).unwrap();
        assert!(start.elapsed() < TSNE_BUDGET, "{:?}", start.elapsed());
        assert!(fit.result.quality.trustworthiness_k10 > 0.85, "{}", fit.result.quality.trustworthiness_k10);
        assert!(fit.result.quality.final_objective < fit.initial_kl);
        let again = tsne_fit(&dists, 2, &TsneConfig::default(), seed).unwrap();
        assert_eq!(fit.result.coords, again.result.coords);
    }
}

pub fn umap_is_deterministic_and_separates() {
    let (x, labels) = two_clusters(40, 8, 0.1, 5);
    let d = pairwise_euclidean(&x);
    for dim in [2, 3] {
        let a = umap_project(&d, dim, &UmapConfig::default(), 1).unwrap();
        let b = umap_project(&d, dim, &UmapConfig::default(), 1).unwrap();
        assert_eq!(a.coords, b.coords);
        assert!(separated(&a.coords, &labels));
    }
    let r = umap_project(&mixture(200, 10, 4, 3), 2, &UmapConfig::default(), 0).unwrap();
    assert!(r.quality.trustworthiness_k10 > 0.85, "{}", r.quality.trustworthiness_k10);
}

pub fn trustworthiness_of_identity_embedding_is_one() {
    let x = gaussian(30, 2, 4);
    assert!((trustworthiness(&pairwise_euclidean(&x), &x, 10).unwrap() - 1.0).abs() < 1e-12);
}
