use nalgebra::{DMatrix, SymmetricEigen};

use super::{center, check_dim, pairwise_euclidean, trustworthiness, Method, ProjectionResult, Quality, TRUSTWORTHINESS_K};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaFit {
    pub mean: Vec<f64>,
    /// `dim` rows of unit-length principal axes; zero rows past the data rank.
    pub components: Matrix,
    /// Sample covariance eigenvalues (divisor `n - 1`) for each axis.
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
    pub rank_deficient: bool,
    pub coords: Matrix,
}

/// Principal axes of `points` and the centered data projected onto them.
///
/// Each axis' sign is fixed so its largest-magnitude loading is positive.
pub fn pca_fit(points: &Matrix, dim: usize) -> Result<PcaFit> {
    let (n, d) = (points.rows(), points.cols());
    if n < dim + 1 {
        return Err(Error::Precondition(format!("PCA to {dim} dimensions needs at least {} points, got {n}", dim + 1)));
    }
    let mean = points.column_means();
    let centered = DMatrix::from_fn(n, d, |i, j| points.get(i, j) - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total_variance: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
    let cutoff = RANK_TOLERANCE * top;

    let mut components = Matrix::zeros(dim, d);
    let mut explained_variance = vec![0.0; dim];
    let mut rank_deficient = false;
    for axis in 0..dim {
        let Some(&idx) = order.get(axis) else {
            rank_deficient = true;
            continue;
        };
        let lambda = eig.eigenvalues[idx];
        if !(lambda > cutoff) || top == 0.0 {
            rank_deficient = true;
            continue;
        }
        let v = eig.eigenvectors.column(idx);
        let lead = (0..d).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components.set(axis, j, sign * v[j]);
        }
        explained_variance[axis] = lambda;
    }

    let mut coords = Matrix::zeros(n, dim);
    for i in 0..n {
        let row = centered.row(i);
        for axis in 0..dim {
            let c = components.row(axis);
            coords.set(i, axis, (0..d).map(|j| row[j] * c[j]).sum());
        }
    }
    center(&mut coords);
    Ok(PcaFit { mean, components, explained_variance, total_variance, rank_deficient, coords })
}

pub fn pca_project(points: &Matrix, dim: usize) -> Result<ProjectionResult> {
    check_dim(dim)?;
    let fit = pca_fit(points, dim)?;
    let mut warnings = Vec::new();
    if fit.rank_deficient {
        warnings.push(format!("data rank below {dim}; trailing axes are zero"));
    }
    let explained: f64 = fit.explained_variance.iter().sum();
    let final_objective = if fit.total_variance > 0.0 { 1.0 - explained / fit.total_variance } else { 0.0 };
    let n = points.rows();
    let trust = trustworthiness(&pairwise_euclidean(points), &fit.coords, TRUSTWORTHINESS_K.min(n - 1))?;
    Ok(ProjectionResult {
        method: Method::Pca,
        dim,
        coords: fit.coords,
        quality: Quality { final_objective: final_objective.max(0.0), trustworthiness_k10: trust },
        seed: 0,
        warnings,
    })
}
