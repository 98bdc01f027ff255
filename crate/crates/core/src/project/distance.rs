use serde::{Deserialize, Serialize};

use crate::matrix::{dot, squared_euclidean, Matrix};
use crate::par;

/// Upper triangle (excluding the diagonal) of a symmetric distance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedDistances {
    n: usize,
    data: Vec<f64>,
}

impl CondensedDistances {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64 + Sync + Send) -> Self {
        let rows = par::map_range(n, |i| ((i + 1)..n).map(|j| f(i, j)).collect::<Vec<_>>());
        Self { n, data: rows.concat() }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        use std::cmp::Ordering::*;
        match i.cmp(&j) {
            Equal => 0.0,
            Less => self.data[self.index(i, j)],
            Greater => self.data[self.index(j, i)],
        }
    }

    fn index(&self, i: usize, j: usize) -> usize {
        self.n * i - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Row `i` of the full square matrix.
    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.n).map(|j| self.get(i, j)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineDistances {
    pub distances: CondensedDistances,
    /// Rows with zero norm; their distance to every other row is 1.
    pub zero_rows: Vec<usize>,
}

/// `1 - cos(p_i, p_j)` for every pair of rows.
pub fn pairwise_cosine(points: &Matrix) -> CosineDistances {
    let norms = points.row_norms();
    let zero_rows: Vec<usize> = norms.iter().enumerate().filter(|(_, &n)| n == 0.0).map(|(i, _)| i).collect();
    let distances = CondensedDistances::from_fn(points.rows(), |i, j| {
        let n = norms[i] * norms[j];
        if n == 0.0 {
            1.0
        } else {
            (1.0 - dot(points.row(i), points.row(j)) / n).max(0.0)
        }
    });
    CosineDistances { distances, zero_rows }
}

pub fn pairwise_euclidean(points: &Matrix) -> CondensedDistances {
    CondensedDistances::from_fn(points.rows(), |i, j| squared_euclidean(points.row(i), points.row(j)).sqrt())
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_euclidean(a, b).sqrt()
}
