use super::distance::{euclidean, CondensedDistances};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par;

pub const TRUSTWORTHINESS_K: usize = 10;

/// Neighbors of `i` sorted by `(distance, index)`, excluding `i`.
fn ranked(n: usize, i: usize, dist: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(j), j)).collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().map(|(_, j)| j).collect()
}

/// Trustworthiness of a low-dimensional embedding, in `[0, 1]`.
///
/// Every low-dimensional `k`-neighbor that is not among the `k` nearest in the
/// original space costs its original-space rank minus `k`.
pub fn trustworthiness(high: &CondensedDistances, low: &Matrix, k: usize) -> Result<f64> {
    let n = high.len();
    if low.rows() != n {
        return Err(Error::LengthMismatch(format!("{n} distances rows vs {} coordinates", low.rows())));
    }
    if k == 0 || k >= n {
        return Err(Error::Precondition(format!("trustworthiness needs 0 < k < n, got k = {k}, n = {n}")));
    }
    let penalties = par::map_range(n, |i| {
        let high_order = ranked(n, i, |j| high.get(i, j));
        let mut rank = vec![0usize; n];
        for (r, &j) in high_order.iter().enumerate() {
            rank[j] = r + 1;
        }
        let low_order = ranked(n, i, |j| euclidean(low.row(i), low.row(j)));
        low_order[..k].iter().map(|&j| rank[j].saturating_sub(k) as f64).sum::<f64>()
    });
    let total: f64 = penalties.iter().sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    let (nf, kf) = (n as f64, k as f64);
    let norm = 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0));
    Ok((1.0 - norm * total).clamp(0.0, 1.0))
}
