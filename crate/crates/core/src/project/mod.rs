//! Joint 2D/3D projections of a head's query and key points.

mod distance;
mod pca;
mod trust;
mod tsne;
mod umap;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use distance::{pairwise_cosine, pairwise_euclidean, CondensedDistances, CosineDistances};
pub use pca::{pca_fit, pca_project, PcaFit};
pub use trust::{trustworthiness, TRUSTWORTHINESS_K};
pub use tsne::{joint_probabilities, kl_divergence, tsne_fit, tsne_project, TsneConfig, TsneFit};
pub use umap::{umap_project, UmapConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pca,
    Tsne,
    Umap,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Pca, Method::Tsne, Method::Umap];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pca => "pca",
            Method::Tsne => "tsne",
            Method::Umap => "umap",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pca" => Ok(Method::Pca),
            "tsne" | "t-sne" => Ok(Method::Tsne),
            "umap" => Ok(Method::Umap),
            other => Err(Error::InvalidConfig(format!("unknown projection method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    /// PCA: unexplained variance fraction. t-SNE: final KL divergence. UMAP: final cross-entropy.
    pub final_objective: f64,
    pub trustworthiness_k10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub method: Method,
    pub dim: usize,
    pub coords: Matrix,
    pub quality: Quality,
    pub seed: u64,
    /// Non-fatal conditions hit while projecting (rank deficiency, clamped perplexity, ...).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub(crate) fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("projection dimension must be 2 or 3, got {dim}")))
    }
}

/// Subtract per-axis means in place.
pub(crate) fn center(coords: &mut Matrix) {
    let means = coords.column_means();
    for i in 0..coords.rows() {
        for (x, m) in coords.row_mut(i).iter_mut().zip(&means) {
            *x -= m;
        }
    }
}
