//! The immutable atlas index and its lazily filled artifact cache.
//!
//! Every cell is a `OnceLock`, so an artifact is read and hash-checked at most
//! once and then shared read-only between requests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use qkatlas_core::project::{Method, ProjectionResult};
use qkatlas_core::store::{Atlas, HeadAttention, HeadColors, HeadRecord, ATLAS_FILE};
use qkatlas_core::TokenRecord;

use crate::error::ApiError;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Atlas {
        path: PathBuf,
        #[source]
        source: qkatlas_core::Error,
    },
}

type Cell<T> = OnceLock<Result<Arc<T>, ApiError>>;

fn fill<T>(cell: &Cell<T>, load: impl FnOnce() -> qkatlas_core::Result<T>) -> Result<Arc<T>, ApiError> {
    cell.get_or_init(|| load().map(Arc::new).map_err(ApiError::from)).clone()
}

#[derive(Debug, Default)]
struct HeadCells {
    record: Cell<HeadRecord>,
    attention: Cell<HeadAttention>,
    colors: Cell<HeadColors>,
    projections: BTreeMap<(Method, usize), Cell<ProjectionResult>>,
}

#[derive(Debug)]
pub struct LoadedAtlas {
    pub atlas: Atlas,
    tokens: Cell<Vec<TokenRecord>>,
    heads: BTreeMap<(usize, usize), HeadCells>,
}

impl LoadedAtlas {
    fn new(atlas: Atlas) -> Self {
        let heads = atlas
            .manifest
            .heads
            .iter()
            .map(|e| {
                let cells = HeadCells {
                    projections: e.projections.iter().map(|&p| (p, Cell::default())).collect(),
                    ..Default::default()
                };
                ((e.layer, e.head), cells)
            })
            .collect();
        LoadedAtlas { atlas, tokens: Cell::default(), heads }
    }

    fn cells(&self, layer: usize, head: usize) -> Result<&HeadCells, ApiError> {
        self.heads.get(&(layer, head)).ok_or_else(|| ApiError::NotFound(format!("no head at layer {layer}, head {head}")))
    }

    pub fn has_head(&self, layer: usize, head: usize) -> bool {
        self.heads.contains_key(&(layer, head))
    }

    /// The shared token table, indexed by token id.
    pub fn tokens(&self) -> Result<Arc<Vec<TokenRecord>>, ApiError> {
        fill(&self.tokens, || {
            let tokens = self.atlas.tokens()?;
            if let Some((i, _)) = tokens.iter().enumerate().find(|(i, t)| t.token_id != *i) {
                return Err(qkatlas_core::Error::Atlas(format!("tokens.jsonl line {} is out of token-id order", i + 1)));
            }
            Ok(tokens)
        })
    }

    pub fn record(&self, layer: usize, head: usize) -> Result<Arc<HeadRecord>, ApiError> {
        fill(&self.cells(layer, head)?.record, || self.atlas.head_record(layer, head))
    }

    pub fn attention(&self, layer: usize, head: usize) -> Result<Arc<HeadAttention>, ApiError> {
        fill(&self.cells(layer, head)?.attention, || self.atlas.attention(layer, head))
    }

    pub fn colors(&self, layer: usize, head: usize) -> Result<Arc<HeadColors>, ApiError> {
        fill(&self.cells(layer, head)?.colors, || self.atlas.colors(layer, head))
    }

    pub fn projection(&self, layer: usize, head: usize, method: Method, dim: usize) -> Result<Arc<ProjectionResult>, ApiError> {
        let cells = self.cells(layer, head)?;
        let cell = cells.projections.get(&(method, dim)).ok_or_else(|| {
            ApiError::invalid("projection", &format!("{method}/{dim}d"), cells.projections.keys().map(|(m, d)| format!("{m}/{d}d")))
        })?;
        fill(cell, || self.atlas.projection(layer, head, method, dim))
    }
}

/// All atlases under a data directory, keyed by id.
#[derive(Debug, Default)]
pub struct Catalog {
    atlases: BTreeMap<String, LoadedAtlas>,
}

impl Catalog {
    /// Every immediate subdirectory holding an `atlas.json`. A data directory
    /// that is itself an atlas is served alone.
    pub fn load(data_dir: &Path) -> Result<Catalog, LoadError> {
        let io = |source| LoadError::Io { path: data_dir.to_path_buf(), source };
        let mut roots = Vec::new();
        if data_dir.join(ATLAS_FILE).is_file() {
            roots.push(data_dir.to_path_buf());
        } else {
            for entry in fs::read_dir(data_dir).map_err(io)? {
                let path = entry.map_err(io)?.path();
                if path.join(ATLAS_FILE).is_file() {
                    roots.push(path);
                }
            }
        }
        let mut atlases = BTreeMap::new();
        for root in roots {
            let atlas = Atlas::open(&root).map_err(|source| LoadError::Atlas { path: root.clone(), source })?;
            atlases.insert(atlas.id(), LoadedAtlas::new(atlas));
        }
        Ok(Catalog { atlases })
    }

    pub fn from_atlases(atlases: impl IntoIterator<Item = Atlas>) -> Catalog {
        Catalog { atlases: atlases.into_iter().map(|a| (a.id(), LoadedAtlas::new(a))).collect() }
    }

    pub fn get(&self, id: &str) -> Result<&LoadedAtlas, ApiError> {
        self.atlases.get(id).ok_or_else(|| ApiError::NotFound(format!("unknown model {id:?}")))
    }

    /// Atlases in id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &LoadedAtlas)> {
        self.atlases.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.atlases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atlases.is_empty()
    }
}
