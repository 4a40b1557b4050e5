//! Global pool of norm statements that admits a statement only if its best
//! cosine similarity to every stored member is below a threshold.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, NormStatement};
use crate::embeddings::{cosine_slices, EmbedError, Embedder, EmbeddingVector};

pub const DEFAULT_THRESHOLD: f64 = 0.97;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("norm {0:?} has no embedding")]
    MissingEmbedding(String),
    #[error("embedding from provider {got:?}, pool uses {expected:?}")]
    ProviderMismatch { expected: String, got: String },
    #[error("embedding dimension {got}, pool uses {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("norm id {0:?} already stored")]
    DuplicateId(String),
    #[error("stored norms {a:?} and {b:?} have cosine {similarity} >= threshold")]
    InvariantViolation {
        a: String,
        b: String,
        similarity: f64,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("pool header {path}: {message}")]
    Header { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub threshold: f64,
    pub provider_id: String,
}

impl PoolConfig {
    pub fn new(threshold: f64, provider_id: impl Into<String>) -> Result<Self, PoolError> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(PoolError::InvalidThreshold(threshold));
        }
        Ok(Self {
            threshold,
            provider_id: provider_id.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Novel,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InsertOutcome {
    pub decision: Decision,
    /// Most similar stored member at decision time.
    pub nearest_id: Option<String>,
    pub nearest_similarity: Option<f64>,
}

#[derive(Debug)]
pub struct NormPool {
    config: PoolConfig,
    members: RwLock<Vec<NormStatement>>,
}

impl NormPool {
    pub fn new(config: PoolConfig) -> Self {
        Self {
            config,
            members: RwLock::new(Vec::new()),
        }
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.members.read().expect("pool poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored members in insertion order.
    pub fn members(&self) -> Vec<NormStatement> {
        self.members.read().expect("pool poisoned").clone()
    }

    /// Attaches `vector` to `norm` and inserts it, checking the provider.
    pub fn try_insert_embedded(
        &self,
        norm: &NormStatement,
        vector: &EmbeddingVector,
    ) -> Result<InsertOutcome, PoolError> {
        if vector.provider_id() != self.config.provider_id {
            return Err(PoolError::ProviderMismatch {
                expected: self.config.provider_id.clone(),
                got: vector.provider_id().to_string(),
            });
        }
        let mut norm = norm.clone();
        norm.embedding = Some(vector.values().to_vec());
        self.insert(norm)
    }

    /// Inserts a norm whose stored embedding came from the pool's provider.
    pub fn try_insert(&self, norm: &NormStatement) -> Result<InsertOutcome, PoolError> {
        if norm.embedding.is_none() {
            return Err(PoolError::MissingEmbedding(norm.id.clone()));
        }
        self.insert(norm.clone())
    }

    fn insert(&self, norm: NormStatement) -> Result<InsertOutcome, PoolError> {
        let values = norm.embedding.as_deref().expect("checked by caller");
        // Held for the whole check-then-insert so writes are linearizable.
        let mut members = self.members.write().expect("pool poisoned");
        if let Some(first) = members.first() {
            let expected = first.embedding.as_ref().map_or(0, Vec::len);
            if values.len() != expected {
                return Err(PoolError::DimensionMismatch {
                    expected,
                    got: values.len(),
                });
            }
        }
        let best = best_match(&members, values);
        let outcome = match best {
            Some((idx, sim)) if sim >= self.config.threshold => InsertOutcome {
                decision: Decision::Duplicate,
                nearest_id: Some(members[idx].id.clone()),
                nearest_similarity: Some(sim),
            },
            _ => {
                if members.iter().any(|m| m.id == norm.id) {
                    return Err(PoolError::DuplicateId(norm.id));
                }
                let nearest = best.map(|(idx, sim)| (members[idx].id.clone(), sim));
                members.push(norm);
                InsertOutcome {
                    decision: Decision::Novel,
                    nearest_id: nearest.as_ref().map(|(id, _)| id.clone()),
                    nearest_similarity: nearest.map(|(_, s)| s),
                }
            }
        };
        Ok(outcome)
    }

    /// Exact top-k members by cosine to `query`, descending; ties by id.
    pub fn nearest_to(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<(String, f64)>, PoolError> {
        if query.provider_id() != self.config.provider_id {
            return Err(PoolError::ProviderMismatch {
                expected: self.config.provider_id.clone(),
                got: query.provider_id().to_string(),
            });
        }
        let members = self.members.read().expect("pool poisoned");
        let mut scored: Vec<(String, f64)> = members
            .iter()
            .map(|m| {
                let v = m.embedding.as_deref().expect("members are embedded");
                (m.id.clone(), cosine_slices(v, query.values()))
            })
            .collect();
        sort_by_similarity(&mut scored);
        scored.truncate(k);
        Ok(scored)
    }

    /// Embeds `text` with `embedder` and returns the top-k members.
    pub fn nearest(
        &self,
        text: &str,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<(String, f64)>, PoolError> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let query = embedder.embed(text)?;
        self.nearest_to(&query, k)
    }

    /// Exhaustive pairwise check that no two members reach the threshold.
    pub fn check_invariant(&self) -> Result<(), PoolError> {
        let members = self.members.read().expect("pool poisoned");
        check_pairwise(&members, self.config.threshold)
    }

    /// Writes members as norm JSONL plus a `<path>.pool.json` header.
    pub fn save(&self, path: &Path) -> Result<(), PoolError> {
        corpus::save_norms(&self.members(), path)?;
        let header = serde_json::to_string_pretty(&self.config).expect("config serializes");
        let header_path = header_path(path);
        fs::write(&header_path, header + "\n").map_err(|e| PoolError::Header {
            path: header_path,
            message: e.to_string(),
        })
    }

    /// Loads a saved pool, failing if any stored pair violates the threshold.
    pub fn load(path: &Path) -> Result<Self, PoolError> {
        let header_path = header_path(path);
        let text = fs::read_to_string(&header_path).map_err(|e| PoolError::Header {
            path: header_path.clone(),
            message: e.to_string(),
        })?;
        let config: PoolConfig = serde_json::from_str(&text).map_err(|e| PoolError::Header {
            path: header_path.clone(),
            message: e.to_string(),
        })?;
        let config = PoolConfig::new(config.threshold, config.provider_id)?;
        let norms = corpus::load_norms(path)?;
        if let Some(n) = norms.iter().find(|n| n.embedding.is_none()) {
            return Err(PoolError::MissingEmbedding(n.id.clone()));
        }
        check_pairwise(&norms, config.threshold)?;
        Ok(Self {
            config,
            members: RwLock::new(norms),
        })
    }
}

fn header_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".pool.json");
    path.with_file_name(name)
}

fn best_match(members: &[NormStatement], values: &[f32]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in members.iter().enumerate() {
        let v = m.embedding.as_deref().expect("members are embedded");
        let sim = cosine_slices(v, values);
        // Strictly greater keeps the earliest member on ties.
        if best.is_none_or(|(_, b)| sim > b) {
            best = Some((i, sim));
        }
    }
    best
}

fn check_pairwise(members: &[NormStatement], threshold: f64) -> Result<(), PoolError> {
    for (i, a) in members.iter().enumerate() {
        let va = a.embedding.as_deref().expect("members are embedded");
        for b in &members[i + 1..] {
            let vb = b.embedding.as_deref().expect("members are embedded");
            let similarity = cosine_slices(va, vb);
            if similarity >= threshold {
                return Err(PoolError::InvariantViolation {
                    a: a.id.clone(),
                    b: b.id.clone(),
                    similarity,
                });
            }
        }
    }
    Ok(())
}

/// Descending similarity, ascending id on ties.
pub fn sort_by_similarity(scored: &mut [(String, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}
