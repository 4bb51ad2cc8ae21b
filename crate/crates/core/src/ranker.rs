//! Exact cosine top-k retrieval over a glossary.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_jsonl, Corpus, CorpusError};
use crate::embedding::{embed_corpus, EmbeddingBackend, EmbeddingError, EmbeddingVector, GlossaryStrategy, MetadataStrategy};

/// The challenge accepts at most this many ranked ids per column.
pub const MAX_MAPPINGS: usize = 5;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("duplicate glossary id `{0}`")]
    DuplicateId(String),
    #[error("index would be empty")]
    EmptyIndex,
    #[error("{ids} ids but {vectors} vectors")]
    LengthMismatch { ids: usize, vectors: usize },
    #[error("k must be between 1 and {max}, got {k}")]
    InvalidK { k: usize, max: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Dot product visiting only `nonzero` coordinates of `a`. Skipped terms
/// are exact zeros, so the result matches [`dot`] up to the sign of zero.
fn sparse_dot(a: &[f32], nonzero: &[usize], b: &[f32]) -> f64 {
    nonzero.iter().map(|&j| f64::from(a[j]) * f64::from(b[j])).sum()
}

fn to_cosine(dot: f64, a_norm: f64, b_norm: f64) -> f64 {
    if a_norm == 0.0 || b_norm == 0.0 {
        0.0
    } else {
        // `+ 0.0` folds -0.0 into 0.0 so zero scores tie under total_cmp.
        dot / (a_norm * b_norm) + 0.0
    }
}

fn cosine_with_norms(a: &[f32], a_norm: f64, b: &[f32], b_norm: f64) -> f64 {
    to_cosine(dot(a, b), a_norm, b_norm)
}

/// Cosine similarity; zero when either side is the zero vector.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RankError> {
    if a.dim() != b.dim() {
        return Err(RankError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (a, b) = (a.values(), b.values());
    Ok(cosine_with_norms(a, norm(a), b, norm(b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
}

/// Immutable glossary matrix with precomputed row norms.
#[derive(Debug, Clone)]
pub struct SimilarityIndex {
    ids: Vec<String>,
    rows: Vec<EmbeddingVector>,
    norms: Vec<f64>,
    dim: usize,
}

impl SimilarityIndex {
    pub fn build(ids: Vec<String>, vectors: Vec<EmbeddingVector>) -> Result<Self, RankError> {
        if ids.len() != vectors.len() {
            return Err(RankError::LengthMismatch {
                ids: ids.len(),
                vectors: vectors.len(),
            });
        }
        let Some(first) = vectors.first() else {
            return Err(RankError::EmptyIndex);
        };
        let dim = first.dim();
        if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(RankError::DimMismatch {
                expected: dim,
                actual: bad.dim(),
            });
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(RankError::DuplicateId(id.clone()));
            }
        }
        let norms = vectors.iter().map(|v| norm(v.values())).collect();
        Ok(SimilarityIndex {
            ids,
            rows: vectors,
            norms,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// The `k` most similar entries, best first. Equal scores are ordered by
    /// ascending id; `k` larger than the index returns every entry.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredId>, RankError> {
        if query.dim() != self.dim {
            return Err(RankError::DimMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        if k == 0 {
            return Err(RankError::InvalidK { k, max: usize::MAX });
        }
        let q = query.values();
        let q_norm = norm(q);
        let nonzero: Vec<usize> = (0..q.len()).filter(|&j| q[j] != 0.0).collect();
        let sparse = nonzero.len() * 4 < q.len();
        let mut scored: Vec<(usize, f64)> = self
            .rows
            .iter()
            .zip(&self.norms)
            .enumerate()
            .map(|(i, (row, &n))| {
                let d = if sparse {
                    sparse_dot(q, &nonzero, row.values())
                } else {
                    dot(q, row.values())
                };
                (i, to_cosine(d, q_norm, n))
            })
            .collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored
            .into_iter()
            .map(|(i, score)| ScoredId {
                id: self.ids[i].clone(),
                score,
            })
            .collect())
    }
}

/// One ranked glossary id; LLM answers carry no score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub glossary_id: String,
    pub score: Option<f64>,
}

/// Up to five glossary ids for one column, most relevant first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedMapping {
    pub column_id: String,
    pub ranked: Vec<RankedEntry>,
}

impl RankedMapping {
    pub fn from_ids(column_id: impl Into<String>, ids: impl IntoIterator<Item = impl Into<String>>) -> Self {
        RankedMapping {
            column_id: column_id.into(),
            ranked: ids
                .into_iter()
                .map(|id| RankedEntry {
                    glossary_id: id.into(),
                    score: None,
                })
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|e| e.glossary_id.as_str()).collect()
    }
}

/// Result line: `{"colID": ..., "propID": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingLine {
    #[serde(rename = "colID")]
    pub col_id: String,
    #[serde(rename = "propID")]
    pub prop_id: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ScoreLine<'a> {
    #[serde(rename = "colID")]
    col_id: &'a str,
    scores: Vec<Option<f64>>,
}

/// `mappings.jsonl` -> `mappings.scores.jsonl`.
pub fn scores_sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.scores.jsonl"))
}

/// Writes the result file and its score sidecar; returns both paths.
pub fn write_mappings(path: &Path, mappings: &[RankedMapping]) -> Result<Vec<PathBuf>, CorpusError> {
    let lines: Vec<MappingLine> = mappings
        .iter()
        .map(|m| MappingLine {
            col_id: m.column_id.clone(),
            prop_id: m.ranked.iter().map(|e| e.glossary_id.clone()).collect(),
        })
        .collect();
    write_jsonl(path, &lines)?;
    let scores: Vec<ScoreLine> = mappings
        .iter()
        .map(|m| ScoreLine {
            col_id: &m.column_id,
            scores: m.ranked.iter().map(|e| e.score).collect(),
        })
        .collect();
    let sidecar = scores_sidecar_path(path);
    write_jsonl(&sidecar, &scores)?;
    Ok(vec![path.to_path_buf(), sidecar])
}

pub fn read_mappings(path: &Path) -> Result<Vec<RankedMapping>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: MappingLine =
                serde_json::from_str(l.trim()).map_err(|e| CorpusError::MalformedJson(e.to_string()))?;
            Ok(RankedMapping::from_ids(line.col_id, line.prop_id))
        })
        .collect()
}

/// Embeds the corpus and ranks glossary entries for every column, in corpus order.
pub async fn rank_corpus(
    corpus: &Corpus,
    metadata_strategy: MetadataStrategy,
    glossary_strategy: GlossaryStrategy,
    backend: &dyn EmbeddingBackend,
    k: usize,
    cache_dir: Option<&Path>,
) -> Result<Vec<RankedMapping>, RankError> {
    if k == 0 || k > MAX_MAPPINGS {
        return Err(RankError::InvalidK { k, max: MAX_MAPPINGS });
    }
    if corpus.columns.is_empty() {
        return Ok(Vec::new());
    }
    let (meta, gloss) = embed_corpus(corpus, metadata_strategy, glossary_strategy, backend, cache_dir).await?;
    let index = SimilarityIndex::build(corpus.glossary.iter().map(|g| g.id.clone()).collect(), gloss)?;
    corpus
        .columns
        .iter()
        .zip(&meta)
        .map(|(col, q)| {
            let ranked = index
                .top_k(q, k)?
                .into_iter()
                .map(|s| RankedEntry {
                    glossary_id: s.id,
                    score: Some(s.score),
                })
                .collect();
            Ok(RankedMapping {
                column_id: col.id.clone(),
                ranked,
            })
        })
        .collect()
}
