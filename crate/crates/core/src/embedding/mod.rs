//! Text embeddings and the metadata/glossary composition strategies.
//!
//! A column or glossary entry is turned into one vector either by encoding a
//! single (possibly concatenated) text, or by encoding several texts
//! separately and summing them componentwise. Summed vectors are stored as-is;
//! cosine similarity absorbs their scale.

mod cache;
mod local;
mod remote;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{ColumnMetadata, Corpus, GlossaryEntry};

pub use cache::EmbeddingCache;
pub use local::{fnv1a_64, TrigramEmbedder, LOCAL_DIM};
pub use remote::{RemoteEmbedder, RemoteEmbedderConfig, EMBED_API_KEY_ENV, EMBED_URL_ENV};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("embedding cache corrupt: {0}")]
    CacheCorrupt(String),
    #[error("cache i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense, finite vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(EmbeddingVector(values))
        } else {
            Err(EmbeddingError::NonFinite)
        }
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Componentwise sum.
    pub fn add(&self, other: &EmbeddingVector) -> Result<EmbeddingVector, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(EmbeddingVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn scaled(&self, factor: f32) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|v| v * factor).collect())
    }
}

/// A source of text embeddings.
#[async_trait]
pub trait EmbeddingBackend: Send + Sync {
    /// Stable identifier, used in cache keys.
    fn name(&self) -> &str;

    /// Output dimension, if known before the first call.
    fn dim(&self) -> Option<usize>;

    async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;
}

pub async fn embed_text(
    backend: &dyn EmbeddingBackend,
    text: &str,
) -> Result<EmbeddingVector, EmbeddingError> {
    let mut out = backend.embed_batch(&[text.to_string()]).await?;
    out.pop()
        .ok_or_else(|| EmbeddingError::BackendUnavailable("backend returned no vector".into()))
}

/// Texts to encode and how to combine them into one vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Composition {
    Encode(String),
    Sum(Vec<String>),
}

impl Composition {
    fn texts(&self) -> &[String] {
        match self {
            Composition::Encode(t) => std::slice::from_ref(t),
            Composition::Sum(ts) => ts,
        }
    }

    /// Digest of the composition, used as the cache key.
    fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(match self {
            Composition::Encode(_) => b"encode" as &[u8],
            Composition::Sum(_) => b"sum",
        });
        for t in self.texts() {
            h.update([0x1f]);
            h.update(t.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

macro_rules! cli_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} `{}` (expected one of: {})",
                        stringify!($name),
                        other,
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

/// How a column's metadata becomes one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetadataStrategy {
    /// encode(label)
    Label,
    /// encode(label + " " + table_name)
    #[serde(rename = "label-concat-table")]
    LabelConcatTableName,
    /// encode(label) + encode(table_name)
    #[serde(rename = "label-sum-table")]
    LabelSumTableName,
}

cli_enum!(MetadataStrategy {
    Label => "label",
    LabelConcatTableName => "label-concat-table",
    LabelSumTableName => "label-sum-table",
});

impl MetadataStrategy {
    pub fn compose(&self, m: &ColumnMetadata) -> Composition {
        match self {
            MetadataStrategy::Label => Composition::Encode(m.label.clone()),
            MetadataStrategy::LabelConcatTableName => {
                Composition::Encode(format!("{} {}", m.label, m.table_name))
            }
            MetadataStrategy::LabelSumTableName => {
                Composition::Sum(vec![m.label.clone(), m.table_name.clone()])
            }
        }
    }

    /// Formula as written in result tables.
    pub fn formula(&self) -> &'static str {
        match self {
            MetadataStrategy::Label => "encode(label)",
            MetadataStrategy::LabelConcatTableName => "encode(label + table_name)",
            MetadataStrategy::LabelSumTableName => "encode(label) + encode(table_name)",
        }
    }
}

/// How a glossary entry becomes one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GlossaryStrategy {
    /// encode(label)
    #[serde(rename = "label")]
    Label,
    /// encode(label + " " + desc)
    #[serde(rename = "label-concat-desc")]
    LabelConcatDesc,
    /// encode(desc)
    #[serde(rename = "desc")]
    Desc,
    /// encode(desc) + encode(label)
    #[serde(rename = "desc-sum-label")]
    DescSumLabel,
}

cli_enum!(GlossaryStrategy {
    Label => "label",
    LabelConcatDesc => "label-concat-desc",
    Desc => "desc",
    DescSumLabel => "desc-sum-label",
});

impl GlossaryStrategy {
    pub fn compose(&self, g: &GlossaryEntry) -> Composition {
        match self {
            GlossaryStrategy::Label => Composition::Encode(g.label.clone()),
            GlossaryStrategy::LabelConcatDesc => {
                Composition::Encode(format!("{} {}", g.label, g.desc))
            }
            GlossaryStrategy::Desc => Composition::Encode(g.desc.clone()),
            GlossaryStrategy::DescSumLabel => Composition::Sum(vec![g.desc.clone(), g.label.clone()]),
        }
    }

    pub fn formula(&self) -> &'static str {
        match self {
            GlossaryStrategy::Label => "encode(label)",
            GlossaryStrategy::LabelConcatDesc => "encode(label + desc)",
            GlossaryStrategy::Desc => "encode(desc)",
            GlossaryStrategy::DescSumLabel => "encode(desc) + encode(label)",
        }
    }
}

fn sum_vectors(vectors: Vec<EmbeddingVector>) -> Result<EmbeddingVector, EmbeddingError> {
    let mut iter = vectors.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| EmbeddingError::BackendUnavailable("no vectors to combine".into()))?;
    iter.try_fold(first, |acc, v| acc.add(&v))
}

async fn compose_with(
    backend: &dyn EmbeddingBackend,
    composition: &Composition,
) -> Result<EmbeddingVector, EmbeddingError> {
    let vectors = backend.embed_batch(composition.texts()).await?;
    sum_vectors(vectors)
}

pub async fn compose_metadata_embedding(
    strategy: MetadataStrategy,
    m: &ColumnMetadata,
    backend: &dyn EmbeddingBackend,
) -> Result<EmbeddingVector, EmbeddingError> {
    compose_with(backend, &strategy.compose(m)).await
}

pub async fn compose_glossary_embedding(
    strategy: GlossaryStrategy,
    g: &GlossaryEntry,
    backend: &dyn EmbeddingBackend,
) -> Result<EmbeddingVector, EmbeddingError> {
    compose_with(backend, &strategy.compose(g)).await
}

const EMBED_CHUNK: usize = 256;

/// Embeds every composition, encoding each distinct text once and consulting
/// the cache first when one is given.
pub async fn embed_compositions(
    compositions: &[Composition],
    backend: &dyn EmbeddingBackend,
    mut cache: Option<&mut EmbeddingCache>,
) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    let hashes: Vec<String> = compositions.iter().map(Composition::content_hash).collect();
    let mut resolved: Vec<Option<EmbeddingVector>> = match cache.as_deref() {
        Some(c) => hashes.iter().map(|h| c.get(h).cloned()).collect(),
        None => vec![None; compositions.len()],
    };

    let mut pending: Vec<String> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (comp, slot) in compositions.iter().zip(&resolved) {
        if slot.is_some() {
            continue;
        }
        for t in comp.texts() {
            if !index.contains_key(t.as_str()) {
                index.insert(t.as_str(), pending.len());
                pending.push(t.clone());
            }
        }
    }

    let mut encoded: Vec<EmbeddingVector> = Vec::with_capacity(pending.len());
    for chunk in pending.chunks(EMBED_CHUNK) {
        let vectors = backend.embed_batch(chunk).await?;
        if vectors.len() != chunk.len() {
            return Err(EmbeddingError::BackendUnavailable(format!(
                "asked for {} vectors, got {}",
                chunk.len(),
                vectors.len()
            )));
        }
        encoded.extend(vectors);
    }
    if let (Some(first), Some(dim)) = (encoded.first(), backend.dim()) {
        if first.dim() != dim {
            return Err(EmbeddingError::DimMismatch {
                expected: dim,
                actual: first.dim(),
            });
        }
    }

    for ((comp, slot), hash) in compositions.iter().zip(resolved.iter_mut()).zip(&hashes) {
        if slot.is_some() {
            continue;
        }
        let parts = comp
            .texts()
            .iter()
            .map(|t| encoded[index[t.as_str()]].clone())
            .collect();
        let v = sum_vectors(parts)?;
        if let Some(c) = cache.as_deref_mut() {
            c.insert(hash.clone(), v.clone())?;
        }
        *slot = Some(v);
    }
    Ok(resolved.into_iter().map(|v| v.expect("all slots filled")).collect())
}

/// Vectors for every column and glossary entry of a corpus, in corpus order.
///
/// With a `cache_dir`, vectors are read from and written back to one cache
/// file per (backend, side, strategy); a corrupt cache is discarded and
/// recomputed.
pub async fn embed_corpus(
    corpus: &Corpus,
    metadata_strategy: MetadataStrategy,
    glossary_strategy: GlossaryStrategy,
    backend: &dyn EmbeddingBackend,
    cache_dir: Option<&Path>,
) -> Result<(Vec<EmbeddingVector>, Vec<EmbeddingVector>), EmbeddingError> {
    let meta: Vec<Composition> = corpus.columns.iter().map(|c| metadata_strategy.compose(c)).collect();
    let gloss: Vec<Composition> = corpus.glossary.iter().map(|g| glossary_strategy.compose(g)).collect();

    let Some(dir) = cache_dir else {
        let m = embed_compositions(&meta, backend, None).await?;
        let g = embed_compositions(&gloss, backend, None).await?;
        return Ok((m, g));
    };

    let mut meta_cache = EmbeddingCache::open(dir, backend.name(), "metadata", metadata_strategy.as_str());
    let m = embed_compositions(&meta, backend, Some(&mut meta_cache)).await?;
    meta_cache.save()?;

    let mut gloss_cache = EmbeddingCache::open(dir, backend.name(), "glossary", glossary_strategy.as_str());
    let g = embed_compositions(&gloss, backend, Some(&mut gloss_cache)).await?;
    gloss_cache.save()?;
    Ok((m, g))
}
