//! Topic shards for large glossaries.
//!
//! Glossary entries are clustered with seeded k-means over their
//! `label + desc` embeddings; each column is then routed to the shard whose
//! centroid is most similar to its `label` + `table_name` embedding. The
//! routing rule is a heuristic and is labelled as such in exported manifests.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_columns, load_glossary, write_jsonl, ColumnMetadata, CorpusError, GlossaryEntry};
use crate::embedding::{
    embed_compositions, Composition, EmbeddingBackend, EmbeddingError, EmbeddingVector, GlossaryStrategy,
    MetadataStrategy,
};
use crate::ranker::cosine;

pub const MAX_ITERATIONS: usize = 100;
pub const ROUTING_RULE: &str =
    "heuristic: nearest centroid by cosine to encode(label) + encode(table_name); ties to lowest shard";

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("cannot make {requested} shards from {entries} glossary entries")]
    TooManyShards { requested: usize, entries: usize },
    #[error("number of shards must be at least 1")]
    ZeroShards,
    #[error("column `{0}` has no shard assignment")]
    Unrouted(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Glossary partition plus the metadata routing built on top of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub n_shards: usize,
    pub seed: u64,
    /// Glossary id -> shard, in glossary order.
    pub membership: IndexMap<String, usize>,
    pub centroids: Vec<EmbeddingVector>,
    /// Column id -> shard, in column order.
    pub routing: IndexMap<String, usize>,
    pub iterations: usize,
}

impl ShardPlan {
    pub fn shard_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_shards];
        for &s in self.membership.values() {
            sizes[s] += 1;
        }
        sizes
    }

    pub fn shard_of_entry(&self, id: &str) -> Option<usize> {
        self.membership.get(id).copied()
    }

    pub fn shard_of_column(&self, id: &str) -> Option<usize> {
        self.routing.get(id).copied()
    }
}

/// Point with its nonzero coordinates listed, so distances to dense
/// centroids cost O(nnz).
struct Point {
    nonzero: Vec<(usize, f64)>,
    sq_norm: f64,
}

impl Point {
    fn new(v: &EmbeddingVector) -> Self {
        let nonzero: Vec<(usize, f64)> = v
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &x)| x != 0.0)
            .map(|(i, &x)| (i, f64::from(x)))
            .collect();
        let sq_norm = nonzero.iter().map(|(_, x)| x * x).sum();
        Point { nonzero, sq_norm }
    }

    fn dense(&self, dim: usize) -> Vec<f64> {
        let mut d = vec![0.0; dim];
        for &(i, x) in &self.nonzero {
            d[i] = x;
        }
        d
    }
}

struct Centroid {
    values: Vec<f64>,
    sq_norm: f64,
}

impl Centroid {
    fn new(values: Vec<f64>) -> Self {
        let sq_norm = values.iter().map(|x| x * x).sum();
        Centroid { values, sq_norm }
    }

    fn sq_distance(&self, p: &Point) -> f64 {
        let dot: f64 = p.nonzero.iter().map(|&(i, x)| x * self.values[i]).sum();
        (p.sq_norm + self.sq_norm - 2.0 * dot).max(0.0)
    }
}

fn nearest(p: &Point, centroids: &[Centroid]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = c.sq_distance(p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn sample_d2(d2: &[f64], chosen: &[bool], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = d2.iter().sum();
    if total > 0.0 {
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
        }
        pick.expect("positive total implies a positive weight")
    } else {
        let unused: Vec<usize> = (0..d2.len()).filter(|&i| !chosen[i]).collect();
        unused[rng.random_range(0..unused.len())]
    }
}

/// Greedy k-means++ seeding: each step draws `2 + ln k` candidates by D²
/// sampling and keeps the one leaving the smallest total potential. Falls
/// back to uniform choice among unused points when every remaining point
/// coincides with a chosen centre.
fn seed_centroids(points: &[Point], k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Centroid> {
    let n = points.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![Centroid::new(points[first].dense(dim))];
    let mut d2: Vec<f64> = points.iter().map(|p| centroids[0].sq_distance(p)).collect();
    while centroids.len() < k {
        let mut best: Option<(f64, usize, Centroid, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = sample_d2(&d2, &chosen, rng);
            let c = Centroid::new(points[pick].dense(dim));
            let next: Vec<f64> = d2.iter().zip(points).map(|(&w, p)| w.min(c.sq_distance(p))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, pick, c, next));
            }
        }
        let (_, pick, c, next) = best.expect("at least two trials");
        chosen[pick] = true;
        d2 = next;
        centroids.push(c);
    }
    centroids
}

/// Moves the farthest member of the largest cluster into each empty one.
fn repair_empty(assign: &mut [usize], points: &[Point], centroids: &[Centroid]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assign.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap();
        let mut far = (usize::MAX, -1.0);
        for (i, p) in points.iter().enumerate() {
            if assign[i] == largest {
                let d = centroids[largest].sq_distance(p);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        assign[far.0] = empty;
    }
}

fn means(assign: &[usize], points: &[Point], k: usize, dim: usize) -> Vec<Centroid> {
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for &(i, x) in &p.nonzero {
            sums[a][i] += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| Centroid::new(s.into_iter().map(|x| x / c.max(1) as f64).collect()))
        .collect()
}

/// Seeded Lloyd iterations; returns (assignment, centroids, iterations).
fn kmeans(vectors: &[EmbeddingVector], k: usize, seed: u64) -> (Vec<usize>, Vec<Centroid>, usize) {
    let dim = vectors.first().map_or(0, EmbeddingVector::dim);
    let points: Vec<Point> = vectors.iter().map(Point::new).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(&points, k, dim, &mut rng);
    let mut assign = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(&mut next, &points, &centroids);
        let changed = next != assign;
        assign = next;
        centroids = means(&assign, &points, k, dim);
        if !changed {
            break;
        }
    }
    (assign, centroids, iterations)
}

/// Splits the glossary into `n_shards` non-empty topic shards.
pub async fn partition_glossary(
    glossary: &[GlossaryEntry],
    n_shards: usize,
    backend: &dyn EmbeddingBackend,
    seed: u64,
) -> Result<ShardPlan, PartitionError> {
    if n_shards == 0 {
        return Err(PartitionError::ZeroShards);
    }
    if n_shards > glossary.len() {
        return Err(PartitionError::TooManyShards {
            requested: n_shards,
            entries: glossary.len(),
        });
    }
    let comps: Vec<Composition> = glossary
        .iter()
        .map(|g| GlossaryStrategy::LabelConcatDesc.compose(g))
        .collect();
    let vectors = embed_compositions(&comps, backend, None).await?;
    let (assign, centroids, iterations) = kmeans(&vectors, n_shards, seed);
    let centroids = centroids
        .into_iter()
        .map(|c| EmbeddingVector::new(c.values.into_iter().map(|x| x as f32).collect()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ShardPlan {
        n_shards,
        seed,
        membership: glossary.iter().map(|g| g.id.clone()).zip(assign).collect(),
        centroids,
        routing: IndexMap::new(),
        iterations,
    })
}

/// Assigns each column to its most similar shard centroid.
pub async fn route_metadata(
    columns: &[ColumnMetadata],
    plan: &ShardPlan,
    backend: &dyn EmbeddingBackend,
) -> Result<IndexMap<String, usize>, PartitionError> {
    let comps: Vec<Composition> = columns
        .iter()
        .map(|c| MetadataStrategy::LabelSumTableName.compose(c))
        .collect();
    let vectors = embed_compositions(&comps, backend, None).await?;
    let mut routing = IndexMap::with_capacity(columns.len());
    for (col, v) in columns.iter().zip(&vectors) {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (s, c) in plan.centroids.iter().enumerate() {
            let score = cosine(v, c).map_err(|_| EmbeddingError::DimMismatch {
                expected: c.dim(),
                actual: v.dim(),
            })?;
            if score > best.1 {
                best = (s, score);
            }
        }
        routing.insert(col.id.clone(), best.0);
    }
    Ok(routing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub n_shards: usize,
    pub seed: u64,
    pub glossary_strategy: String,
    pub routing_rule: String,
    pub glossary_files: Vec<PathBuf>,
    pub metadata_files: Vec<PathBuf>,
    pub glossary_sizes: Vec<usize>,
    pub metadata_sizes: Vec<usize>,
}

pub const SHARD_MANIFEST_FILE: &str = "shards.json";

/// Writes one glossary file and one metadata file per shard, keeping input
/// order inside each shard, plus `shards.json`.
pub fn export_shards(
    plan: &ShardPlan,
    glossary: &[GlossaryEntry],
    columns: &[ColumnMetadata],
    out_dir: &Path,
) -> Result<ShardManifest, PartitionError> {
    let mut gloss_shards: Vec<Vec<&GlossaryEntry>> = vec![Vec::new(); plan.n_shards];
    for g in glossary {
        let s = plan
            .shard_of_entry(&g.id)
            .ok_or_else(|| PartitionError::Unrouted(g.id.clone()))?;
        gloss_shards[s].push(g);
    }
    let mut meta_shards: Vec<Vec<&ColumnMetadata>> = vec![Vec::new(); plan.n_shards];
    for c in columns {
        let s = plan
            .shard_of_column(&c.id)
            .ok_or_else(|| PartitionError::Unrouted(c.id.clone()))?;
        meta_shards[s].push(c);
    }
    fs::create_dir_all(out_dir).map_err(|source| CorpusError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let width = plan.n_shards.saturating_sub(1).to_string().len().max(3);
    let mut manifest = ShardManifest {
        n_shards: plan.n_shards,
        seed: plan.seed,
        glossary_strategy: GlossaryStrategy::LabelConcatDesc.to_string(),
        routing_rule: ROUTING_RULE.to_string(),
        glossary_files: Vec::new(),
        metadata_files: Vec::new(),
        glossary_sizes: Vec::new(),
        metadata_sizes: Vec::new(),
    };
    for (s, (g, m)) in gloss_shards.iter().zip(&meta_shards).enumerate() {
        let gname = PathBuf::from(format!("glossary_shard_{s:0width$}.jsonl"));
        let mname = PathBuf::from(format!("metadata_shard_{s:0width$}.jsonl"));
        write_jsonl(&out_dir.join(&gname), g)?;
        write_jsonl(&out_dir.join(&mname), m)?;
        manifest.glossary_files.push(gname);
        manifest.metadata_files.push(mname);
        manifest.glossary_sizes.push(g.len());
        manifest.metadata_sizes.push(m.len());
    }
    let path = out_dir.join(SHARD_MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))
        .map_err(|source| CorpusError::Io { path, source })?;
    Ok(manifest)
}

/// Rebuilds membership and routing from a directory written by
/// [`export_shards`]. Centroids are not stored and come back empty.
pub fn load_shard_plan(dir: &Path) -> Result<ShardPlan, PartitionError> {
    let path = dir.join(SHARD_MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|source| CorpusError::Io { path: path.clone(), source })?;
    let manifest: ShardManifest = serde_json::from_str(&text).map_err(|e| CorpusError::MalformedJson(e.to_string()))?;
    let mut membership = IndexMap::new();
    let mut routing = IndexMap::new();
    for (s, (g, m)) in manifest.glossary_files.iter().zip(&manifest.metadata_files).enumerate() {
        for e in load_glossary(&dir.join(g))? {
            membership.insert(e.id, s);
        }
        for c in load_columns(&dir.join(m))? {
            routing.insert(c.id, s);
        }
    }
    Ok(ShardPlan {
        n_shards: manifest.n_shards,
        seed: manifest.seed,
        membership,
        centroids: Vec::new(),
        routing,
        iterations: 0,
    })
}
