#![allow(dead_code)]

use std::collections::HashSet;
use std::time::Duration;

use cva::corpus::{ColumnMetadata, Corpus, GlossaryEntry, GroundTruth};
use cva::llm::{ChatEndpoint, LlmRunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ver", "tan", "dor", "pel", "qu", "ris", "zo", "bre", "nu", "sha", "fi", "gom", "wex",
];

/// Distinct (case-insensitively) made-up words.
pub fn words(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.random_range(2..5);
        let w: String = (0..len).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
        if seen.insert(w.to_lowercase()) {
            out.push(w);
        }
    }
    out
}

pub fn column(id: &str, label: &str, table: &str) -> ColumnMetadata {
    ColumnMetadata {
        id: id.to_string(),
        label: label.to_string(),
        table_id: format!("t_{table}"),
        table_name: table.to_string(),
        table_columns: vec![label.to_string()],
    }
}

pub fn entry(id: &str, label: &str, desc: &str) -> GlossaryEntry {
    GlossaryEntry {
        id: id.to_string(),
        label: label.to_string(),
        desc: desc.to_string(),
    }
}

/// `n_columns` columns drawn from `n_labels` labels; the glossary holds one
/// entry per distinct label and the truth of a column is its label's entry.
pub fn self_glossary_corpus(n_columns: usize, n_labels: usize, seed: u64) -> (Corpus, GroundTruth) {
    let labels = words(n_labels, seed);
    let tables = words(20, seed ^ 0x5eed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut used = Vec::new();
    let mut columns = Vec::with_capacity(n_columns);
    let mut gt = GroundTruth::new();
    for i in 0..n_columns {
        let li = if i < n_labels { i } else { rng.random_range(0..n_labels) };
        let table = &tables[rng.random_range(0..tables.len())];
        let id = format!("col{i:05}");
        columns.push(column(&id, &labels[li], table));
        gt.insert(id, [format!("term:{li}")]).unwrap();
        used.push(li);
    }
    used.sort_unstable();
    used.dedup();
    let glossary = used
        .iter()
        .map(|&li| entry(&format!("term:{li}"), &labels[li], &format!("a property called {}", labels[li])))
        .collect();
    (Corpus::new(columns, glossary).unwrap(), gt)
}

pub fn fast_endpoint(url: &str) -> ChatEndpoint {
    ChatEndpoint {
        backoff_base: Duration::from_millis(5),
        backoff_max: Duration::from_millis(20),
        ..ChatEndpoint::new(url)
    }
}

pub fn run_config(model: &str, temperature: f64, repetitions: usize) -> LlmRunConfig {
    LlmRunConfig {
        model: model.to_string(),
        temperature,
        batch_size: 25,
        repetitions,
        max_retries: 3,
        timeout: Duration::from_secs(10),
        max_in_flight: 4,
        ..LlmRunConfig::default()
    }
}
