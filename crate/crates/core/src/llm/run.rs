use std::collections::{HashMap, HashSet};
use std::path::Path;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use super::client::{BatchArchive, ChatClient, ChatEndpoint, ChatFailure, LlmRunConfig};
use super::parse::parse_llm_response;
use super::prompt::{render_prompts, Round};
use crate::corpus::{ColumnMetadata, Corpus, GlossaryEntry};
use crate::partition::ShardPlan;
use crate::ranker::RankedMapping;

/// Which glossary entries each request sees.
#[derive(Debug, Clone, Copy)]
pub enum GlossaryScope<'a> {
    Full,
    /// Each batch holds columns of one shard and sees only that shard.
    Sharded(&'a ShardPlan),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFailure {
    pub batch: usize,
    pub reason: String,
}

/// Result of one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed {
        /// At most one mapping per column, in corpus order.
        mappings: Vec<RankedMapping>,
        /// Columns with no surviving answer; scored as misses.
        unanswered: Vec<String>,
        failed_batches: Vec<BatchFailure>,
        raw_responses: Vec<String>,
    },
    Failed {
        reason: String,
    },
}

impl RunOutcome {
    pub fn is_failed(&self) -> bool {
        matches!(self, RunOutcome::Failed { .. })
    }

    pub fn mappings(&self) -> Option<&[RankedMapping]> {
        match self {
            RunOutcome::Completed { mappings, .. } => Some(mappings),
            RunOutcome::Failed { .. } => None,
        }
    }
}

pub struct Batch<'a> {
    pub columns: Vec<&'a ColumnMetadata>,
    pub glossary: Vec<&'a GlossaryEntry>,
}

/// Splits columns into request batches. Sharded batches never mix shards.
pub fn plan_batches<'a>(corpus: &'a Corpus, batch_size: usize, scope: GlossaryScope<'_>) -> Vec<Batch<'a>> {
    let batch_size = batch_size.max(1);
    match scope {
        GlossaryScope::Full => {
            let glossary: Vec<&GlossaryEntry> = corpus.glossary.iter().collect();
            corpus
                .columns
                .chunks(batch_size)
                .map(|chunk| Batch {
                    columns: chunk.iter().collect(),
                    glossary: glossary.clone(),
                })
                .collect()
        }
        GlossaryScope::Sharded(plan) => {
            let mut by_shard: Vec<Vec<&ColumnMetadata>> = vec![Vec::new(); plan.n_shards];
            for c in &corpus.columns {
                match plan.shard_of_column(&c.id) {
                    Some(s) => by_shard[s].push(c),
                    None => tracing::warn!(column = %c.id, "column not routed to any shard; skipped"),
                }
            }
            let mut gloss_by_shard: Vec<Vec<&GlossaryEntry>> = vec![Vec::new(); plan.n_shards];
            for g in &corpus.glossary {
                if let Some(s) = plan.shard_of_entry(&g.id) {
                    gloss_by_shard[s].push(g);
                }
            }
            by_shard
                .into_iter()
                .zip(gloss_by_shard)
                .flat_map(|(cols, gloss)| {
                    cols.chunks(batch_size)
                        .map(|chunk| Batch {
                            columns: chunk.to_vec(),
                            glossary: gloss.clone(),
                        })
                        .collect::<Vec<_>>()
                })
                .collect()
        }
    }
}

enum BatchResult {
    Answered {
        raw: String,
        mappings: Vec<RankedMapping>,
    },
    Failed(String),
}

async fn run_batch(
    client: &ChatClient,
    config: &LlmRunConfig,
    round: Round,
    batch: &Batch<'_>,
    archive: Option<BatchArchive>,
) -> BatchResult {
    let bundle = match render_prompts(&batch.columns, &batch.glossary, round) {
        Ok(b) => b,
        Err(e) => return BatchResult::Failed(e.to_string()),
    };
    if bundle.glossary_payload.len() > config.context_budget {
        return BatchResult::Failed(
            ChatFailure::ContextBudget {
                size: bundle.glossary_payload.len(),
                budget: config.context_budget,
            }
            .to_string(),
        );
    }
    let raw = match client.chat_complete(config, &bundle, archive.as_ref()).await {
        Ok(raw) => raw,
        Err(e) => return BatchResult::Failed(e.to_string()),
    };
    let known: HashSet<&str> = batch.glossary.iter().map(|g| g.id.as_str()).collect();
    match parse_llm_response(&raw, &known) {
        Ok(parsed) => {
            if !parsed.hallucinated.is_empty() {
                tracing::debug!(count = parsed.hallucinated.len(), "dropped out-of-glossary ids");
            }
            BatchResult::Answered {
                raw,
                mappings: parsed.mappings,
            }
        }
        Err(e) => BatchResult::Failed(e.to_string()),
    }
}

/// Runs `config.repetitions` independent passes over the corpus.
///
/// Batches within a repetition run concurrently up to
/// `config.max_in_flight`; repetitions run one after another. A repetition
/// fails only when every batch fails. Columns never answered are listed as
/// unanswered, never filled in.
pub async fn run_matching(
    corpus: &Corpus,
    endpoint: &ChatEndpoint,
    config: &LlmRunConfig,
    round: Round,
    scope: GlossaryScope<'_>,
    archive_root: Option<&Path>,
) -> Vec<RunOutcome> {
    if let Err(e) = config.validate() {
        return vec![RunOutcome::Failed { reason: e.to_string() }; config.repetitions.max(1)];
    }
    let client = match ChatClient::new(endpoint, config) {
        Ok(c) => c,
        Err(e) => return vec![RunOutcome::Failed { reason: e.to_string() }; config.repetitions],
    };
    let batches = plan_batches(corpus, config.batch_size, scope);
    let mut outcomes = Vec::with_capacity(config.repetitions);
    for rep in 0..config.repetitions {
        let results: Vec<BatchResult> = stream::iter(batches.iter().enumerate())
            .map(|(i, batch)| {
                let archive = archive_root.map(|r| BatchArchive::new(r, &config.model, config.temperature, rep, i));
                let client = &client;
                async move { run_batch(client, config, round, batch, archive).await }
            })
            .buffered(config.max_in_flight)
            .collect()
            .await;
        outcomes.push(merge(corpus, &batches, results));
    }
    outcomes
}

fn merge(corpus: &Corpus, batches: &[Batch<'_>], results: Vec<BatchResult>) -> RunOutcome {
    let mut found: HashMap<String, RankedMapping> = HashMap::new();
    let mut failed_batches = Vec::new();
    let mut raw_responses = Vec::new();
    for (i, (batch, result)) in batches.iter().zip(results).enumerate() {
        match result {
            BatchResult::Answered { raw, mappings } => {
                let asked: HashSet<&str> = batch.columns.iter().map(|c| c.id.as_str()).collect();
                for m in mappings {
                    if !asked.contains(m.column_id.as_str()) {
                        tracing::debug!(column = %m.column_id, batch = i, "answer for a column not in the batch");
                        continue;
                    }
                    found.entry(m.column_id.clone()).or_insert(m);
                }
                raw_responses.push(raw);
            }
            BatchResult::Failed(reason) => failed_batches.push(BatchFailure { batch: i, reason }),
        }
    }
    if !batches.is_empty() && failed_batches.len() == batches.len() {
        let mut reasons: Vec<&str> = failed_batches.iter().map(|f| f.reason.as_str()).collect();
        reasons.dedup();
        return RunOutcome::Failed {
            reason: reasons.join("; "),
        };
    }
    let mut mappings = Vec::new();
    let mut unanswered = Vec::new();
    for c in &corpus.columns {
        match found.remove(&c.id) {
            Some(m) => mappings.push(m),
            None => unanswered.push(c.id.clone()),
        }
    }
    RunOutcome::Completed {
        mappings,
        unanswered,
        failed_batches,
        raw_responses,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize) -> Corpus {
        Corpus::new(
            (0..n)
                .map(|i| ColumnMetadata {
                    id: format!("c{i}"),
                    label: format!("l{i}"),
                    table_id: "t".into(),
                    table_name: "T".into(),
                    table_columns: vec![format!("l{i}")],
                })
                .collect(),
            vec![GlossaryEntry {
                id: "v".into(),
                label: "v".into(),
                desc: String::new(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn batches_of_25_over_141_columns() {
        let c = corpus(141);
        let sizes: Vec<usize> = plan_batches(&c, 25, GlossaryScope::Full)
            .iter()
            .map(|b| b.columns.len())
            .collect();
        assert_eq!(sizes, vec![25, 25, 25, 25, 25, 16]);
        assert_eq!(plan_batches(&c, 1, GlossaryScope::Full).len(), 141);
        assert!(plan_batches(&corpus(0), 25, GlossaryScope::Full).is_empty());
    }

    #[test]
    fn sharded_batches_stay_within_a_shard() {
        let c = corpus(5);
        let plan = ShardPlan {
            n_shards: 2,
            seed: 0,
            membership: [("v".to_string(), 1)].into_iter().collect(),
            centroids: vec![],
            routing: [("c0", 0), ("c1", 1), ("c2", 0), ("c3", 1), ("c4", 0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            iterations: 1,
        };
        let b = plan_batches(&c, 2, GlossaryScope::Sharded(&plan));
        let ids: Vec<Vec<&str>> = b.iter().map(|b| b.columns.iter().map(|c| c.id.as_str()).collect()).collect();
        assert_eq!(ids, vec![vec!["c0", "c2"], vec!["c4"], vec!["c1", "c3"]]);
        assert!(b[0].glossary.is_empty());
        assert_eq!(b[2].glossary.len(), 1);
    }

    #[test]
    fn merge_never_invents_columns() {
        let c = corpus(3);
        let batches = plan_batches(&c, 2, GlossaryScope::Full);
        let results = vec![
            BatchResult::Answered {
                raw: String::new(),
                mappings: vec![RankedMapping::from_ids("c0", ["v"]), RankedMapping::from_ids("c9", ["v"])],
            },
            BatchResult::Failed("timeout".into()),
        ];
        match merge(&c, &batches, results) {
            RunOutcome::Completed {
                mappings,
                unanswered,
                failed_batches,
                ..
            } => {
                assert_eq!(mappings, vec![RankedMapping::from_ids("c0", ["v"])]);
                assert_eq!(unanswered, vec!["c1", "c2"]);
                assert_eq!(failed_batches.len(), 1);
            }
            other => panic!("{other:?}"),
        }
        let all_failed = merge(
            &c,
            &batches,
            vec![BatchResult::Failed("timeout".into()), BatchResult::Failed("timeout".into())],
        );
        assert_eq!(all_failed, RunOutcome::Failed { reason: "timeout".into() });
    }
}
