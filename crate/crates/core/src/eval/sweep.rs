use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::report::{StrategyReport, StrategyRow, SweepReport};
use super::{aggregate_repetitions, evaluate_run};
use crate::corpus::{Corpus, GroundTruth};
use crate::embedding::{EmbeddingBackend, GlossaryStrategy, MetadataStrategy};
use crate::llm::{run_matching, ChatEndpoint, GlossaryScope, LlmRunConfig, Round};
use crate::ranker::{rank_corpus, RankError, MAX_MAPPINGS};

/// The nine metadata/glossary combinations reported by default, in report
/// order. `all_combinations` adds the remaining three.
pub const STANDARD_COMBINATIONS: [(MetadataStrategy, GlossaryStrategy); 9] = [
    (MetadataStrategy::Label, GlossaryStrategy::Label),
    (MetadataStrategy::Label, GlossaryStrategy::LabelConcatDesc),
    (MetadataStrategy::LabelConcatTableName, GlossaryStrategy::Label),
    (MetadataStrategy::LabelConcatTableName, GlossaryStrategy::LabelConcatDesc),
    (MetadataStrategy::Label, GlossaryStrategy::Desc),
    (MetadataStrategy::LabelConcatTableName, GlossaryStrategy::Desc),
    (MetadataStrategy::LabelSumTableName, GlossaryStrategy::Desc),
    (MetadataStrategy::LabelSumTableName, GlossaryStrategy::DescSumLabel),
    (MetadataStrategy::LabelSumTableName, GlossaryStrategy::Label),
];

pub fn all_combinations() -> Vec<(MetadataStrategy, GlossaryStrategy)> {
    MetadataStrategy::ALL
        .iter()
        .flat_map(|&m| GlossaryStrategy::ALL.iter().map(move |&g| (m, g)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    #[default]
    Llm,
    Embedding,
}

fn default_round() -> Round {
    Round::One
}
fn default_repetitions() -> usize {
    3
}
fn default_batch_size() -> usize {
    25
}
fn default_max_retries() -> u32 {
    3
}
fn default_timeout() -> f64 {
    300.0
}
fn default_in_flight() -> usize {
    4
}
fn default_budget() -> usize {
    4 * 1024 * 1024
}
fn default_backend() -> String {
    "local".into()
}

/// Contents of a sweep TOML file. Relative paths resolve against the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub mode: SweepMode,
    pub corpus: PathBuf,
    pub ground_truth: PathBuf,
    #[serde(default = "default_round")]
    pub round: Round,
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default)]
    pub temperatures: Vec<f64>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_budget")]
    pub context_budget: usize,
    pub llm_url: Option<String>,
    pub shards: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default = "default_backend")]
    pub backend: String,
    pub embed_url: Option<String>,
    pub embed_model: Option<String>,
    #[serde(default)]
    pub all_combinations: bool,
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Rebases relative input paths onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if self.corpus.is_relative() {
            self.corpus = base.join(&self.corpus);
        }
        if self.ground_truth.is_relative() {
            self.ground_truth = base.join(&self.ground_truth);
        }
    }

    pub fn run_config(&self, model: &str, temperature: f64) -> LlmRunConfig {
        LlmRunConfig {
            model: model.to_string(),
            temperature,
            batch_size: self.batch_size,
            repetitions: self.repetitions,
            max_retries: self.max_retries,
            timeout: std::time::Duration::try_from_secs_f64(self.timeout_secs).unwrap_or_default(),
            max_in_flight: self.max_in_flight,
            context_budget: self.context_budget,
        }
    }

    pub fn combinations(&self) -> Vec<(MetadataStrategy, GlossaryStrategy)> {
        if self.all_combinations {
            all_combinations()
        } else {
            STANDARD_COMBINATIONS.to_vec()
        }
    }
}

/// Runs every model x temperature cell in grid order, one cell at a time.
pub async fn sweep(
    corpus: &Corpus,
    ground_truth: &GroundTruth,
    endpoint: &ChatEndpoint,
    config: &SweepConfig,
    scope: GlossaryScope<'_>,
    archive_root: Option<&Path>,
) -> SweepReport {
    let mut cells = Vec::with_capacity(config.models.len() * config.temperatures.len());
    for model in &config.models {
        for &t in &config.temperatures {
            let run_config = config.run_config(model, t);
            let outcomes = run_matching(corpus, endpoint, &run_config, config.round, scope, archive_root).await;
            let cell = aggregate_repetitions(model, t, &outcomes, ground_truth);
            tracing::info!(model = %model, temperature = t, status = cell.status(), "cell done");
            cells.push(cell);
        }
    }
    SweepReport::new(config.round, cells)
}

/// Ranks and scores the corpus once per embedding combination.
pub async fn strategy_sweep(
    corpus: &Corpus,
    ground_truth: &GroundTruth,
    backend: &dyn EmbeddingBackend,
    combinations: &[(MetadataStrategy, GlossaryStrategy)],
    cache_dir: Option<&Path>,
) -> Result<StrategyReport, RankError> {
    let mut rows = Vec::with_capacity(combinations.len());
    for &(metadata, glossary) in combinations {
        let mappings = rank_corpus(corpus, metadata, glossary, backend, MAX_MAPPINGS, cache_dir).await?;
        let r = evaluate_run(&mappings, ground_truth);
        rows.push(StrategyRow {
            metadata,
            glossary,
            h1: r.h1,
            h5: r.h5,
        });
    }
    Ok(StrategyReport { rows })
}
