//! Zero-shot prompt rendering.
//!
//! The Round 1 texts are kept verbatim, including the sentences repeated in
//! both the instructions and the query. Round 2 reuses the same structure
//! with the vocabulary wording swapped; it is not a verbatim prompt.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ColumnMetadata, GlossaryEntry};

pub const INPUT_METADATA_SLOT: &str = "{input_metadata}";

const ROUND1_ASSISTANT_INSTRUCTIONS: &str = "\
Your task is to match column metadata to DBpedia properties.
The full set of DBpedia properties will be provided in the vector.
Columns metadata, instead, will be provided by the user and it will contain the following information: column ID, column label, table ID, table name and the labels of the other columns within that table. The matching between the column and the DBpedia properties is to be made based on the semantic similarities between the metadata (i.e. what the column express), and DBpedia properties.
You can add multiple properties, but no more 5.
Return the results in the following format:
'colID': '00000_0_0000_XXX', 'propID': ['http://dbpedia.org/ontology/PROPERTY_ID', ..., 'http://dbpedia.org/ontology/PROPERTY_ID'].
Sort the matched DBpedia in descending order of relevance, starting with the most relevant.
Choose ONLY from the DBpedia properties.
Return ONLY the results, no other text.
Return results for each and every single column metadata.";

const ROUND1_QUERY_TEMPLATE: &str = "\
Based on the instruction given to you, find the most relevant DBpedia property, for each of the following metadata in json format:
{input_metadata}
Each json element is an independent column metadata. The metadata do not have any relationship, so the matching with the DBpedia properties should only be based on the information provided within its own metadata.
You can add multiple properties, but no more 5.
Return the results in the following format:
'colID': '00000_0_0000_XXX', 'propID': ['http://dbpedia.org/ontology/PROPERTY_ID', ..., 'http://dbpedia.org/ontology/PROPERTY_ID'].
Sort the matched DBpedia in descending order of relevance, starting with the most relevant.
Choose ONLY from the DBpedia properties provided in the vector.
Return ONLY the results, no other text.
Return results for each and every single column metadata.";

/// Applied in order to turn the DBpedia wording into custom-vocabulary wording.
const ROUND2_WORDING: &[(&str, &str)] = &[
    ("'http://dbpedia.org/ontology/PROPERTY_ID'", "'TERM_ID'"),
    ("DBpedia properties", "vocabulary terms"),
    ("DBpedia property", "vocabulary term"),
    ("the matched DBpedia", "the matched vocabulary terms"),
    ("multiple properties", "multiple terms"),
];

/// Which challenge round's wording to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Round {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Round::One => "1",
            Round::Two => "2",
        })
    }
}

impl FromStr for Round {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" => Ok(Round::One),
            "2" => Ok(Round::Two),
            other => Err(format!("round must be 1 or 2, got `{other}`")),
        }
    }
}

fn reword(text: &str, round: Round) -> String {
    match round {
        Round::One => text.to_string(),
        Round::Two => ROUND2_WORDING
            .iter()
            .fold(text.to_string(), |acc, (from, to)| acc.replace(from, to)),
    }
}

pub fn assistant_instructions(round: Round) -> String {
    reword(ROUND1_ASSISTANT_INSTRUCTIONS, round)
}

/// The query template with `input_metadata` substituted into its slot.
pub fn render_query(round: Round, input_metadata: &str) -> String {
    reword(ROUND1_QUERY_TEMPLATE, round).replace(INPUT_METADATA_SLOT, input_metadata)
}

fn glossary_heading(round: Round) -> &'static str {
    match round {
        Round::One => "DBpedia properties:",
        Round::Two => "Vocabulary terms:",
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("cannot render a prompt for an empty batch")]
    EmptyBatch,
}

/// Everything sent to the model for one batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptBundle {
    pub assistant_instructions: String,
    pub user_query: String,
    /// Candidate glossary, one JSON object per line.
    pub glossary_payload: String,
    pub round: Round,
}

impl PromptBundle {
    /// User message content for endpoints without attachment support: the
    /// glossary is inlined ahead of the query.
    pub fn user_message(&self) -> String {
        format!(
            "{}\n{}\n\n{}",
            glossary_heading(self.round),
            self.glossary_payload,
            self.user_query
        )
    }
}

/// Serialises a batch as one JSON array, one object per column.
pub fn serialize_batch(batch: &[&ColumnMetadata]) -> String {
    serde_json::to_string(batch).expect("column metadata always serializes")
}

pub fn serialize_glossary(glossary: &[&GlossaryEntry]) -> String {
    glossary
        .iter()
        .map(|g| serde_json::to_string(g).expect("glossary entries always serialize"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_prompts(
    batch: &[&ColumnMetadata],
    glossary: &[&GlossaryEntry],
    round: Round,
) -> Result<PromptBundle, PromptError> {
    if batch.is_empty() {
        return Err(PromptError::EmptyBatch);
    }
    Ok(PromptBundle {
        assistant_instructions: assistant_instructions(round),
        user_query: render_query(round, &serialize_batch(batch)),
        glossary_payload: serialize_glossary(glossary),
        round,
    })
}
