//! Table-metadata, glossary and ground-truth files in the SemTab JSONL formats.
//!
//! Every input is UTF-8 JSONL with one object per line. Blank lines are
//! skipped; every other line must parse, otherwise the whole load fails with
//! the offending line numbers so that no row silently drops out of a hit@k
//! denominator.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const COLUMNS_FILE: &str = "columns.jsonl";
pub const GLOSSARY_FILE: &str = "glossary.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("duplicate id `{id}` on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("empty ground-truth set for column `{0}`")]
    EmptyTruthSet(String),
    #[error("{path}: {} line(s) failed to parse: {}", .errors.len(), LineErrors(.errors))]
    Lines {
        path: PathBuf,
        errors: Vec<LineError>,
    },
}

#[derive(Debug)]
pub struct LineError {
    pub line: usize,
    pub error: CorpusError,
}

struct LineErrors<'a>(&'a [LineError]);

impl fmt::Display for LineErrors<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "line {}: {}", e.line, e.error)?;
        }
        Ok(())
    }
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Metadata of one table column. The underlying cell values are never seen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMetadata {
    pub id: String,
    pub label: String,
    pub table_id: String,
    pub table_name: String,
    pub table_columns: Vec<String>,
}

/// One controlled-vocabulary term: a DBpedia property URI or a minted id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossaryEntry {
    pub id: String,
    pub label: String,
    pub desc: String,
}

/// Correct glossary ids per column, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    truth: IndexMap<String, BTreeSet<String>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        column_id: impl Into<String>,
        ids: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<(), CorpusError> {
        let column_id = column_id.into();
        let set: BTreeSet<String> = ids.into_iter().map(Into::into).collect();
        if set.is_empty() {
            return Err(CorpusError::EmptyTruthSet(column_id));
        }
        self.truth.insert(column_id, set);
        Ok(())
    }

    pub fn get(&self, column_id: &str) -> Option<&BTreeSet<String>> {
        self.truth.get(column_id)
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeSet<String>)> {
        self.truth.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Drops entries whose column is not part of `corpus`, returning one
    /// diagnostic per dropped entry.
    pub fn retain_known_columns(&mut self, corpus: &Corpus) -> Vec<String> {
        let known: HashSet<&str> = corpus.columns.iter().map(|c| c.id.as_str()).collect();
        let mut diagnostics = Vec::new();
        self.truth.retain(|col, _| {
            let keep = known.contains(col.as_str());
            if !keep {
                diagnostics.push(format!("ground truth references unknown column `{col}`"));
            }
            keep
        });
        for d in &diagnostics {
            tracing::warn!("{d}");
        }
        diagnostics
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let rows: Vec<TruthLine> = self
            .truth
            .iter()
            .map(|(id, gt)| TruthLine {
                id: id.clone(),
                gt: gt.iter().cloned().collect(),
            })
            .collect();
        write_jsonl(path, &rows)
    }
}

#[derive(Serialize)]
struct TruthLine {
    id: String,
    gt: Vec<String>,
}

/// Loaded and validated metadata plus glossary. Immutable after load.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub columns: Vec<ColumnMetadata>,
    pub glossary: Vec<GlossaryEntry>,
}

impl Corpus {
    pub fn new(
        columns: Vec<ColumnMetadata>,
        glossary: Vec<GlossaryEntry>,
    ) -> Result<Self, CorpusError> {
        check_unique(columns.iter().map(|c| c.id.as_str()))?;
        check_unique(glossary.iter().map(|g| g.id.as_str()))?;
        Ok(Corpus { columns, glossary })
    }

    /// `(n_columns, n_glossary)`.
    pub fn counts(&self) -> (usize, usize) {
        (self.columns.len(), self.glossary.len())
    }

    pub fn glossary_ids(&self) -> HashSet<&str> {
        self.glossary.iter().map(|g| g.id.as_str()).collect()
    }

    /// Loads a directory written by [`ingest`].
    pub fn load_dir(dir: &Path) -> Result<Self, CorpusError> {
        load_corpus(&dir.join(COLUMNS_FILE), &dir.join(GLOSSARY_FILE))
    }
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for (i, id) in ids.enumerate() {
        if !seen.insert(id) {
            return Err(CorpusError::DuplicateId {
                id: id.to_string(),
                line: i + 1,
            });
        }
    }
    Ok(())
}

fn parse_object(line: &str) -> Result<Map<String, Value>, CorpusError> {
    match serde_json::from_str::<Value>(line.trim()) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(other) => Err(CorpusError::MalformedJson(format!(
            "expected a JSON object, found {}",
            json_kind(&other)
        ))),
        Err(e) => Err(CorpusError::MalformedJson(e.to_string())),
    }
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn take_string(map: &mut Map<String, Value>, field: &'static str) -> Result<String, CorpusError> {
    match map.remove(field) {
        None => Err(CorpusError::MissingField(field)),
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(CorpusError::InvalidField {
            field,
            reason: format!("expected a string, found {}", json_kind(&other)),
        }),
    }
}

fn take_id(map: &mut Map<String, Value>) -> Result<String, CorpusError> {
    let id = take_string(map, "id")?;
    if id.is_empty() {
        return Err(CorpusError::InvalidField {
            field: "id",
            reason: "must be non-empty".into(),
        });
    }
    Ok(id)
}

/// Parses one line of the table-metadata file. Extra keys are ignored.
pub fn parse_column_metadata(line: &str) -> Result<ColumnMetadata, CorpusError> {
    let mut map = parse_object(line)?;
    let id = take_id(&mut map)?;
    let label = take_string(&mut map, "label")?;
    let table_columns = match map.remove("table_columns") {
        None => return Err(CorpusError::MissingField("table_columns")),
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(CorpusError::InvalidField {
                    field: "table_columns",
                    reason: format!("expected strings, found {}", json_kind(&other)),
                }),
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(other) => {
            return Err(CorpusError::InvalidField {
                field: "table_columns",
                reason: format!("expected an array, found {}", json_kind(&other)),
            })
        }
    };
    let table_id = take_string(&mut map, "table_id")?;
    let table_name = take_string(&mut map, "table_name")?;
    if table_columns.is_empty() {
        return Err(CorpusError::InvalidField {
            field: "table_columns",
            reason: "must contain at least one label".into(),
        });
    }
    if !table_columns.contains(&label) {
        tracing::warn!(column = %id, label = %label, "label not among table_columns");
    }
    Ok(ColumnMetadata {
        id,
        label,
        table_id,
        table_name,
        table_columns,
    })
}

/// Parses one line of the glossary file. A missing `desc` becomes empty.
pub fn parse_glossary_entry(line: &str) -> Result<GlossaryEntry, CorpusError> {
    let mut map = parse_object(line)?;
    let id = take_id(&mut map)?;
    let label = take_string(&mut map, "label")?;
    let desc = match take_string(&mut map, "desc") {
        Ok(desc) => desc,
        Err(CorpusError::MissingField(_)) => {
            tracing::warn!(entry = %id, "glossary entry has no desc; using empty text");
            String::new()
        }
        Err(e) => return Err(e),
    };
    Ok(GlossaryEntry { id, label, desc })
}

fn read_to_string(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))
}

/// Parses every non-blank line, collecting all failures before giving up.
fn parse_lines<T>(
    path: &Path,
    parse: impl Fn(&str) -> Result<T, CorpusError>,
    id_of: impl Fn(&T) -> &str,
) -> Result<Vec<T>, CorpusError> {
    let text = read_to_string(path)?;
    let mut items = Vec::new();
    let mut errors = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        match parse(line) {
            Ok(item) => {
                let id = id_of(&item);
                if !seen.insert(id.to_string()) {
                    errors.push(LineError {
                        line: line_no,
                        error: CorpusError::DuplicateId {
                            id: id.to_string(),
                            line: line_no,
                        },
                    });
                } else {
                    items.push(item);
                }
            }
            Err(error) => errors.push(LineError {
                line: line_no,
                error,
            }),
        }
    }
    match errors.len() {
        0 => Ok(items),
        // A lone duplicate surfaces as itself rather than wrapped.
        1 if matches!(errors[0].error, CorpusError::DuplicateId { .. }) => {
            Err(errors.pop().unwrap().error)
        }
        _ => Err(CorpusError::Lines {
            path: path.to_path_buf(),
            errors,
        }),
    }
}

pub fn load_columns(path: &Path) -> Result<Vec<ColumnMetadata>, CorpusError> {
    parse_lines(path, parse_column_metadata, |c| &c.id)
}

pub fn load_glossary(path: &Path) -> Result<Vec<GlossaryEntry>, CorpusError> {
    parse_lines(path, parse_glossary_entry, |g| &g.id)
}

pub fn load_corpus(metadata_path: &Path, glossary_path: &Path) -> Result<Corpus, CorpusError> {
    let columns = load_columns(metadata_path)?;
    let glossary = load_glossary(glossary_path)?;
    Ok(Corpus { columns, glossary })
}

/// Parses `{"id": <column id>, "gt": <id or list of ids>}` lines.
pub fn parse_truth_line(line: &str) -> Result<(String, BTreeSet<String>), CorpusError> {
    let mut map = parse_object(line)?;
    let id = take_id(&mut map)?;
    let set: BTreeSet<String> = match map.remove("gt") {
        None => return Err(CorpusError::MissingField("gt")),
        Some(Value::String(s)) => BTreeSet::from([s]),
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(CorpusError::InvalidField {
                    field: "gt",
                    reason: format!("expected strings, found {}", json_kind(&other)),
                }),
            })
            .collect::<Result<_, _>>()?,
        Some(other) => {
            return Err(CorpusError::InvalidField {
                field: "gt",
                reason: format!("expected a string or array, found {}", json_kind(&other)),
            })
        }
    };
    if set.is_empty() {
        return Err(CorpusError::EmptyTruthSet(id));
    }
    Ok((id, set))
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, CorpusError> {
    let rows = parse_lines(path, parse_truth_line, |(id, _)| id)?;
    Ok(GroundTruth {
        truth: rows.into_iter().collect(),
    })
}

/// Writes one compact JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CorpusError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| CorpusError::MalformedJson(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    out.flush().map_err(|e| CorpusError::io(path, e))
}

/// Canonical single-line JSON for a column.
pub fn to_canonical_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("corpus types always serialize")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub n_columns: usize,
    pub n_glossary: usize,
    pub n_ground_truth: Option<usize>,
    pub diagnostics: Vec<String>,
    pub outputs: Vec<PathBuf>,
}

/// Validates the inputs and writes canonical copies into `out_dir`.
pub fn ingest(
    metadata_path: &Path,
    glossary_path: &Path,
    ground_truth_path: Option<&Path>,
    out_dir: &Path,
) -> Result<IngestSummary, CorpusError> {
    let corpus = load_corpus(metadata_path, glossary_path)?;
    fs::create_dir_all(out_dir).map_err(|e| CorpusError::io(out_dir, e))?;
    let mut outputs = vec![out_dir.join(COLUMNS_FILE), out_dir.join(GLOSSARY_FILE)];
    write_jsonl(&outputs[0], &corpus.columns)?;
    write_jsonl(&outputs[1], &corpus.glossary)?;

    let mut diagnostics = Vec::new();
    let mut n_ground_truth = None;
    if let Some(gt_path) = ground_truth_path {
        let mut gt = load_ground_truth(gt_path)?;
        diagnostics = gt.retain_known_columns(&corpus);
        let path = out_dir.join(GROUND_TRUTH_FILE);
        gt.write_jsonl(&path)?;
        outputs.push(path);
        n_ground_truth = Some(gt.len());
    }
    let (n_columns, n_glossary) = corpus.counts();
    Ok(IngestSummary {
        n_columns,
        n_glossary,
        n_ground_truth,
        diagnostics,
        outputs,
    })
}
