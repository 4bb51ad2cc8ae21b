//! Lenient extraction of `colID`/`propID` pairs from model output.
//!
//! Models answer in the single-quoted pseudo-JSON of the prompt, in real
//! JSON, inside code fences, or mixed with prose. Rather than parse a
//! document, the parser scans for `colID` and `propID` keys in order and
//! pairs them up. Surviving ids must come from the candidate glossary.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::ranker::{RankedMapping, MAX_MAPPINGS};

static KEY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?i)["']?\b(colid|propid)\b["']?\s*:\s*"#).unwrap());
static QUOTED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"'([^'\n]*)'|"([^"\n]*)""#).unwrap());
static LEADING_QUOTED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"^\s*(?:'([^'\n]*)'|"([^"\n]*)")"#).unwrap());

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no colID/propID pairs could be recovered from the response")]
    Unparseable,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedResponse {
    /// One mapping per column, in order of first appearance.
    pub mappings: Vec<RankedMapping>,
    /// Columns that were answered but kept no valid id.
    pub unanswered: Vec<String>,
    /// Ids removed because they are not in the glossary.
    pub hallucinated: Vec<String>,
}

enum Token {
    Col(String),
    Props(Vec<String>),
}

fn capture_text(c: &regex::Captures<'_>) -> String {
    c.get(1).or_else(|| c.get(2)).map(|m| m.as_str().to_string()).unwrap_or_default()
}

fn tokens(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    for key in KEY.captures_iter(text) {
        let rest = &text[key.get(0).unwrap().end()..];
        let is_col = key[1].eq_ignore_ascii_case("colid");
        if is_col {
            if let Some(c) = LEADING_QUOTED.captures(rest) {
                out.push(Token::Col(capture_text(&c)));
            }
        } else if let Some(list) = rest.strip_prefix('[') {
            let body = list.find(']').map_or(list, |end| &list[..end]);
            out.push(Token::Props(QUOTED.captures_iter(body).map(|c| capture_text(&c)).collect()));
        } else if let Some(c) = LEADING_QUOTED.captures(rest) {
            out.push(Token::Props(vec![capture_text(&c)]));
        }
    }
    out
}

/// Pairs each column with the nearest id list, accepting either key order.
fn pair(tokens: Vec<Token>) -> Vec<(String, Vec<String>)> {
    let mut pairs = Vec::new();
    let mut col: Option<String> = None;
    let mut props: Option<Vec<String>> = None;
    for t in tokens {
        match t {
            Token::Col(c) => {
                if let Some(p) = props.take() {
                    if col.is_none() {
                        pairs.push((c, p));
                        continue;
                    }
                }
                if let Some(prev) = col.replace(c) {
                    pairs.push((prev, Vec::new()));
                }
            }
            Token::Props(p) => match col.take() {
                Some(c) => pairs.push((c, p)),
                None => props = Some(p),
            },
        }
    }
    if let Some(c) = col {
        pairs.push((c, Vec::new()));
    }
    pairs
}

/// Extracts mappings, keeping only known ids, first occurrence of each, at
/// most five per column. A column repeated later in the text is ignored.
pub fn parse_llm_response(text: &str, known_ids: &HashSet<&str>) -> Result<ParsedResponse, ParseError> {
    let pairs = pair(tokens(text));
    if pairs.is_empty() {
        return Err(ParseError::Unparseable);
    }
    let mut parsed = ParsedResponse::default();
    let mut seen_cols: HashSet<String> = HashSet::new();
    for (col, ids) in pairs {
        if col.is_empty() || !seen_cols.insert(col.clone()) {
            continue;
        }
        let mut kept: Vec<String> = Vec::new();
        for id in ids {
            let id = id.trim();
            if !known_ids.contains(id) {
                parsed.hallucinated.push(id.to_string());
                continue;
            }
            if kept.len() < MAX_MAPPINGS && !kept.iter().any(|k| k == id) {
                kept.push(id.to_string());
            }
        }
        if kept.is_empty() {
            parsed.unanswered.push(col);
        } else {
            parsed.mappings.push(RankedMapping::from_ids(col, kept));
        }
    }
    Ok(parsed)
}
