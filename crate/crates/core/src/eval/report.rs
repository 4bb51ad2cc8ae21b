use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::CellAggregate;
use crate::embedding::{GlossaryStrategy, MetadataStrategy};
use crate::llm::Round;

/// Model x temperature grid of aggregated cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub round: Round,
    pub cells: Vec<CellAggregate>,
    /// Index into `cells` of the best cell by (h5, h1), earliest on ties.
    pub best: Option<usize>,
}

fn fmt_score(v: Option<f64>) -> String {
    v.map_or_else(|| "X".to_string(), |x| format!("{x:.2}"))
}

impl SweepReport {
    pub fn new(round: Round, cells: Vec<CellAggregate>) -> Self {
        let mut best: Option<usize> = None;
        for (i, c) in cells.iter().enumerate() {
            let (Some(h1), Some(h5)) = (c.mean_h1, c.mean_h5) else { continue };
            let better = match best {
                None => true,
                Some(b) => {
                    let (b1, b5) = (cells[b].mean_h1.unwrap(), cells[b].mean_h5.unwrap());
                    h5 > b5 || (h5 == b5 && h1 > b1)
                }
            };
            if better {
                best = Some(i);
            }
        }
        SweepReport { round, cells, best }
    }

    pub fn best_cell(&self) -> Option<&CellAggregate> {
        self.best.map(|i| &self.cells[i])
    }

    /// One line per cell: model, temperature, h1, h5, n_success, n_failed,
    /// status and per-repetition details. Failed cells have null scores.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            let line = json!({
                "model": c.model,
                "temperature": c.temperature,
                "h1": c.mean_h1,
                "h5": c.mean_h5,
                "n_success": c.n_success,
                "n_failed": c.n_failed,
                "status": c.status(),
                "runs": c.runs,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    fn axes(&self) -> (Vec<&str>, Vec<f64>) {
        let mut models: Vec<&str> = Vec::new();
        let mut temps: Vec<f64> = Vec::new();
        for c in &self.cells {
            if !models.contains(&c.model.as_str()) {
                models.push(&c.model);
            }
            if !temps.contains(&c.temperature) {
                temps.push(c.temperature);
            }
        }
        (models, temps)
    }

    /// Rows are models, column pairs are temperatures; failed cells print `X`
    /// and the best cell is starred.
    pub fn to_table(&self) -> String {
        let (models, temps) = self.axes();
        let name_w = models.iter().map(|m| m.len()).max().unwrap_or(0).max("model".len());
        let mut out = String::new();
        let _ = writeln!(out, "Round {}", self.round);
        let _ = write!(out, "{:name_w$}", "model");
        for t in &temps {
            let _ = write!(out, " | {:^11}", t.to_string());
        }
        out.push('\n');
        let _ = write!(out, "{:name_w$}", "");
        for _ in &temps {
            let _ = write!(out, " | {:<5} {:<5}", "h1", "h5");
        }
        out.push('\n');
        for m in &models {
            let _ = write!(out, "{m:name_w$}");
            for t in &temps {
                let idx = self.cells.iter().position(|c| c.model == *m && c.temperature == *t);
                let (h1, h5) = match idx {
                    Some(i) => {
                        let c = &self.cells[i];
                        let star = if self.best == Some(i) { "*" } else { "" };
                        (format!("{}{star}", fmt_score(c.mean_h1)), format!("{}{star}", fmt_score(c.mean_h5)))
                    }
                    None => ("-".into(), "-".into()),
                };
                let _ = write!(out, " | {h1:<5} {h5:<5}");
            }
            out.push('\n');
        }
        if let Some(b) = self.best_cell() {
            let _ = writeln!(out, "best: {} @ {}", b.model, b.temperature);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub metadata: MetadataStrategy,
    pub glossary: GlossaryStrategy,
    pub h1: f64,
    pub h5: f64,
}

/// One row per embedding combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub rows: Vec<StrategyRow>,
}

impl StrategyReport {
    pub fn best_h1(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.h1).reduce(f64::max)
    }

    pub fn best_h5(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.h5).reduce(f64::max)
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                json!({
                    "metadata": r.metadata,
                    "glossary": r.glossary,
                    "h1": r.h1,
                    "h5": r.h5,
                })
                .to_string()
                    + "\n"
            })
            .collect()
    }

    /// Starred values are the best in their column.
    pub fn to_table(&self) -> String {
        let (b1, b5) = (self.best_h1(), self.best_h5());
        let mw = self.rows.iter().map(|r| r.metadata.formula().len()).max().unwrap_or(0).max(19);
        let gw = self.rows.iter().map(|r| r.glossary.formula().len()).max().unwrap_or(0).max(18);
        let mut out = String::new();
        let _ = writeln!(out, "{:mw$} | {:gw$} | {:<5} | {:<5}", "metadata embeddings", "glossary embeddings", "h1", "h5");
        for r in &self.rows {
            let mark = |v: f64, best: Option<f64>| format!("{v:.2}{}", if Some(v) == best { "*" } else { "" });
            let _ = writeln!(
                out,
                "{:mw$} | {:gw$} | {:<5} | {:<5}",
                r.metadata.formula(),
                r.glossary.formula(),
                mark(r.h1, b1),
                mark(r.h5, b5)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(model: &str, t: f64, h: Option<(f64, f64)>) -> CellAggregate {
        CellAggregate {
            model: model.into(),
            temperature: t,
            mean_h1: h.map(|x| x.0),
            mean_h5: h.map(|x| x.1),
            n_success: usize::from(h.is_some()) * 3,
            n_failed: usize::from(h.is_none()) * 3,
            runs: vec![],
        }
    }

    #[test]
    fn best_prefers_h5_then_h1() {
        let r = SweepReport::new(
            Round::One,
            vec![
                cell("a", 0.5, Some((0.64, 0.75))),
                cell("a", 0.75, Some((0.59, 0.89))),
                cell("b", 0.5, Some((0.62, 0.89))),
                cell("b", 0.75, None),
            ],
        );
        assert_eq!(r.best, Some(2));
    }

    #[test]
    fn failed_cells_render_as_x() {
        let r = SweepReport::new(Round::Two, vec![cell("gemma-7b", 0.5, None), cell("gpt-4o", 0.5, Some((1.0, 1.0)))]);
        let table = r.to_table();
        let gemma = table.lines().find(|l| l.starts_with("gemma-7b")).unwrap();
        assert!(gemma.contains("X     X"));
        let jsonl = r.to_jsonl();
        let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(first["status"], "failed");
        assert!(first["h1"].is_null());
    }
}
