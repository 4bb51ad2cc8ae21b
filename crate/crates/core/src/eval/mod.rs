//! hit@1 / hit@5 scoring, aggregation over repetitions, and sweep reports.
//!
//! Scores are always averaged over every ground-truth column: a column with
//! no prediction is a miss, so denominators never depend on what a matcher
//! chose to answer.

mod report;
mod sweep;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::GroundTruth;
use crate::llm::RunOutcome;
use crate::ranker::RankedMapping;

pub use report::{StrategyReport, StrategyRow, SweepReport};
pub use sweep::{strategy_sweep, sweep, SweepConfig, SweepMode, STANDARD_COMBINATIONS};

/// 1 when any of the first `k` ids is correct.
pub fn hit_at_k<S: AsRef<str>>(ranked: &[S], truth: &BTreeSet<String>, k: usize) -> u32 {
    u32::from(ranked.iter().take(k).any(|id| truth.contains(id.as_ref())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub h1: f64,
    pub h5: f64,
    pub hits1: usize,
    pub hits5: usize,
    pub n_columns: usize,
    pub n_answered: usize,
    pub diagnostics: Vec<String>,
}

pub fn evaluate_run(mappings: &[RankedMapping], ground_truth: &GroundTruth) -> EvalResult {
    let mut diagnostics = Vec::new();
    let mut by_col: HashMap<&str, &RankedMapping> = HashMap::new();
    for m in mappings {
        if ground_truth.get(&m.column_id).is_none() {
            diagnostics.push(format!("prediction for column `{}` not in ground truth", m.column_id));
        }
        if by_col.insert(m.column_id.as_str(), m).is_some() {
            diagnostics.push(format!("several predictions for column `{}`; last one used", m.column_id));
        }
    }
    let (mut hits1, mut hits5, mut answered) = (0usize, 0usize, 0usize);
    for (col, truth) in ground_truth.iter() {
        let Some(m) = by_col.get(col) else { continue };
        let ids = m.ids();
        if !ids.is_empty() {
            answered += 1;
        }
        hits1 += hit_at_k(&ids, truth, 1) as usize;
        hits5 += hit_at_k(&ids, truth, 5) as usize;
    }
    let n = ground_truth.len();
    let ratio = |hits: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    EvalResult {
        h1: ratio(hits1),
        h5: ratio(hits5),
        hits1,
        hits5,
        n_columns: n,
        n_answered: answered,
        diagnostics,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionSummary {
    pub repetition: usize,
    pub status: String,
    pub h1: Option<f64>,
    pub h5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Mean scores of one model-temperature cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub model: String,
    pub temperature: f64,
    /// `None` exactly when every repetition failed.
    pub mean_h1: Option<f64>,
    pub mean_h5: Option<f64>,
    pub n_success: usize,
    pub n_failed: usize,
    pub runs: Vec<RepetitionSummary>,
}

impl CellAggregate {
    pub fn is_failed(&self) -> bool {
        self.n_success == 0
    }

    pub fn status(&self) -> &'static str {
        if self.is_failed() {
            "failed"
        } else {
            "ok"
        }
    }
}

/// Averages completed repetitions; failed ones are counted, not averaged.
pub fn aggregate_repetitions(
    model: &str,
    temperature: f64,
    outcomes: &[RunOutcome],
    ground_truth: &GroundTruth,
) -> CellAggregate {
    let mut runs = Vec::with_capacity(outcomes.len());
    let (mut sum1, mut sum5, mut ok) = (0.0, 0.0, 0usize);
    for (i, o) in outcomes.iter().enumerate() {
        match o {
            RunOutcome::Completed { mappings, .. } => {
                let r = evaluate_run(mappings, ground_truth);
                sum1 += r.h1;
                sum5 += r.h5;
                ok += 1;
                runs.push(RepetitionSummary {
                    repetition: i,
                    status: "completed".into(),
                    h1: Some(r.h1),
                    h5: Some(r.h5),
                    reason: None,
                });
            }
            RunOutcome::Failed { reason } => runs.push(RepetitionSummary {
                repetition: i,
                status: "failed".into(),
                h1: None,
                h5: None,
                reason: Some(reason.clone()),
            }),
        }
    }
    let mean = |s: f64| (ok > 0).then(|| s / ok as f64);
    CellAggregate {
        model: model.to_string(),
        temperature,
        mean_h1: mean(sum1),
        mean_h5: mean(sum5),
        n_success: ok,
        n_failed: outcomes.len() - ok,
        runs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn truth(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hit_at_k_cases() {
        let x = truth(&["X"]);
        assert_eq!(hit_at_k(&["X", "Y", "Z"], &x, 1), 1);
        assert_eq!(hit_at_k(&["Y", "X"], &x, 1), 0);
        assert_eq!(hit_at_k(&["Y", "X"], &x, 5), 1);
        let empty: [&str; 0] = [];
        assert_eq!(hit_at_k(&empty, &x, 1), 0);
        assert_eq!(hit_at_k(&empty, &x, 5), 0);
        assert_eq!(hit_at_k(&["A", "B", "C", "D", "E", "X"], &x, 5), 0);
        assert_eq!(hit_at_k(&["Y", "B"], &truth(&["X", "B"]), 5), 1);
    }

    fn gt(n: usize) -> GroundTruth {
        let mut g = GroundTruth::new();
        for i in 0..n {
            g.insert(format!("c{i}"), [format!("v{i}")]).unwrap();
        }
        g
    }

    #[test]
    fn perfect_and_empty_runs() {
        let g = gt(4);
        let perfect: Vec<RankedMapping> = (0..4).map(|i| RankedMapping::from_ids(format!("c{i}"), [format!("v{i}")])).collect();
        let r = evaluate_run(&perfect, &g);
        assert_eq!((r.h1, r.h5, r.n_answered), (1.0, 1.0, 4));
        let r = evaluate_run(&[], &g);
        assert_eq!((r.h1, r.h5, r.n_answered, r.n_columns), (0.0, 0.0, 0, 4));
    }

    #[test]
    fn unknown_prediction_is_diagnosed() {
        let r = evaluate_run(&[RankedMapping::from_ids("ghost", ["v"])], &gt(2));
        assert_eq!(r.diagnostics.len(), 1);
        assert_eq!(r.h5, 0.0);
    }

    fn completed(mappings: Vec<RankedMapping>) -> RunOutcome {
        RunOutcome::Completed {
            mappings,
            unanswered: vec![],
            failed_batches: vec![],
            raw_responses: vec![],
        }
    }

    fn hits(n_hit: usize) -> Vec<RankedMapping> {
        (0..n_hit).map(|i| RankedMapping::from_ids(format!("c{i}"), [format!("v{i}")])).collect()
    }

    #[test]
    fn mean_over_three_runs() {
        let g = gt(3);
        let outcomes = vec![completed(hits(1)), completed(hits(1)), completed(hits(2))];
        let cell = aggregate_repetitions("m", 0.5, &outcomes, &g);
        assert!((cell.mean_h1.unwrap() - 4.0 / 9.0).abs() < 1e-12);
        assert_eq!((cell.n_success, cell.n_failed), (3, 0));
    }

    #[test]
    fn all_failed_and_partial() {
        let g = gt(3);
        let failed = || RunOutcome::Failed { reason: "timeout".into() };
        let cell = aggregate_repetitions("m", 1.5, &[failed(), failed(), failed()], &g);
        assert!(cell.is_failed());
        assert_eq!(cell.mean_h1, None);
        assert_eq!(cell.n_failed, 3);

        let cell = aggregate_repetitions("m", 1.5, &[completed(hits(3)), completed(hits(0)), failed()], &g);
        assert_eq!(cell.mean_h1, Some(0.5));
        assert_eq!((cell.n_success, cell.n_failed), (2, 1));
        assert_eq!(cell.status(), "ok");
    }

    fn arb_run() -> impl Strategy<Value = (usize, Vec<Vec<usize>>)> {
        (1usize..12).prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec(proptest::collection::vec(0usize..15, 0..7), n),
            )
        })
    }

    proptest! {
        #[test]
        fn scores_are_bounded_multiples((n, preds) in arb_run(), shuffle_seed in any::<u64>()) {
            let g = gt(n);
            let mappings: Vec<RankedMapping> = preds
                .iter()
                .enumerate()
                .map(|(i, ids)| RankedMapping::from_ids(format!("c{i}"), ids.iter().map(|v| format!("v{v}"))))
                .collect();
            let r = evaluate_run(&mappings, &g);
            prop_assert!(0.0 <= r.h1 && r.h1 <= r.h5 && r.h5 <= 1.0);
            prop_assert!(((r.h1 * n as f64) - (r.h1 * n as f64).round()).abs() < 1e-9);
            prop_assert!(((r.h5 * n as f64) - (r.h5 * n as f64).round()).abs() < 1e-9);

            let mut rotated = mappings.clone();
            rotated.rotate_left((shuffle_seed as usize) % mappings.len().max(1));
            prop_assert_eq!(evaluate_run(&rotated, &g).h1, r.h1);
            prop_assert_eq!(evaluate_run(&rotated, &g).h5, r.h5);

            let same = vec![completed(mappings.clone()), completed(mappings.clone()), completed(mappings)];
            let cell = aggregate_repetitions("m", 1.0, &same, &g);
            prop_assert!((cell.mean_h1.unwrap() - r.h1).abs() < 1e-12);
            prop_assert!((cell.mean_h5.unwrap() - r.h5).abs() < 1e-12);
        }
    }
}
