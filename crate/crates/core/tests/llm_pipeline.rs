mod common;

use std::collections::HashSet;
use std::net::SocketAddr;
use std::time::Duration;

use cva::eval::{aggregate_repetitions, evaluate_run};
use cva::llm::{run_matching, GlossaryScope, Round, RunOutcome};
use cva::mock::{serve_mock_llm, MockScript, MockServer};

use common::{fast_endpoint, run_config, self_glossary_corpus};

async fn mock(script: &str) -> MockServer {
    let addr: SocketAddr = "127.0.0.1:0".parse().unwrap();
    serve_mock_llm(addr, MockScript::parse(script, 17).unwrap()).await.unwrap()
}

#[tokio::test]
async fn echo_mapping_scores_perfectly() {
    let (corpus, gt) = self_glossary_corpus(60, 40, 1);
    let server = mock("echo-valid-mapping").await;
    let outcomes = run_matching(
        &corpus,
        &fast_endpoint(&server.base_url()),
        &run_config("m", 0.5, 2),
        Round::One,
        GlossaryScope::Full,
        None,
    )
    .await;
    assert_eq!(outcomes.len(), 2);
    for o in &outcomes {
        let m = o.mappings().expect("completed");
        assert_eq!(m.len(), 60);
        let r = evaluate_run(m, &gt);
        assert_eq!((r.h1, r.h5), (1.0, 1.0));
    }
}

#[tokio::test]
async fn hallucinations_are_filtered() {
    let (corpus, gt) = self_glossary_corpus(30, 30, 2);
    let server = mock("inject-hallucinations").await;
    let outcomes = run_matching(
        &corpus,
        &fast_endpoint(&server.base_url()),
        &run_config("m", 1.0, 1),
        Round::Two,
        GlossaryScope::Full,
        None,
    )
    .await;
    let known = corpus.glossary_ids();
    let m = outcomes[0].mappings().unwrap();
    assert!(!m.is_empty());
    for mapping in m {
        assert!(mapping.ids().iter().all(|id| known.contains(id)));
    }
    // Hallucinated ids came first; once dropped the correct id is on top.
    assert_eq!(evaluate_run(m, &gt).h1, 1.0);
}

#[tokio::test]
async fn forced_refusal_fails_every_repetition() {
    let (corpus, gt) = self_glossary_corpus(30, 30, 3);
    let server = mock("fail-rate(1.0)").await;
    let outcomes = run_matching(
        &corpus,
        &fast_endpoint(&server.base_url()),
        &run_config("m", 0.5, 3),
        Round::One,
        GlossaryScope::Full,
        None,
    )
    .await;
    assert!(outcomes.iter().all(|o| *o == RunOutcome::Failed { reason: "model refusal".into() }));
    let cell = aggregate_repetitions("m", 0.5, &outcomes, &gt);
    assert!(cell.is_failed());
}

#[tokio::test]
async fn partial_fail_rate_is_seed_deterministic() {
    let (corpus, _) = self_glossary_corpus(100, 80, 4);
    let mut config = run_config("m", 0.5, 3);
    config.batch_size = 5;
    let mut runs = Vec::new();
    for _ in 0..2 {
        let server = mock("fail-rate(0.5)").await;
        runs.push(
            run_matching(&corpus, &fast_endpoint(&server.base_url()), &config, Round::One, GlossaryScope::Full, None)
                .await,
        );
    }
    assert_eq!(runs[0], runs[1]);
    let failed: usize = runs[0]
        .iter()
        .map(|o| match o {
            RunOutcome::Completed { failed_batches, .. } => failed_batches.len(),
            RunOutcome::Failed { .. } => 20,
        })
        .sum();
    assert!(failed > 5 && failed < 55, "{failed} of 60 batches failed");
}

#[tokio::test]
async fn rate_limit_is_retried() {
    let (corpus, gt) = self_glossary_corpus(10, 10, 5);
    let server = mock("rate-limit(2)").await;
    let mut config = run_config("m", 0.5, 1);
    config.max_in_flight = 1;
    let outcomes =
        run_matching(&corpus, &fast_endpoint(&server.base_url()), &config, Round::One, GlossaryScope::Full, None).await;
    assert_eq!(evaluate_run(outcomes[0].mappings().unwrap(), &gt).h1, 1.0);

    let server = mock("rate-limit(10)").await;
    config.max_retries = 2;
    let outcomes =
        run_matching(&corpus, &fast_endpoint(&server.base_url()), &config, Round::One, GlossaryScope::Full, None).await;
    assert_eq!(outcomes[0], RunOutcome::Failed { reason: "rate limited".into() });
}

#[tokio::test]
async fn timeout_fails_the_repetition() {
    let (corpus, _) = self_glossary_corpus(10, 10, 6);
    let server = mock("timeout").await;
    let mut config = run_config("m", 0.5, 1);
    config.timeout = Duration::from_millis(200);
    config.max_retries = 1;
    let outcomes =
        run_matching(&corpus, &fast_endpoint(&server.base_url()), &config, Round::One, GlossaryScope::Full, None).await;
    assert_eq!(outcomes[0], RunOutcome::Failed { reason: "timeout".into() });
}

#[tokio::test]
async fn per_model_scripts_and_archive() {
    let (corpus, _) = self_glossary_corpus(30, 30, 7);
    let server = mock("echo-valid-mapping,bad=fail-rate(1.0)").await;
    let dir = tempfile::tempdir().unwrap();
    let endpoint = fast_endpoint(&server.base_url());
    let good = run_matching(&corpus, &endpoint, &run_config("good", 0.5, 1), Round::One, GlossaryScope::Full, Some(dir.path())).await;
    let bad = run_matching(&corpus, &endpoint, &run_config("bad", 0.5, 1), Round::One, GlossaryScope::Full, None).await;
    assert!(!good[0].is_failed());
    assert!(bad[0].is_failed());
    let req = dir.path().join("runs/good/0.5/0/0.request.json");
    let body: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(req).unwrap()).unwrap();
    assert_eq!(body["messages"][0]["role"], "system");
    assert!(dir.path().join("runs/good/0.5/0/1.response.json").exists());
}

#[tokio::test]
async fn sharded_scope_only_offers_shard_terms() {
    use cva::embedding::TrigramEmbedder;
    use cva::partition::{partition_glossary, route_metadata};

    let (corpus, _) = self_glossary_corpus(40, 40, 8);
    let backend = TrigramEmbedder::new();
    let mut plan = partition_glossary(&corpus.glossary, 4, &backend, 17).await.unwrap();
    plan.routing = route_metadata(&corpus.columns, &plan, &backend).await.unwrap();
    let server = mock("echo-valid-mapping").await;
    let outcomes = run_matching(
        &corpus,
        &fast_endpoint(&server.base_url()),
        &run_config("m", 0.5, 1),
        Round::Two,
        GlossaryScope::Sharded(&plan),
        None,
    )
    .await;
    for m in outcomes[0].mappings().unwrap() {
        let shard = plan.shard_of_column(&m.column_id).unwrap();
        let ids: HashSet<&str> = m.ids().into_iter().collect();
        assert!(ids.iter().all(|id| plan.shard_of_entry(id) == Some(shard)));
    }
}
