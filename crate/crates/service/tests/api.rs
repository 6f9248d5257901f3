mod common;

use std::collections::HashMap;

use common::{app_state, bench, spawn, test_slice, SEED};
use dym_core::dsl::Split;
use dym_core::model::InterchangeRecord;
use dym_core::selective::{evaluate, read_records, run_policy, ConfirmMode, DecisionRecord, Policy, UserModel};
use dym_service::log::read_events;
use dym_service::server::{ApiErrorBody, CreateSession, ItemView, SessionSummary, Source};
use dym_service::session::{ItemState, SessionMode};
use dym_service::simulate::simulate_users;
use dym_service::workbench::inputs;
use dym_service::Session;
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

fn corpus(mode: SessionMode, threshold: f64, limit: usize) -> CreateSession {
    CreateSession {
        mode,
        threshold,
        quorum: None,
        seed: None,
        source: Source::Corpus {
            split: Split::Test,
            offset: 0,
            limit: Some(limit),
        },
    }
}

fn gold_map(n: usize) -> HashMap<String, Vec<String>> {
    test_slice(n).0.into_iter().map(|e| (e.id.clone(), e.gold.tokens().to_vec())).collect()
}

struct Api {
    client: Client,
    base: String,
}

impl Api {
    async fn new() -> Self {
        Self {
            client: Client::new(),
            base: spawn(app_state()).await,
        }
    }

    async fn post(&self, path: &str, body: &Value) -> (StatusCode, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(body).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn post_raw(&self, path: &str, body: &'static str) -> (StatusCode, Value) {
        let r = self
            .client
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (StatusCode, String) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status(), r.text().await.unwrap())
    }

    async fn create(&self, req: &CreateSession) -> SessionSummary {
        let (status, body) = self.post("/sessions", &serde_json::to_value(req).unwrap()).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        serde_json::from_value(body).unwrap()
    }

    async fn items(&self, sid: &str, state: ItemState) -> Vec<ItemView> {
        let (status, body) = self.get(&format!("/sessions/{sid}/items?state={}", state.as_str())).await;
        assert_eq!(status, StatusCode::OK);
        serde_json::from_str(&body).unwrap()
    }
}

fn code(body: &Value) -> String {
    serde_json::from_value::<ApiErrorBody>(body.clone()).unwrap().code
}

#[tokio::test(flavor = "multi_thread")]
async fn endpoints_and_error_codes() {
    let api = Api::new().await;
    let s = api.create(&corpus(SessionMode::ConfirmChosen, 0.6, 100)).await;
    assert_eq!(s.items, 100);
    assert_eq!(s.quorum, 3);
    assert_eq!(s.states.values().sum::<usize>(), 100);
    let sid = &s.session_id;

    let open = api.items(sid, ItemState::AwaitingJudgment).await;
    assert_eq!(open.len(), s.states["awaiting-judgment"]);
    let (status, all) = api.get(&format!("/sessions/{sid}/items")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_str::<Vec<ItemView>>(&all).unwrap().len(), 100);
    // gold programs are never sent
    assert!(!all.contains("gold"));

    let item = &open[0];
    let path = format!("/sessions/{sid}/items/{}/judgments", item.id);
    let (status, _) = api.post(&path, &json!({"worker_id": "a", "accept": true})).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = api.post(&path, &json!({"worker_id": "a", "accept": false})).await;
    assert_eq!((status, code(&body).as_str()), (StatusCode::CONFLICT, "duplicate_judgment"));
    let (status, body) = api.post(&path, &json!({"worker_id": "", "accept": true})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    let (status, body) = api.post(&path, &json!({"worker_id": "b"})).await;
    assert_eq!((status, code(&body).as_str()), (StatusCode::BAD_REQUEST, "bad_request"));
    let (status, body) = api.post_raw(&path, "{not json").await;
    assert_eq!((status, code(&body).as_str()), (StatusCode::BAD_REQUEST, "bad_request"));
    let (status, body) = api.post(&path, &json!({"worker_id": "b", "accept": true, "extra": 1})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    let (status, _) = api.post(&path, &json!({"worker_id": "b", "accept": true})).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = api.post(&path, &json!({"worker_id": "c", "accept": false})).await;
    assert_eq!(status, StatusCode::OK);
    let view: ItemView = serde_json::from_value(body).unwrap();
    assert_eq!(view.state, ItemState::Executed);
    assert_eq!(view.unanimous, Some(false));
    assert_eq!(view.record.unwrap().executed_tokens, item.candidate_tokens);
    let (status, body) = api.post(&path, &json!({"worker_id": "d", "accept": false})).await;
    assert_eq!((status, code(&body).as_str()), (StatusCode::CONFLICT, "item_closed"));

    let (status, body) = api
        .post(&format!("/sessions/{sid}/items/nope/judgments"), &json!({"worker_id": "a", "accept": true}))
        .await;
    assert_eq!((status, code(&body).as_str()), (StatusCode::NOT_FOUND, "unknown_item"));
    let (status, body) = api.get("/sessions/zzz/report").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(serde_json::from_str::<ApiErrorBody>(&body).unwrap().code, "unknown_session");
    let (status, _) = api.get(&format!("/sessions/{sid}/items?state=bogus")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = api
        .post(&format!("/sessions/{sid}/items/{}/selection", open[1].id), &json!({"index": 0}))
        .await;
    assert_eq!((status, code(&body).as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "wrong_mode"));

    let (status, body) = api
        .post("/sessions", &json!({"mode": "confirm-chosen", "threshold": -1.0, "source": {"kind": "corpus", "split": "test"}}))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    let (status, body) = api
        .post("/sessions", &json!({"mode": "confirm-chosen", "threshold": 0.5, "source": {"kind": "corpus", "split": "test", "offset": 100000}}))
        .await;
    assert_eq!((status, code(&body).as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "empty_input"));
    let (status, _) = api.post("/sessions", &json!({"mode": "sideways", "threshold": 0.5})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, summary) = api.get(&format!("/sessions/{sid}")).await;
    assert_eq!(status, StatusCode::OK);
    let summary: SessionSummary = serde_json::from_str(&summary).unwrap();
    assert_eq!(summary.states["executed"], 1);
    let (_, log) = api.get(&format!("/sessions/{sid}/log")).await;
    assert_eq!(log.lines().count(), summary.log_position);
}

#[tokio::test(flavor = "multi_thread")]
async fn export_is_idempotent_and_requires_a_decision() {
    let api = Api::new().await;
    let s = api.create(&corpus(SessionMode::ConfirmChosen, 1.01, 10)).await;
    let sid = &s.session_id;
    if !s.states.contains_key("abstained") {
        let (status, body) = api.get(&format!("/sessions/{sid}/export")).await;
        assert_eq!(status, StatusCode::CONFLICT);
        assert_eq!(serde_json::from_str::<ApiErrorBody>(&body).unwrap().code, "nothing_to_export");
    }
    let s = api.create(&corpus(SessionMode::ConfirmChosen, 0.0, 50)).await;
    let sid = &s.session_id;
    let (status, first) = api.get(&format!("/sessions/{sid}/export")).await;
    assert_eq!(status, StatusCode::OK);
    let (_, second) = api.get(&format!("/sessions/{sid}/export")).await;
    assert_eq!(first, second);
    assert_eq!(read_records(first.as_bytes()).unwrap().len(), 50);
    let r = api.client.get(format!("{}/sessions/{sid}/export", api.base)).send().await.unwrap();
    assert_eq!(r.headers()["content-type"], "application/x-ndjson");
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_judgments_replay_to_the_served_state() {
    let api = Api::new().await;
    let s = api.create(&corpus(SessionMode::ConfirmReparsed, 0.7, 150)).await;
    let sid = s.session_id.clone();
    let open = api.items(&sid, ItemState::AwaitingJudgment).await;
    assert!(open.len() >= 5);
    let mut tasks = tokio::task::JoinSet::new();
    for (k, item) in open.iter().enumerate() {
        for w in 0..3 {
            let client = api.client.clone();
            let url = format!("{}/sessions/{sid}/items/{}/judgments", api.base, item.id);
            let accept = (k + w) % 3 != 0;
            tasks.spawn(async move {
                let body = json!({"worker_id": format!("w{w}"), "accept": accept});
                client.post(url).json(&body).send().await.unwrap().status()
            });
        }
    }
    // the same worker twice on one item: exactly one of the racers wins
    let dup_item = open[0].id.clone();
    for _ in 0..4 {
        let client = api.client.clone();
        let url = format!("{}/sessions/{sid}/items/{dup_item}/judgments", api.base);
        tasks.spawn(async move {
            client
                .post(url)
                .json(&json!({"worker_id": "dup", "accept": true}))
                .send()
                .await
                .unwrap()
                .status()
        });
    }
    let mut statuses = Vec::new();
    while let Some(s) = tasks.join_next().await {
        statuses.push(s.unwrap());
    }
    assert!(statuses.iter().all(|s| *s == StatusCode::OK || *s == StatusCode::CONFLICT));
    assert_eq!(api.items(&sid, ItemState::AwaitingJudgment).await.len(), 0);

    let (_, log) = api.get(&format!("/sessions/{sid}/log")).await;
    let replayed = Session::replay(&read_events(log.as_bytes()).unwrap()).unwrap();
    let (_, all) = api.get(&format!("/sessions/{sid}/items")).await;
    let served: Vec<ItemView> = serde_json::from_str(&all).unwrap();
    let rebuilt: Vec<ItemView> = replayed.state().items.iter().map(ItemView::from).collect();
    assert_eq!(served, rebuilt);
    let (_, export) = api.get(&format!("/sessions/{sid}/export")).await;
    assert_eq!(read_records(export.as_bytes()).unwrap(), replayed.export_records().unwrap());
}

async fn oracle_matches_offline(mode: SessionMode, confirm: ConfirmMode, threshold: f64, n: usize) {
    let api = Api::new().await;
    let sim = simulate_users(&api.base, &corpus(mode, threshold, n), &UserModel::Oracle, &gold_map(n))
        .await
        .unwrap();
    let b = bench();
    let (examples, decodes) = test_slice(n);
    let policy = Policy::DidYouMean {
        threshold,
        mode: confirm,
        user: UserModel::Oracle,
    };
    let offline = run_policy(&policy, &inputs(&examples, &decodes), &b.policy_models()).unwrap();
    assert_eq!(sim.records, offline);
    assert_eq!(sim.report, evaluate(&offline).unwrap());
    assert_eq!(sim.session.states.get("awaiting-judgment"), None);
}

#[tokio::test(flavor = "multi_thread")]
async fn oracle_chosen_session_equals_offline_policy() {
    oracle_matches_offline(SessionMode::ConfirmChosen, ConfirmMode::Chosen, 0.6, 200).await;
}

#[tokio::test(flavor = "multi_thread")]
async fn oracle_reparsed_session_equals_offline_policy() {
    oracle_matches_offline(SessionMode::ConfirmReparsed, ConfirmMode::Reparsed, 0.6, 200).await;
}

#[tokio::test(flavor = "multi_thread")]
async fn accepted_reparse_is_what_gets_exported() {
    let api = Api::new().await;
    let s = api.create(&corpus(SessionMode::ConfirmReparsed, 0.7, 200)).await;
    let sid = &s.session_id;
    let open = api.items(sid, ItemState::AwaitingJudgment).await;
    let differing = open
        .iter()
        .find(|i| i.candidate_tokens.is_some())
        .expect("an open item with a reparse");
    let path = format!("/sessions/{sid}/items/{}/judgments", differing.id);
    for w in 0..3 {
        api.post(&path, &json!({"worker_id": format!("w{w}"), "accept": true})).await;
    }
    let (_, export) = api.get(&format!("/sessions/{sid}/export")).await;
    let records: Vec<DecisionRecord> = read_records(export.as_bytes()).unwrap();
    let rec = records.iter().find(|r| r.id == differing.id).unwrap();
    assert_eq!(rec.executed_tokens, differing.candidate_tokens);
    assert_eq!(rec.gloss, differing.gloss);
    assert_eq!(rec.judgment, Some(true));
}

#[tokio::test(flavor = "multi_thread")]
async fn select_session_over_http() {
    let api = Api::new().await;
    let s = api.create(&corpus(SessionMode::Select, 0.6, 100)).await;
    let sid = &s.session_id;
    let open = api.items(sid, ItemState::AwaitingJudgment).await;
    assert!(open.iter().all(|i| !i.candidates.is_empty()));
    let path = |id: &str| format!("/sessions/{sid}/items/{id}/selection");
    let (status, body) = api.post(&path(&open[0].id), &json!({})).await;
    assert_eq!((status, code(&body).as_str()), (StatusCode::BAD_REQUEST, "bad_request"));
    let (status, _) = api.post(&path(&open[0].id), &json!({"index": 0, "rewrite": "x"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, body) = api.post(&path(&open[0].id), &json!({"index": 99})).await;
    assert_eq!((status, code(&body).as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "index_out_of_range"));
    let (status, body) = api.post(&path(&open[0].id), &json!({"index": 0})).await;
    assert_eq!(status, StatusCode::OK);
    let rec: DecisionRecord = serde_json::from_value(body).unwrap();
    assert_eq!(rec.executed_tokens.as_ref(), Some(&open[0].candidates[0].tokens));
    let (status, body) = api.post(&path(&open[0].id), &json!({"index": 0})).await;
    assert_eq!((status, code(&body).as_str()), (StatusCode::CONFLICT, "item_closed"));
    let (status, body) = api.post(&path(&open[1].id), &json!({"rewrite": open[1].utterance})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let (_, report) = api.get(&format!("/sessions/{sid}/report")).await;
    let report: Value = serde_json::from_str(&report).unwrap();
    assert!(report["coverage"].as_f64().unwrap() > 0.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn interchange_source_matches_corpus_source() {
    let api = Api::new().await;
    let (examples, decodes) = test_slice(40);
    let records: Vec<InterchangeRecord> = examples
        .iter()
        .zip(&decodes)
        .map(|(e, d)| InterchangeRecord::from_decode(e.id.clone(), d, e.gold.tokens()))
        .collect();
    let from_file = api
        .create(&CreateSession {
            mode: SessionMode::ConfirmChosen,
            threshold: 0.6,
            quorum: Some(1),
            seed: Some(SEED),
            source: Source::Interchange { records: records.clone() },
        })
        .await;
    let mut req = corpus(SessionMode::ConfirmChosen, 0.6, 40);
    req.quorum = Some(1);
    let from_corpus = api.create(&req).await;
    assert_eq!(from_file.states, from_corpus.states);
    let (_, a) = api.get(&format!("/sessions/{}/items", from_file.session_id)).await;
    let (_, b) = api.get(&format!("/sessions/{}/items", from_corpus.session_id)).await;
    assert_eq!(a, b);

    let mut bad = records;
    bad[0].gold_tokens.push("extra".into());
    let (status, body) = api
        .post(
            "/sessions",
            &json!({"mode": "confirm-chosen", "threshold": 0.6, "source": {"kind": "interchange", "records": bad}}),
        )
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
}

#[tokio::test(flavor = "multi_thread")]
async fn log_directory_holds_replayable_logs() {
    let dir = tempfile::tempdir().unwrap();
    let client = Client::new();
    let base = spawn(app_state().with_log_dir(Some(dir.path().to_path_buf()))).await;
    let sim = simulate_users(
        &base,
        &corpus(SessionMode::ConfirmChosen, 0.6, 80),
        &UserModel::Noisy {
            epsilon: 0.3,
            seed: SEED,
        },
        &gold_map(80),
    )
    .await
    .unwrap();
    let sid = &sim.session.session_id;
    let file = std::fs::read_to_string(dir.path().join(format!("{sid}.jsonl"))).unwrap();
    let served = client
        .get(format!("{base}/sessions/{sid}/log"))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    assert_eq!(file, served);
    let replayed = Session::replay(&read_events(file.as_bytes()).unwrap()).unwrap();
    assert_eq!(replayed.export_records().unwrap(), sim.records);
}
