#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use dym_core::dsl::{DialogueExample, Split};
use dym_core::model::ScoredDecode;
use dym_service::server::{router, AppState};
use dym_service::session::{Session, SessionMode, SessionSettings};
use dym_service::workbench::{inputs, Workbench};
use dym_service::Config;

pub const SEED: u64 = 7;

/// Default corpus and models at seed 7, built once per test binary.
pub fn bench() -> &'static Workbench {
    static BENCH: OnceLock<Workbench> = OnceLock::new();
    BENCH.get_or_init(|| Workbench::build(Config::default().with_seed(Some(SEED))).unwrap())
}

pub fn test_slice(n: usize) -> (Vec<DialogueExample>, Vec<ScoredDecode<f64>>) {
    let b = bench();
    let examples: Vec<_> = b.split(Split::Test).into_iter().take(n).collect();
    let decodes = b.decodes(&examples);
    (examples, decodes)
}

pub fn settings(mode: SessionMode, threshold: f64, quorum: usize) -> SessionSettings {
    SessionSettings {
        mode,
        threshold,
        quorum,
        seed: SEED,
    }
}

pub fn session(n: usize, mode: SessionMode, threshold: f64, quorum: usize) -> Session {
    let b = bench();
    let (examples, decodes) = test_slice(n);
    Session::create("t", &inputs(&examples, &decodes), &b.runtime(), settings(mode, threshold, quorum), b.world())
        .unwrap()
}

pub fn app_state() -> AppState {
    let b = bench();
    AppState::new(b.runtime(), b.corpus.clone(), b.world()).with_defaults(3, SEED)
}

/// Serves `state` on an ephemeral local port and returns its base URL.
pub async fn spawn(state: AppState) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(Arc::new(state))).await.unwrap() });
    format!("http://{addr}")
}
