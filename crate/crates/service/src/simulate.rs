//! Simulated users driving a live server over HTTP.

use std::collections::HashMap;

use anyhow::{anyhow, Context};
use dym_core::dsl::tokens_match;
use dym_core::selective::{read_records, DecisionRecord, SelectiveReport, UserModel};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::task::JoinSet;

use crate::server::{CreateSession, ItemView, JudgmentBody, SelectionBody, SessionSummary};
use crate::session::{ItemState, SessionMode};

/// Result of one simulated session.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub session: SessionSummary,
    /// Export body exactly as served.
    pub export: String,
    pub records: Vec<DecisionRecord>,
    pub report: SelectiveReport<f64>,
}

/// The user model of worker `w`. Noisy workers get distinct streams.
pub fn worker_model(user: &UserModel, w: usize) -> UserModel {
    match user {
        UserModel::Noisy { epsilon, seed } => UserModel::Noisy {
            epsilon: *epsilon,
            seed: seed.wrapping_add(w as u64),
        },
        other => other.clone(),
    }
}

/// Selection an oracle annotator makes: the first correct candidate, or
/// the top one when none is correct.
pub fn oracle_selection(item: &ItemView, gold: &[String]) -> usize {
    item.candidates
        .iter()
        .position(|c| tokens_match(&c.tokens, gold))
        .unwrap_or(0)
}

#[derive(Clone)]
struct Api {
    client: reqwest::Client,
    base: String,
}

impl Api {
    async fn check(resp: reqwest::Response) -> anyhow::Result<reqwest::Response> {
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let body = resp.text().await.unwrap_or_default();
        Err(anyhow!("server answered {status}: {body}"))
    }

    async fn get_text(&self, path: &str) -> anyhow::Result<String> {
        let resp = self.client.get(format!("{}{path}", self.base)).send().await?;
        Ok(Self::check(resp).await?.text().await?)
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> anyhow::Result<T> {
        let resp = self.client.get(format!("{}{path}", self.base)).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> anyhow::Result<T> {
        let resp = self.client.post(format!("{}{path}", self.base)).json(body).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }
}

/// Creates a session, has `quorum` workers judge (or one annotator select)
/// every open item, then exports. Items are handled concurrently; each
/// item's judgments go in worker order.
pub async fn simulate_users(
    base_url: &str,
    request: &CreateSession,
    user: &UserModel,
    gold: &HashMap<String, Vec<String>>,
) -> anyhow::Result<Simulation> {
    let api = Api {
        client: reqwest::Client::new(),
        base: base_url.trim_end_matches('/').to_string(),
    };
    let created: SessionSummary = api.post("/sessions", request).await.context("creating session")?;
    let sid = created.session_id.clone();
    let open: Vec<ItemView> = api
        .get(&format!("/sessions/{sid}/items?state={}", ItemState::AwaitingJudgment.as_str()))
        .await?;
    let mut tasks = JoinSet::new();
    for item in open {
        let gold = gold
            .get(&item.id)
            .cloned()
            .ok_or_else(|| anyhow!("no gold program for `{}`", item.id))?;
        let api = api.clone();
        let sid = sid.clone();
        let user = user.clone();
        let (mode, quorum) = (created.mode, created.quorum);
        tasks.spawn(async move {
            let path = format!("/sessions/{sid}/items/{}", item.id);
            if mode == SessionMode::Select {
                let body = SelectionBody {
                    index: Some(oracle_selection(&item, &gold)),
                    rewrite: None,
                };
                let _: DecisionRecord = api.post(&format!("{path}/selection"), &body).await?;
                return anyhow::Ok(());
            }
            let correct = item.candidate_tokens.as_deref().is_some_and(|c| tokens_match(c, &gold));
            for w in 0..quorum {
                let accept = worker_model(&user, w).judge(&item.id, correct)?;
                let body = JudgmentBody {
                    worker_id: format!("worker-{w}"),
                    accept,
                };
                let _: ItemView = api.post(&format!("{path}/judgments"), &body).await?;
            }
            Ok(())
        });
    }
    while let Some(done) = tasks.join_next().await {
        done??;
    }
    let export = api.get_text(&format!("/sessions/{sid}/export")).await?;
    let records = read_records(export.as_bytes())?;
    let report = api.get(&format!("/sessions/{sid}/report")).await?;
    let session = api.get(&format!("/sessions/{sid}")).await?;
    Ok(Simulation {
        session,
        export,
        records,
        report,
    })
}
