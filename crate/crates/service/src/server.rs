//! HTTP+JSON API over sessions.
//!
//! Each session has one writer: a mutex around the session and its log
//! file. Readers never take that mutex; they clone the latest published
//! snapshot, which the writer swaps in after every operation.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dym_core::dsl::{DialogueExample, Split, WorldState};
use dym_core::model::{InterchangeRecord, ModelInput};
use dym_core::selective::{write_records, DecisionRecord, SelectiveReport};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::log::LogWriter;
use crate::session::{
    Item, ItemState, Judgment, Provenance, Runtime, Selection, Session, SessionError, SessionMode, SessionSettings,
    SessionState, DEFAULT_QUORUM,
};
use crate::workbench::{examples_for, inputs, join_interchange};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ApiErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ApiErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn unknown_session(sid: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("unknown session `{sid}`"))
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        use SessionError::*;
        let status = match &e {
            UnknownItem(_) => StatusCode::NOT_FOUND,
            DuplicateJudgment { .. } | ItemClosed(_) | NotDecided(_) | NothingToExport => StatusCode::CONFLICT,
            EmptyInput | InvalidThreshold(_) | InvalidQuorum | DuplicateItem(_) | WrongMode { .. }
            | IndexOutOfRange { .. } | EmptyRewrite | RewriteUnparsed(_) | EmptyWorker => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ModelMissing(_) => StatusCode::SERVICE_UNAVAILABLE,
            Replay(_) | Selective(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Where session items come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    /// A contiguous slice of one corpus split, parsed by the built-in model.
    Corpus {
        split: Split,
        #[serde(default)]
        offset: usize,
        #[serde(default)]
        limit: Option<usize>,
    },
    /// External predictions for corpus examples.
    Interchange { records: Vec<InterchangeRecord> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub mode: SessionMode,
    pub threshold: f64,
    #[serde(default)]
    pub quorum: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub mode: SessionMode,
    pub threshold: f64,
    pub quorum: usize,
    pub items: usize,
    pub log_position: usize,
    pub states: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub tokens: Vec<String>,
    pub gloss: Option<String>,
    pub confidence: f64,
}

/// What clients see of an item. Gold programs stay on the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub id: String,
    pub context_user: Option<String>,
    pub context_agent: Option<String>,
    pub utterance: String,
    pub confidence: f64,
    pub state: ItemState,
    pub gloss: Option<String>,
    /// Program that runs if the item is accepted.
    pub candidate_tokens: Option<Vec<String>>,
    pub candidates: Vec<CandidateView>,
    pub judgments: Vec<Judgment>,
    pub unanimous: Option<bool>,
    pub selection: Option<Selection>,
    pub provenance: Option<Provenance>,
    pub record: Option<DecisionRecord>,
}

impl From<&Item> for ItemView {
    fn from(i: &Item) -> Self {
        Self {
            id: i.id.clone(),
            context_user: i.context_user.clone(),
            context_agent: i.context_agent.clone(),
            utterance: i.utterance.clone(),
            confidence: i.confidence,
            state: i.state,
            gloss: i.gloss.clone(),
            candidate_tokens: i.candidate.clone(),
            candidates: i
                .candidates
                .iter()
                .map(|c| CandidateView {
                    tokens: c.tokens.clone(),
                    gloss: c.gloss.clone(),
                    confidence: c.confidence,
                })
                .collect(),
            judgments: i.judgments.clone(),
            unanimous: i.unanimous,
            selection: i.selection.clone(),
            provenance: i.provenance,
            record: i.record.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgmentBody {
    pub worker_id: String,
    pub accept: bool,
}

/// Exactly one of the two fields must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ItemsQuery {
    state: Option<ItemState>,
}

struct Writer {
    session: Session,
    log: Option<LogWriter>,
}

struct SessionHandle {
    writer: Mutex<Writer>,
    snapshot: RwLock<Arc<SessionState>>,
    log: RwLock<Arc<Vec<String>>>,
}

impl SessionHandle {
    fn read(&self) -> Arc<SessionState> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Runs one write, appends its events to the log file and publishes
    /// the new state.
    async fn write<T>(&self, op: impl FnOnce(&mut Session) -> Result<T, SessionError>) -> ApiResult<T> {
        let mut guard = self.writer.lock().await;
        let Writer { session, log } = &mut *guard;
        let before = session.log().len();
        let result = op(session);
        let fresh = &session.log()[before..];
        if !fresh.is_empty() {
            if let Some(file) = log {
                file.append(fresh)
                    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "log_write", e.to_string()))?;
            }
            let mut lines = self.log.read().expect("log lock").as_ref().clone();
            lines.extend(fresh.iter().map(crate::log::event_line));
            *self.log.write().expect("log lock") = Arc::new(lines);
            *self.snapshot.write().expect("snapshot lock") = Arc::new(session.state().clone());
        }
        Ok(result?)
    }
}

/// Shared server state.
pub struct AppState {
    runtime: Arc<Runtime>,
    corpus: Arc<Vec<DialogueExample>>,
    world: WorldState,
    quorum: usize,
    seed: u64,
    log_dir: Option<PathBuf>,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(runtime: Runtime, corpus: Vec<DialogueExample>, world: WorldState) -> Self {
        Self {
            runtime: Arc::new(runtime),
            corpus: Arc::new(corpus),
            world,
            quorum: DEFAULT_QUORUM,
            seed: 0,
            log_dir: None,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    /// Default quorum and seed for sessions that do not set them.
    pub fn with_defaults(mut self, quorum: usize, seed: u64) -> Self {
        self.quorum = quorum;
        self.seed = seed;
        self
    }

    /// Writes each session's log to `<dir>/<session id>.jsonl`.
    pub fn with_log_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.log_dir = dir;
        self
    }

    fn handle(&self, sid: &str) -> ApiResult<Arc<SessionHandle>> {
        self.sessions
            .read()
            .expect("session table lock")
            .get(sid)
            .cloned()
            .ok_or_else(|| ApiError::unknown_session(sid))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{sid}", get(get_session))
        .route("/sessions/{sid}/items", get(list_items))
        .route("/sessions/{sid}/items/{iid}", get(get_item))
        .route("/sessions/{sid}/items/{iid}/judgments", post(submit_judgment))
        .route("/sessions/{sid}/items/{iid}/selection", post(submit_selection))
        .route("/sessions/{sid}/report", get(report))
        .route("/sessions/{sid}/export", get(export))
        .route("/sessions/{sid}/log", get(event_log))
        .with_state(state)
}

/// Serves the API until the process is stopped.
pub async fn serve(state: Arc<AppState>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn summary(state: &SessionState, log_position: usize) -> SessionSummary {
    let mut states = BTreeMap::new();
    for item in &state.items {
        *states.entry(item.state.as_str().to_string()).or_insert(0) += 1;
    }
    SessionSummary {
        session_id: state.id.clone(),
        mode: state.mode,
        threshold: state.threshold,
        quorum: state.quorum,
        items: state.items.len(),
        log_position,
        states,
    }
}

fn build_session(app: &AppState, sid: String, req: CreateSession) -> ApiResult<Session> {
    let parse = app.runtime.parse.as_deref().ok_or(SessionError::ModelMissing("parse"))?;
    let (examples, decodes) = match req.source {
        Source::Corpus { split, offset, limit } => {
            let examples: Vec<DialogueExample> = app
                .corpus
                .iter()
                .filter(|e| e.split == split)
                .skip(offset)
                .take(limit.unwrap_or(usize::MAX))
                .cloned()
                .collect();
            let decodes = examples
                .iter()
                .map(|ex| parse.decode_greedy(&ModelInput::parse(ex), app.runtime.max_len))
                .collect();
            (examples, decodes)
        }
        Source::Interchange { records } => {
            let examples = examples_for(&app.corpus, &records).map_err(|e| ApiError::bad_request(e.to_string()))?;
            let decodes = join_interchange(&examples, &records).map_err(|e| ApiError::bad_request(e.to_string()))?;
            (examples, decodes)
        }
    };
    let settings = SessionSettings {
        mode: req.mode,
        threshold: req.threshold,
        quorum: req.quorum.unwrap_or(app.quorum),
        seed: req.seed.unwrap_or(app.seed),
    };
    Ok(Session::create(sid, &inputs(&examples, &decodes), &app.runtime, settings, app.world.clone())?)
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionSummary>)> {
    let Json(req) = body?;
    let sid = format!("s{:04}", app.next_id.fetch_add(1, Ordering::SeqCst));
    let session = {
        let app = app.clone();
        let sid = sid.clone();
        tokio::task::spawn_blocking(move || build_session(&app, sid, req))
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??
    };
    let mut log = match &app.log_dir {
        Some(dir) => Some(
            LogWriter::create(&dir.join(format!("{sid}.jsonl")))
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "log_write", e.to_string()))?,
        ),
        None => None,
    };
    if let Some(file) = &mut log {
        file.append(session.log())
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "log_write", e.to_string()))?;
    }
    let body = summary(session.state(), session.log().len());
    let handle = SessionHandle {
        snapshot: RwLock::new(Arc::new(session.state().clone())),
        log: RwLock::new(Arc::new(session.log().iter().map(crate::log::event_line).collect())),
        writer: Mutex::new(Writer { session, log }),
    };
    app.sessions
        .write()
        .expect("session table lock")
        .insert(sid, Arc::new(handle));
    Ok((StatusCode::CREATED, Json(body)))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(sid): Path<String>) -> ApiResult<Json<SessionSummary>> {
    let h = app.handle(&sid)?;
    let log_len = h.log.read().expect("log lock").len();
    Ok(Json(summary(&h.read(), log_len)))
}

async fn list_items(
    State(app): State<Arc<AppState>>,
    Path(sid): Path<String>,
    query: Result<Query<ItemsQuery>, QueryRejection>,
) -> ApiResult<Json<Vec<ItemView>>> {
    let Query(q) = query?;
    let state = app.handle(&sid)?.read();
    Ok(Json(state.items_in(q.state).map(ItemView::from).collect()))
}

async fn get_item(
    State(app): State<Arc<AppState>>,
    Path((sid, iid)): Path<(String, String)>,
) -> ApiResult<Json<ItemView>> {
    let state = app.handle(&sid)?.read();
    let item = state.item(&iid).ok_or_else(|| SessionError::UnknownItem(iid.clone()))?;
    Ok(Json(ItemView::from(item)))
}

async fn submit_judgment(
    State(app): State<Arc<AppState>>,
    Path((sid, iid)): Path<(String, String)>,
    body: Result<Json<JudgmentBody>, JsonRejection>,
) -> ApiResult<Json<ItemView>> {
    let Json(body) = body?;
    let h = app.handle(&sid)?;
    let runtime = app.runtime.clone();
    let view = h
        .write(|s| {
            let state = s.submit_judgment(&iid, &body.worker_id, body.accept)?.state;
            if matches!(state, ItemState::Accepted | ItemState::Rejected) {
                s.finalize(&runtime, &iid)?;
            }
            Ok(ItemView::from(s.state().item(&iid).expect("known item")))
        })
        .await?;
    Ok(Json(view))
}

async fn submit_selection(
    State(app): State<Arc<AppState>>,
    Path((sid, iid)): Path<(String, String)>,
    body: Result<Json<SelectionBody>, JsonRejection>,
) -> ApiResult<Json<DecisionRecord>> {
    let Json(body) = body?;
    let selection = match (body.index, body.rewrite) {
        (Some(i), None) => Selection::Index(i),
        (None, Some(text)) => Selection::Rewrite(text),
        _ => return Err(ApiError::bad_request("give exactly one of `index` and `rewrite`")),
    };
    let h = app.handle(&sid)?;
    let runtime = app.runtime.clone();
    let record = h.write(|s| s.submit_selection(&runtime, &iid, selection)).await?;
    Ok(Json(record))
}

async fn report(State(app): State<Arc<AppState>>, Path(sid): Path<String>) -> ApiResult<Json<SelectiveReport<f64>>> {
    let state = app.handle(&sid)?.read();
    let records = state.records();
    if records.is_empty() {
        return Err(SessionError::NothingToExport.into());
    }
    Ok(Json(dym_core::selective::evaluate(&records).map_err(SessionError::from)?))
}

const NDJSON: &str = "application/x-ndjson";

async fn export(State(app): State<Arc<AppState>>, Path(sid): Path<String>) -> ApiResult<Response> {
    let state = app.handle(&sid)?.read();
    let records = state.records();
    if records.is_empty() {
        return Err(SessionError::NothingToExport.into());
    }
    let mut buf = Vec::new();
    write_records(&mut buf, &records).map_err(SessionError::from)?;
    Ok(([(header::CONTENT_TYPE, NDJSON)], buf).into_response())
}

async fn event_log(State(app): State<Arc<AppState>>, Path(sid): Path<String>) -> ApiResult<Response> {
    let h = app.handle(&sid)?;
    let lines = h.log.read().expect("log lock").clone();
    let mut body = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in lines.iter() {
        body.push_str(l);
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, NDJSON)], body).into_response())
}
