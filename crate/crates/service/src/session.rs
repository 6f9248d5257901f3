//! DidYouMean sessions as an event-sourced state machine.
//!
//! A session is created from predicted decodes. Items at or above the
//! confidence threshold execute at once; the rest wait for user judgments
//! (confirmation modes) or a candidate selection (select mode). Every state
//! transition is a [`SessionEvent`], and a session changes only by applying
//! events, so replaying the log rebuilds the state exactly.

use std::collections::HashMap;
use std::sync::Arc;

use dym_core::confidence::decode_confidence;
use dym_core::dsl::{execute, tokens_match, Denotation, Dsl, WorldState};
use dym_core::gloss::{best_gloss, DEFAULT_BEAM};
use dym_core::model::{Model, ModelInput, NucleusConfig};
use dym_core::selective::{
    confirmation, evaluate, ConfirmMode, Decision, DecisionRecord, PolicyInput, SelectiveError, SelectiveReport,
};
use dym_core::text::tokenize;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_QUORUM: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("{0} model is not loaded")]
    ModelMissing(&'static str),
    #[error("session has no input items")]
    EmptyInput,
    #[error("threshold {0} is not a finite non-negative number")]
    InvalidThreshold(f64),
    #[error("quorum must be at least 1")]
    InvalidQuorum,
    #[error("item `{0}` appears more than once")]
    DuplicateItem(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("worker `{worker}` already judged item `{item}`")]
    DuplicateJudgment { item: String, worker: String },
    #[error("item `{0}` is not open for this action")]
    ItemClosed(String),
    #[error("item `{0}` has no decision yet")]
    NotDecided(String),
    #[error("operation needs a session in {expected} mode")]
    WrongMode { expected: &'static str },
    #[error("candidate index {index} is out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("rewrite is empty")]
    EmptyRewrite,
    #[error("rewrite of item `{0}` did not parse to a complete program")]
    RewriteUnparsed(String),
    #[error("worker id is empty")]
    EmptyWorker,
    #[error("nothing has been finalized yet")]
    NothingToExport,
    #[error("log replay: {0}")]
    Replay(String),
    #[error(transparent)]
    Selective(#[from] SelectiveError),
}

impl SessionError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::ModelMissing(_) => "model_missing",
            SessionError::EmptyInput => "empty_input",
            SessionError::InvalidThreshold(_) => "invalid_threshold",
            SessionError::InvalidQuorum => "invalid_quorum",
            SessionError::DuplicateItem(_) => "duplicate_item",
            SessionError::UnknownItem(_) => "unknown_item",
            SessionError::DuplicateJudgment { .. } => "duplicate_judgment",
            SessionError::ItemClosed(_) => "item_closed",
            SessionError::NotDecided(_) => "not_decided",
            SessionError::WrongMode { .. } => "wrong_mode",
            SessionError::IndexOutOfRange { .. } => "index_out_of_range",
            SessionError::EmptyRewrite => "empty_rewrite",
            SessionError::RewriteUnparsed(_) => "rewrite_unparsed",
            SessionError::EmptyWorker => "empty_worker",
            SessionError::NothingToExport => "nothing_to_export",
            SessionError::Replay(_) => "replay",
            SessionError::Selective(_) => "selective",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionMode {
    ConfirmChosen,
    ConfirmReparsed,
    Select,
}

impl SessionMode {
    pub fn confirm_mode(self) -> Option<ConfirmMode> {
        match self {
            SessionMode::ConfirmChosen => Some(ConfirmMode::Chosen),
            SessionMode::ConfirmReparsed => Some(ConfirmMode::Reparsed),
            SessionMode::Select => None,
        }
    }

    /// Policy name written into decision records. Confirmation modes match
    /// the offline DidYouMean policy names.
    pub fn policy_name(self) -> &'static str {
        match self {
            SessionMode::ConfirmChosen => "didyoumean_chosen",
            SessionMode::ConfirmReparsed => "didyoumean_reparsed",
            SessionMode::Select => "select",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemState {
    Pending,
    AutoExecuted,
    AwaitingJudgment,
    Accepted,
    Rejected,
    Executed,
    Abstained,
}

impl ItemState {
    /// Edges of the item state machine.
    pub fn can_move_to(self, next: ItemState) -> bool {
        use ItemState::*;
        matches!(
            (self, next),
            (Pending, AutoExecuted)
                | (Pending, AwaitingJudgment)
                | (Pending, Rejected)
                | (AwaitingJudgment, Accepted)
                | (AwaitingJudgment, Rejected)
                | (Accepted, Executed)
                | (Rejected, Abstained)
        )
    }

    /// No further transition is possible.
    pub fn is_terminal(self) -> bool {
        matches!(self, ItemState::AutoExecuted | ItemState::Executed | ItemState::Abstained)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ItemState::Pending => "pending",
            ItemState::AutoExecuted => "auto-executed",
            ItemState::AwaitingJudgment => "awaiting-judgment",
            ItemState::Accepted => "accepted",
            ItemState::Rejected => "rejected",
            ItemState::Executed => "executed",
            ItemState::Abstained => "abstained",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub worker_id: String,
    pub accept: bool,
}

/// Majority vote over a full quorum. Ties reject.
pub fn majority(judgments: &[Judgment]) -> (bool, bool) {
    let accepts = judgments.iter().filter(|j| j.accept).count();
    let accepted = 2 * accepts > judgments.len();
    let unanimous = accepts == 0 || accepts == judgments.len();
    (accepted, unanimous)
}

/// Rounds a confidence for display.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// One entry of a selection list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCandidate {
    pub tokens: Vec<String>,
    /// Absent when the gloss model produced nothing.
    pub gloss: Option<String>,
    /// Minimum token confidence, rounded to two decimals.
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Selected,
    Rewritten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Index(usize),
    Rewrite(String),
}

/// Result of running a program against the session world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Execution {
    Ok { denotation: Denotation },
    Fault { message: String },
}

/// Why an item was rejected without asking anyone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoReject {
    /// The prediction never produced the end symbol.
    Unterminated,
    /// The gloss model produced no gloss.
    NoGloss,
    /// The re-parse of the gloss never produced the end symbol.
    UnterminatedReparse,
    /// The selection list came back empty.
    NoCandidates,
}

/// One example inside a session. Confirmation items use `gloss` and
/// `candidate`; selection items use `candidates` and `selection`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub context_user: Option<String>,
    pub context_agent: Option<String>,
    pub utterance: String,
    pub gold_tokens: Vec<String>,
    pub predicted: Vec<String>,
    pub terminated: bool,
    pub confidence: f64,
    pub original_correct: bool,
    pub gloss: Option<String>,
    /// Program executed if the item is accepted.
    pub candidate: Option<Vec<String>>,
    pub candidate_correct: bool,
    pub candidates: Vec<SelectionCandidate>,
    pub state: ItemState,
    pub judgments: Vec<Judgment>,
    pub unanimous: Option<bool>,
    pub auto_reject: Option<AutoReject>,
    pub selection: Option<Selection>,
    pub provenance: Option<Provenance>,
    pub record: Option<DecisionRecord>,
    pub execution: Option<Execution>,
}

impl Item {
    /// Tokens of the previous turn, as the parser sees them.
    pub fn context_tokens(&self) -> Vec<String> {
        [&self.context_user, &self.context_agent]
            .into_iter()
            .flatten()
            .flat_map(|s| tokenize(s))
            .collect()
    }

    fn base_record(&self, policy: &str) -> DecisionRecord {
        DecisionRecord {
            id: self.id.clone(),
            confidence: self.confidence,
            policy: policy.to_string(),
            decision: Decision::Abstain,
            executed_tokens: None,
            candidate_correct: self.candidate_correct,
            gloss: None,
            judgment: None,
        }
    }
}

/// A state transition. The log of a session is its list of events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    SessionCreated {
        session_id: String,
        mode: SessionMode,
        threshold: f64,
        quorum: usize,
        seed: u64,
        world: WorldState,
    },
    ItemCreated { item: Box<Item> },
    AutoExecuted { item_id: String, record: DecisionRecord, execution: Execution },
    AwaitingJudgment { item_id: String },
    AutoRejected { item_id: String, reason: AutoReject },
    JudgmentRecorded { item_id: String, judgment: Judgment },
    Decided { item_id: String, accepted: bool, unanimous: bool },
    SelectionMade { item_id: String, selection: Selection, provenance: Provenance, candidate: Vec<String>, candidate_correct: bool },
    Finalized { item_id: String, record: DecisionRecord, execution: Option<Execution> },
}

impl SessionEvent {
    fn item_id(&self) -> Option<&str> {
        match self {
            SessionEvent::SessionCreated { .. } => None,
            SessionEvent::ItemCreated { item } => Some(&item.id),
            SessionEvent::AutoExecuted { item_id, .. }
            | SessionEvent::AwaitingJudgment { item_id }
            | SessionEvent::AutoRejected { item_id, .. }
            | SessionEvent::JudgmentRecorded { item_id, .. }
            | SessionEvent::Decided { item_id, .. }
            | SessionEvent::SelectionMade { item_id, .. }
            | SessionEvent::Finalized { item_id, .. } => Some(item_id),
        }
    }
}

/// Everything a session knows, minus its log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub mode: SessionMode,
    pub threshold: f64,
    pub quorum: usize,
    pub seed: u64,
    pub world: WorldState,
    pub items: Vec<Item>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl SessionState {
    pub fn item(&self, id: &str) -> Option<&Item> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn items_in(&self, state: Option<ItemState>) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| state.is_none_or(|s| i.state == s))
    }

    pub fn count(&self, state: ItemState) -> usize {
        self.items.iter().filter(|i| i.state == state).count()
    }

    /// Finalized and auto-executed records in item order.
    pub fn records(&self) -> Vec<DecisionRecord> {
        self.items.iter().filter_map(|i| i.record.clone()).collect()
    }

    fn item_mut(&mut self, id: &str) -> Result<&mut Item, SessionError> {
        let i = *self.index.get(id).ok_or_else(|| SessionError::UnknownItem(id.to_string()))?;
        Ok(&mut self.items[i])
    }

    fn apply_execution(&mut self, execution: &Execution) {
        if let Execution::Ok { denotation } = execution {
            self.world = self.world.apply(&denotation.mutations);
        }
    }
}

/// Models and grammar a session runs against.
#[derive(Debug, Clone)]
pub struct Runtime {
    pub dsl: Dsl,
    pub parse: Option<Arc<Model>>,
    pub gloss: Option<Arc<Model>>,
    pub beam: usize,
    pub max_len: usize,
    pub nucleus: NucleusConfig,
}

impl Runtime {
    pub fn new(dsl: Dsl, parse: Option<Arc<Model>>, gloss: Option<Arc<Model>>) -> Self {
        Self {
            dsl,
            parse,
            gloss,
            beam: DEFAULT_BEAM,
            max_len: 64,
            nucleus: NucleusConfig::default(),
        }
    }

    fn models(&self) -> Result<(&Model, &Model), SessionError> {
        let parse = self.parse.as_deref().ok_or(SessionError::ModelMissing("parse"))?;
        let gloss = self.gloss.as_deref().ok_or(SessionError::ModelMissing("gloss"))?;
        Ok((parse, gloss))
    }

    /// Runs `tokens` against `world` with the item's context made salient.
    pub fn execute(&self, tokens: &[String], context: &[String], world: &WorldState) -> Execution {
        let outcome = self
            .dsl
            .program_from_tokens(tokens)
            .and_then(|p| execute(&p, &world.with_salience(context)));
        match outcome {
            Ok(denotation) => Execution::Ok { denotation },
            Err(e) => Execution::Fault { message: e.to_string() },
        }
    }
}

/// Settings fixed at session creation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionSettings {
    pub mode: SessionMode,
    pub threshold: f64,
    pub quorum: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    state: SessionState,
    log: Vec<SessionEvent>,
}

/// What a low-confidence item looks like before anyone sees it.
enum Prepared {
    Auto,
    Open,
    Reject(AutoReject),
}

fn prepare_item(
    runtime: &Runtime,
    settings: &SessionSettings,
    input: &PolicyInput<'_>,
) -> Result<(Item, Prepared), SessionError> {
    let ex = input.example;
    let d = &input.decode;
    let confidence = decode_confidence(d);
    let original_correct = d.terminated && tokens_match(&d.tokens, ex.gold.tokens());
    let mut item = Item {
        id: ex.id.clone(),
        context_user: ex.context_user.clone(),
        context_agent: ex.context_agent.clone(),
        utterance: ex.utterance.clone(),
        gold_tokens: ex.gold.tokens().to_vec(),
        predicted: d.tokens.clone(),
        terminated: d.terminated,
        confidence,
        original_correct,
        gloss: None,
        candidate: None,
        candidate_correct: original_correct,
        candidates: Vec::new(),
        state: ItemState::Pending,
        judgments: Vec::new(),
        unanimous: None,
        auto_reject: None,
        selection: None,
        provenance: None,
        record: None,
        execution: None,
    };
    if !d.terminated {
        return Ok((item, Prepared::Reject(AutoReject::Unterminated)));
    }
    if confidence >= settings.threshold {
        item.candidate = Some(d.tokens.clone());
        return Ok((item, Prepared::Auto));
    }
    let (parse, gloss) = runtime.models()?;
    match settings.mode.confirm_mode() {
        Some(mode) => {
            let c = confirmation(parse, gloss, input, mode, runtime.beam, runtime.max_len);
            item.candidate_correct = c.candidate_correct;
            item.gloss = c.gloss;
            item.candidate = c.candidate;
            let prepared = if item.gloss.is_none() {
                Prepared::Reject(AutoReject::NoGloss)
            } else if item.candidate.is_none() {
                Prepared::Reject(AutoReject::UnterminatedReparse)
            } else {
                Prepared::Open
            };
            Ok((item, prepared))
        }
        None => {
            let cfg = NucleusConfig {
                seed: settings.seed,
                ..runtime.nucleus
            };
            let gold = ex.gold.tokens();
            item.candidates = parse
                .nucleus_candidates(&ModelInput::parse(ex), &cfg)
                .into_iter()
                .map(|c| SelectionCandidate {
                    gloss: best_gloss(gloss, parse, ex, &c.tokens, runtime.beam, runtime.max_len)
                        .ok()
                        .map(|g| g.text()),
                    confidence: round2(c.min_confidence),
                    correct: tokens_match(&c.tokens, gold),
                    tokens: c.tokens,
                })
                .collect();
            let prepared = if item.candidates.is_empty() {
                Prepared::Reject(AutoReject::NoCandidates)
            } else {
                Prepared::Open
            };
            Ok((item, prepared))
        }
    }
}

impl Session {
    /// Materializes the items, auto-executes the confident ones and opens the
    /// rest. Items keep input order.
    pub fn create(
        id: impl Into<String>,
        inputs: &[PolicyInput<'_>],
        runtime: &Runtime,
        settings: SessionSettings,
        world: WorldState,
    ) -> Result<Self, SessionError> {
        if inputs.is_empty() {
            return Err(SessionError::EmptyInput);
        }
        if !settings.threshold.is_finite() || settings.threshold < 0.0 {
            return Err(SessionError::InvalidThreshold(settings.threshold));
        }
        if settings.quorum == 0 {
            return Err(SessionError::InvalidQuorum);
        }
        runtime.models()?;
        let mut seen = std::collections::HashSet::new();
        for i in inputs {
            if !seen.insert(i.example.id.as_str()) {
                return Err(SessionError::DuplicateItem(i.example.id.clone()));
            }
        }
        let prepared = inputs
            .par_iter()
            .map(|i| prepare_item(runtime, &settings, i))
            .collect::<Result<Vec<_>, _>>()?;

        let mut session = Session::empty();
        session.commit(SessionEvent::SessionCreated {
            session_id: id.into(),
            mode: settings.mode,
            threshold: settings.threshold,
            quorum: settings.quorum,
            seed: settings.seed,
            world,
        })?;
        let policy = settings.mode.policy_name();
        for (item, prep) in prepared {
            let item_id = item.id.clone();
            session.commit(SessionEvent::ItemCreated { item: Box::new(item) })?;
            match prep {
                Prepared::Auto => {
                    let item = session.state.item(&item_id).expect("just created");
                    let mut record = item.base_record(policy);
                    record.decision = Decision::Execute;
                    record.executed_tokens = Some(item.predicted.clone());
                    let execution = runtime.execute(&item.predicted, &item.context_tokens(), &session.state.world);
                    session.commit(SessionEvent::AutoExecuted { item_id, record, execution })?;
                }
                Prepared::Open => session.commit(SessionEvent::AwaitingJudgment { item_id })?,
                Prepared::Reject(reason) => {
                    session.commit(SessionEvent::AutoRejected { item_id: item_id.clone(), reason })?;
                    session.finalize(runtime, &item_id)?;
                }
            }
        }
        Ok(session)
    }

    fn empty() -> Self {
        Self {
            state: SessionState {
                id: String::new(),
                mode: SessionMode::ConfirmChosen,
                threshold: 0.0,
                quorum: DEFAULT_QUORUM,
                seed: 0,
                world: WorldState {
                    persons: Default::default(),
                    days: Default::default(),
                    times: Default::default(),
                    events: Vec::new(),
                    salient_persons: Vec::new(),
                    salient_events: Vec::new(),
                    next_id: 1,
                },
                items: Vec::new(),
                index: HashMap::new(),
            },
            log: Vec::new(),
        }
    }

    /// Rebuilds a session from its log.
    pub fn replay(events: &[SessionEvent]) -> Result<Self, SessionError> {
        match events.first() {
            Some(SessionEvent::SessionCreated { .. }) => {}
            _ => return Err(SessionError::Replay("log must start with session_created".into())),
        }
        let mut session = Session::empty();
        for e in events {
            session.commit(e.clone())?;
        }
        Ok(session)
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn log(&self) -> &[SessionEvent] {
        &self.log
    }

    pub fn id(&self) -> &str {
        &self.state.id
    }

    pub fn mode(&self) -> SessionMode {
        self.state.mode
    }

    /// Validates and applies one event, then appends it to the log.
    fn commit(&mut self, event: SessionEvent) -> Result<(), SessionError> {
        self.apply(&event)?;
        self.log.push(event);
        Ok(())
    }

    fn apply(&mut self, event: &SessionEvent) -> Result<(), SessionError> {
        let bad = |msg: &str| SessionError::Replay(format!("{msg} ({:?})", event.item_id()));
        if self.log.is_empty() != matches!(event, SessionEvent::SessionCreated { .. }) {
            return Err(bad("session_created must come first and only once"));
        }
        let move_to = |item: &mut Item, next: ItemState| {
            if item.state.can_move_to(next) {
                item.state = next;
                Ok(())
            } else {
                Err(SessionError::Replay(format!(
                    "item `{}` cannot move from {} to {}",
                    item.id,
                    item.state.as_str(),
                    next.as_str()
                )))
            }
        };
        match event {
            SessionEvent::SessionCreated { session_id, mode, threshold, quorum, seed, world } => {
                self.state.id = session_id.clone();
                self.state.mode = *mode;
                self.state.threshold = *threshold;
                self.state.quorum = *quorum;
                self.state.seed = *seed;
                self.state.world = world.clone();
            }
            SessionEvent::ItemCreated { item } => {
                if self.state.index.contains_key(&item.id) {
                    return Err(SessionError::DuplicateItem(item.id.clone()));
                }
                if item.state != ItemState::Pending {
                    return Err(bad("items are created pending"));
                }
                self.state.index.insert(item.id.clone(), self.state.items.len());
                self.state.items.push((**item).clone());
            }
            SessionEvent::AutoExecuted { item_id, record, execution } => {
                let threshold = self.state.threshold;
                let item = self.state.item_mut(item_id)?;
                if item.confidence < threshold {
                    return Err(bad("auto-execution below threshold"));
                }
                move_to(item, ItemState::AutoExecuted)?;
                item.record = Some(record.clone());
                item.execution = Some(execution.clone());
                self.state.apply_execution(execution);
            }
            SessionEvent::AwaitingJudgment { item_id } => {
                move_to(self.state.item_mut(item_id)?, ItemState::AwaitingJudgment)?;
            }
            SessionEvent::AutoRejected { item_id, reason } => {
                let item = self.state.item_mut(item_id)?;
                move_to(item, ItemState::Rejected)?;
                item.auto_reject = Some(*reason);
            }
            SessionEvent::JudgmentRecorded { item_id, judgment } => {
                let quorum = self.state.quorum;
                let item = self.state.item_mut(item_id)?;
                if item.state != ItemState::AwaitingJudgment || item.judgments.len() >= quorum {
                    return Err(SessionError::ItemClosed(item_id.clone()));
                }
                if item.judgments.iter().any(|j| j.worker_id == judgment.worker_id) {
                    return Err(SessionError::DuplicateJudgment {
                        item: item_id.clone(),
                        worker: judgment.worker_id.clone(),
                    });
                }
                item.judgments.push(judgment.clone());
            }
            SessionEvent::Decided { item_id, accepted, unanimous } => {
                let quorum = self.state.quorum;
                let item = self.state.item_mut(item_id)?;
                if item.judgments.len() != quorum || majority(&item.judgments) != (*accepted, *unanimous) {
                    return Err(bad("decision does not follow from the judgments"));
                }
                move_to(item, if *accepted { ItemState::Accepted } else { ItemState::Rejected })?;
                item.unanimous = Some(*unanimous);
            }
            SessionEvent::SelectionMade { item_id, selection, provenance, candidate, candidate_correct } => {
                let item = self.state.item_mut(item_id)?;
                move_to(item, ItemState::Accepted)?;
                item.selection = Some(selection.clone());
                item.provenance = Some(*provenance);
                item.candidate = Some(candidate.clone());
                item.candidate_correct = *candidate_correct;
            }
            SessionEvent::Finalized { item_id, record, execution } => {
                let item = self.state.item_mut(item_id)?;
                let next = if record.executed() { ItemState::Executed } else { ItemState::Abstained };
                if execution.is_some() != record.executed() {
                    return Err(bad("execution must accompany exactly the executed records"));
                }
                move_to(item, next)?;
                item.record = Some(record.clone());
                item.execution = execution.clone();
                if let Some(execution) = execution {
                    self.state.apply_execution(execution);
                }
            }
        }
        Ok(())
    }

    /// Records one worker's judgment. A full quorum decides the item by
    /// majority, ties rejecting.
    pub fn submit_judgment(&mut self, item_id: &str, worker_id: &str, accept: bool) -> Result<&Item, SessionError> {
        if self.state.mode.confirm_mode().is_none() {
            return Err(SessionError::WrongMode { expected: "confirmation" });
        }
        if worker_id.trim().is_empty() {
            return Err(SessionError::EmptyWorker);
        }
        let item = self
            .state
            .item(item_id)
            .ok_or_else(|| SessionError::UnknownItem(item_id.to_string()))?;
        if item.state != ItemState::AwaitingJudgment {
            return Err(SessionError::ItemClosed(item_id.to_string()));
        }
        self.commit(SessionEvent::JudgmentRecorded {
            item_id: item_id.to_string(),
            judgment: Judgment {
                worker_id: worker_id.to_string(),
                accept,
            },
        })?;
        let item = self.state.item(item_id).expect("known item");
        if item.judgments.len() == self.state.quorum {
            let (accepted, unanimous) = majority(&item.judgments);
            self.commit(SessionEvent::Decided {
                item_id: item_id.to_string(),
                accepted,
                unanimous,
            })?;
        }
        Ok(self.state.item(item_id).expect("known item"))
    }

    /// Executes an accepted item or abstains on a rejected one.
    pub fn finalize(&mut self, runtime: &Runtime, item_id: &str) -> Result<DecisionRecord, SessionError> {
        let item = self
            .state
            .item(item_id)
            .ok_or_else(|| SessionError::UnknownItem(item_id.to_string()))?;
        let mut record = item.base_record(self.state.mode.policy_name());
        let execution = match item.state {
            ItemState::Accepted => {
                let tokens = item.candidate.clone().expect("accepted items have a candidate");
                let execution = runtime.execute(&tokens, &item.context_tokens(), &self.state.world);
                record.decision = Decision::Execute;
                record.executed_tokens = Some(tokens);
                Some(execution)
            }
            ItemState::Rejected => None,
            s if s.is_terminal() => return Err(SessionError::ItemClosed(item_id.to_string())),
            _ => return Err(SessionError::NotDecided(item_id.to_string())),
        };
        match self.state.mode {
            SessionMode::Select => {
                record.gloss = match &item.selection {
                    Some(Selection::Index(i)) => item.candidates[*i].gloss.clone(),
                    Some(Selection::Rewrite(text)) => Some(text.clone()),
                    None => None,
                };
            }
            _ => {
                record.gloss = item.gloss.clone();
                if item.auto_reject.is_none() {
                    record.judgment = Some(item.state == ItemState::Accepted);
                }
            }
        }
        self.commit(SessionEvent::Finalized {
            item_id: item_id.to_string(),
            record: record.clone(),
            execution,
        })?;
        Ok(record)
    }

    /// Settles a selection item with a listed candidate or a free rewrite,
    /// then executes it.
    pub fn submit_selection(
        &mut self,
        runtime: &Runtime,
        item_id: &str,
        selection: Selection,
    ) -> Result<DecisionRecord, SessionError> {
        if self.state.mode != SessionMode::Select {
            return Err(SessionError::WrongMode { expected: "select" });
        }
        let item = self
            .state
            .item(item_id)
            .ok_or_else(|| SessionError::UnknownItem(item_id.to_string()))?;
        if item.state != ItemState::AwaitingJudgment {
            return Err(SessionError::ItemClosed(item_id.to_string()));
        }
        let (candidate, provenance, selection) = match selection {
            Selection::Index(index) => {
                let c = item.candidates.get(index).ok_or(SessionError::IndexOutOfRange {
                    index,
                    len: item.candidates.len(),
                })?;
                (c.tokens.clone(), Provenance::Selected, Selection::Index(index))
            }
            Selection::Rewrite(text) => {
                let text = text.trim().to_string();
                if text.is_empty() {
                    return Err(SessionError::EmptyRewrite);
                }
                let parse = runtime.parse.as_deref().ok_or(SessionError::ModelMissing("parse"))?;
                let input = ModelInput {
                    context: item.context_tokens(),
                    source: tokenize(&text),
                };
                let d = parse.decode_greedy(&input, runtime.max_len);
                if !d.terminated {
                    return Err(SessionError::RewriteUnparsed(item_id.to_string()));
                }
                (d.tokens, Provenance::Rewritten, Selection::Rewrite(text))
            }
        };
        let candidate_correct = tokens_match(&candidate, &item.gold_tokens);
        self.commit(SessionEvent::SelectionMade {
            item_id: item_id.to_string(),
            selection,
            provenance,
            candidate,
            candidate_correct,
        })?;
        self.finalize(runtime, item_id)
    }

    /// Records of every settled item, in item order.
    pub fn export_records(&self) -> Result<Vec<DecisionRecord>, SessionError> {
        let records = self.state.records();
        if records.is_empty() {
            return Err(SessionError::NothingToExport);
        }
        Ok(records)
    }

    pub fn report(&self) -> Result<SelectiveReport<f64>, SessionError> {
        Ok(evaluate(&self.export_records()?)?)
    }
}

/// Pre- and post-selection accuracy within one confidence bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Share of items whose original prediction was correct.
    pub before: f64,
    /// Share of items whose executed program was correct.
    pub after: f64,
}

/// Bins settled selection items by original confidence over `[0, max_conf)`
/// and compares accuracy before and after selection.
pub fn selection_accuracy_by_bin(state: &SessionState, n_bins: usize, max_conf: f64) -> Vec<SelectionBin> {
    let mut sums = vec![(0usize, 0usize, 0usize); n_bins];
    for item in &state.items {
        let Some(record) = &item.record else { continue };
        let Some(b) = dym_core::confidence::stratum(item.confidence, n_bins, max_conf) else {
            continue;
        };
        sums[b].0 += 1;
        sums[b].1 += usize::from(item.original_correct);
        sums[b].2 += usize::from(record.executed() && record.candidate_correct);
    }
    let width = max_conf / n_bins as f64;
    sums.into_iter()
        .enumerate()
        .map(|(i, (n, before, after))| SelectionBin {
            lower: i as f64 * width,
            upper: (i + 1) as f64 * width,
            count: n,
            before: dym_core::scalar::ratio(before, n),
            after: dym_core::scalar::ratio(after, n),
        })
        .collect()
}
