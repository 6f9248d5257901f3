//! Count-based, locally normalized sequence predictor.
//!
//! Each decoding step is a Bernoulli naive Bayes classifier over the next
//! output token, conditioned on the last one or two output tokens:
//!
//! ```text
//! score(y)    = ln P(y | h) + sum over features f of ln P(f present/absent | y, h)
//! P(y | h)    = (n(h,y) + a + b P(y)) / (n(h) + a|V| + b)
//! P(f | y, h) = (n(h,f,y) + a + b P(f | y)) / (n(h,y) + 2a + b)
//! P(y)        = (n(y) + a) / (N + a|V|)
//! P(f | y)    = (n(f,y) + a) / (n(y) + 2a)
//! ```
//!
//! `a` is the additive smoothing constant and `b` the backoff pseudo-count
//! that pulls sparse histories towards the history-independent estimates.
//! Features are the source tokens plus the context tokens (prefixed `c:`);
//! absent features count as evidence too, which is what lets the model
//! decide that a slot is *not* mentioned. Scores are divided by the
//! temperature and renormalized. The same machinery is trained in two
//! directions: parse (context + utterance -> program tokens) and gloss
//! (context + program -> utterance tokens).

mod calibrate;
mod decode;
mod interchange;
mod step;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{literal_text, DialogueExample};
use crate::text::tokenize;

pub use calibrate::{confidence_pairs, tune_temperature, TemperatureCurve, TemperaturePoint};
pub use decode::{apply_cutoff, BeamHypothesis, Candidate, ForcedScore, NucleusConfig};
pub use interchange::{read_interchange, write_interchange, InterchangeRecord};
pub use step::{ScoredDecode, StepDistribution, NORMALIZATION_TOL};

/// End-of-sequence symbol. Always vocabulary id 0.
pub const END: &str = "</s>";
/// Stand-in for out-of-vocabulary input words.
pub const UNK: &str = "<unk>";

const BOS: u32 = u32::MAX;
const LITERAL: u32 = u32::MAX - 1;
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("token `{0}` is not in the output vocabulary")]
    TokenOutOfVocabulary(String),
    #[error("model file: {0}")]
    Persistence(String),
    #[error("interchange: {0}")]
    Interchange(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Parse,
    Gloss,
}

/// Training hyperparameters. Missing fields in a config take the defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    /// Additive smoothing constant.
    pub alpha: f64,
    pub temperature: f64,
    /// Entries kept in each reported step distribution.
    pub top_k: usize,
    /// Number of previous output tokens each step conditions on (1 or 2).
    pub history: usize,
    /// Also condition on the set of non-literal tokens already emitted, so
    /// the model knows which parts of the output are done.
    pub coverage: bool,
    /// Pseudo-count pulling each history's estimates towards the
    /// history-independent ones. Zero gives plain additive smoothing.
    pub backoff: f64,
    /// Add one feature per token already emitted, so the model can learn
    /// not to repeat itself. Suits free-text outputs such as glosses.
    pub emitted: bool,
}

impl TrainParams {
    /// Defaults for a direction. Glosses are free text, where tracking
    /// emitted words works better than the coverage fingerprint.
    pub fn for_direction(direction: Direction) -> Self {
        match direction {
            Direction::Parse => Self::default(),
            Direction::Gloss => Self {
                coverage: false,
                emitted: true,
                ..Self::default()
            },
        }
    }
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            temperature: 1.0,
            top_k: 5,
            history: 2,
            coverage: true,
            backoff: 5.0,
            emitted: false,
        }
    }
}

/// Conditioning context: previous-turn tokens plus the source sequence
/// (the utterance when parsing, the program when glossing).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelInput {
    pub context: Vec<String>,
    pub source: Vec<String>,
}

impl ModelInput {
    /// Parse-direction input for an example's own utterance.
    pub fn parse(example: &DialogueExample) -> Self {
        Self {
            context: example.context_tokens(),
            source: tokenize(&example.utterance),
        }
    }

    /// Parse-direction input with `utterance` standing in for the example's.
    pub fn parse_with(example: &DialogueExample, utterance: &[String]) -> Self {
        Self {
            context: example.context_tokens(),
            source: utterance.to_vec(),
        }
    }

    /// Gloss-direction input for a program in an example's context.
    pub fn gloss<S: AsRef<str>>(example: &DialogueExample, program: &[S]) -> Self {
        Self {
            context: example.context_tokens(),
            source: program.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }

    fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .source
            .iter()
            .cloned()
            .chain(self.context.iter().map(|w| format!("c:{w}")))
            .collect();
        names.sort();
        names.dedup();
        names
    }
}

/// Interned output symbols; id 0 is the end symbol, the rest sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    #[serde(skip)]
    literal: Vec<bool>,
}

impl Vocab {
    fn build<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v: Vec<String> = tokens.into_iter().filter(|t| t != END).collect();
        v.sort();
        v.dedup();
        v.insert(0, END.to_string());
        Self::from_tokens(v)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let literal = tokens.iter().map(|t| literal_text(t).is_some()).collect();
        Self {
            tokens,
            index,
            literal,
        }
    }

    /// Conditioning history of a prefix: its last `history` tokens, with
    /// program literals collapsed into one class so that structure learned
    /// after one literal transfers to every other, plus optionally a
    /// fingerprint of the set of non-literal tokens emitted so far.
    fn history(&self, prefix: &[u32], params: &TrainParams) -> History {
        let class = |id: u32| if self.literal[id as usize] { LITERAL } else { id };
        let n = prefix.len();
        let last = if n >= 1 { class(prefix[n - 1]) } else { BOS };
        let second = match (params.history, n) {
            (1, _) => 0,
            (_, n) if n >= 2 => class(prefix[n - 2]),
            _ => BOS,
        };
        let coverage = if params.coverage {
            let mut seen: Vec<u32> = prefix.iter().copied().filter(|&id| !self.literal[id as usize]).collect();
            seen.sort_unstable();
            seen.dedup();
            fingerprint(&seen)
        } else {
            0
        };
        (last, second, coverage)
    }

    /// Id standing in for `token` in a prefix: its own id, or any literal's
    /// id for a literal never seen in training, since histories only see the
    /// literal class.
    pub(crate) fn prefix_id(&self, token: &str) -> Option<u32> {
        match self.id(token) {
            Some(0) => None,
            Some(id) => Some(id),
            None if literal_text(token).is_some() => {
                self.literal.iter().position(|&l| l).map(|i| i as u32)
            }
            None => None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// (last token class, second-to-last token class, coverage fingerprint).
type History = (u32, u32, u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct RowKey {
    history: History,
    feature: u32,
}

/// Feature id reserved for the history-only expert.
const BIAS: u32 = u32::MAX;

/// Sparse counts of next tokens for one conditioning key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Row {
    total: u32,
    counts: Vec<(u32, u32)>,
}

/// Per-history totals derived from the count rows.
#[derive(Debug, Clone, PartialEq)]
struct HistoryStats {
    total: u32,
    /// n(h, y) indexed by token id.
    counts: Vec<u32>,
    /// Sum over every feature of ln P(f absent | y, h); only meaningful where
    /// `counts[y] > 0`.
    absent: Vec<f64>,
}

/// History-independent estimates the per-history ones back off to.
#[derive(Debug, Clone, PartialEq, Default)]
struct Backoff {
    /// P(y).
    prior: Vec<f64>,
    /// P(f | y), row-major by feature.
    theta: Vec<f64>,
    /// Sum over features of ln P(f absent | y, h) for a pair (h, y) never seen.
    absent_unseen: Vec<f64>,
}

/// Trained predictor. Immutable: queries never touch the counts.
#[derive(Debug, Clone)]
pub struct Model {
    direction: Direction,
    params: TrainParams,
    vocab: Vocab,
    features: HashMap<String, u32>,
    rows: HashMap<RowKey, Row>,
    stats: HashMap<History, HistoryStats>,
    backoff: Backoff,
    /// Feature id of "token already emitted", by token id; `NO_FEATURE` when off.
    emitted_feature: Vec<u32>,
}

const NO_FEATURE: u32 = u32::MAX;

fn emitted_name(token: &str) -> String {
    format!("o:{token}")
}

/// Input with its features resolved against a model's feature table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    features: Vec<u32>,
}

impl Model {
    /// Trains from dialogue examples in the given direction.
    pub fn train(
        examples: &[DialogueExample],
        direction: Direction,
        params: TrainParams,
    ) -> Result<Self, ModelError> {
        let pairs: Vec<(ModelInput, Vec<String>)> = examples
            .iter()
            .map(|ex| match direction {
                Direction::Parse => (ModelInput::parse(ex), ex.gold.tokens().to_vec()),
                Direction::Gloss => (
                    ModelInput::gloss(ex, ex.gold.tokens()),
                    tokenize(&ex.utterance),
                ),
            })
            .collect();
        Self::train_pairs(&pairs, direction, params)
    }

    /// Trains from explicit (input, target) pairs.
    pub fn train_pairs(
        pairs: &[(ModelInput, Vec<String>)],
        direction: Direction,
        params: TrainParams,
    ) -> Result<Self, ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        validate_params(&params)?;
        let vocab = Vocab::build(pairs.iter().flat_map(|(_, t)| t.iter().cloned()));
        let mut names: Vec<String> = pairs.iter().flat_map(|(i, _)| i.feature_names()).collect();
        if params.emitted {
            names.extend(vocab.tokens.iter().skip(1).map(|t| emitted_name(t)));
        }
        names.sort();
        names.dedup();
        let features: HashMap<String, u32> = names
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n, i as u32))
            .collect();

        let mut acc: HashMap<RowKey, HashMap<u32, u32>> = HashMap::new();
        for (input, target) in pairs {
            let feats: Vec<u32> = input.feature_names().iter().map(|n| features[n]).collect();
            let ids: Vec<u32> = target
                .iter()
                .map(|t| vocab.id(t).expect("vocabulary built from targets"))
                .chain(std::iter::once(0))
                .collect();
            for t in 0..ids.len() {
                let history = vocab.history(&ids[..t], &params);
                let y = ids[t];
                let mut step_feats = feats.clone();
                if params.emitted {
                    step_feats.extend(ids[..t].iter().map(|&i| features[&emitted_name(vocab.token(i))]));
                    step_feats.sort_unstable();
                    step_feats.dedup();
                }
                for f in step_feats.iter().copied().chain(std::iter::once(BIAS)) {
                    *acc.entry(RowKey { history, feature: f })
                        .or_default()
                        .entry(y)
                        .or_default() += 1;
                }
            }
        }
        let rows = acc
            .into_iter()
            .map(|(k, m)| {
                let mut counts: Vec<(u32, u32)> = m.into_iter().collect();
                counts.sort_unstable();
                let total = counts.iter().map(|(_, c)| c).sum();
                (k, Row { total, counts })
            })
            .collect();
        Ok(Self::assemble(direction, params, vocab, features, rows))
    }

    fn assemble(
        direction: Direction,
        params: TrainParams,
        vocab: Vocab,
        features: HashMap<String, u32>,
        rows: HashMap<RowKey, Row>,
    ) -> Self {
        let v = vocab.len();
        let n_features = features.len();
        let (a, b) = (params.alpha, params.backoff);

        // history-independent counts are sums over histories
        let mut n_y = vec![0u64; v];
        let mut n_fy = vec![0u64; n_features * v];
        for (k, row) in &rows {
            for &(y, c) in &row.counts {
                if k.feature == BIAS {
                    n_y[y as usize] += u64::from(c);
                } else {
                    n_fy[k.feature as usize * v + y as usize] += u64::from(c);
                }
            }
        }
        let n_total: u64 = n_y.iter().sum();
        let prior: Vec<f64> = n_y
            .iter()
            .map(|&n| (n as f64 + a) / (n_total as f64 + a * v as f64))
            .collect();
        let theta: Vec<f64> = n_fy
            .iter()
            .enumerate()
            .map(|(i, &c)| (c as f64 + a) / (n_y[i % v] as f64 + 2.0 * a))
            .collect();
        let absent_sum = |y: usize, n: u32| -> f64 {
            (0..n_features)
                .map(|f| absent_log(0, n, theta[f * v + y], a, b))
                .sum()
        };
        let absent_unseen: Vec<f64> = (0..v).map(|y| absent_sum(y, 0)).collect();

        // float sums below must not depend on hash order
        let mut keys: Vec<&RowKey> = rows.keys().collect();
        keys.sort_unstable_by_key(|k| (k.history, k.feature));
        let mut stats: HashMap<History, HistoryStats> = HashMap::new();
        for &k in &keys {
            let row = &rows[k];
            if k.feature != BIAS {
                continue;
            }
            let mut counts = vec![0u32; v];
            for &(y, c) in &row.counts {
                counts[y as usize] = c;
            }
            // every feature starts out unseen with this (h, y)
            let absent = counts
                .iter()
                .enumerate()
                .map(|(y, &n)| if n > 0 { absent_sum(y, n) } else { 0.0 })
                .collect();
            stats.insert(
                k.history,
                HistoryStats {
                    total: row.total,
                    counts,
                    absent,
                },
            );
        }
        for &k in &keys {
            let row = &rows[k];
            if k.feature == BIAS {
                continue;
            }
            let st = stats.get_mut(&k.history).expect("feature rows imply a history row");
            for &(y, c) in &row.counts {
                let n = st.counts[y as usize];
                let g = theta[k.feature as usize * v + y as usize];
                st.absent[y as usize] += absent_log(c, n, g, a, b) - absent_log(0, n, g, a, b);
            }
        }
        let emitted_feature = vocab
            .tokens
            .iter()
            .map(|t| {
                if params.emitted {
                    features.get(&emitted_name(t)).copied().unwrap_or(NO_FEATURE)
                } else {
                    NO_FEATURE
                }
            })
            .collect();
        Self {
            direction,
            params,
            vocab,
            features,
            rows,
            stats,
            emitted_feature,
            backoff: Backoff {
                prior,
                theta,
                absent_unseen,
            },
        }
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn params(&self) -> TrainParams {
        self.params
    }

    pub fn temperature(&self) -> f64 {
        self.params.temperature
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Same counts, different temperature.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self, ModelError> {
        let mut m = self.clone();
        m.params.temperature = temperature;
        validate_params(&m.params)?;
        Ok(m)
    }

    /// Same counts, different top-k truncation for reported steps.
    pub fn with_top_k(&self, top_k: usize) -> Result<Self, ModelError> {
        let mut m = self.clone();
        m.params.top_k = top_k;
        validate_params(&m.params)?;
        Ok(m)
    }

    /// Resolves input features; features never seen in training are dropped
    /// because their experts are uniform and cancel under normalization.
    pub fn encode(&self, input: &ModelInput) -> EncodedInput {
        let mut features: Vec<u32> = input
            .feature_names()
            .iter()
            .filter_map(|n| self.features.get(n).copied())
            .collect();
        features.sort_unstable();
        EncodedInput { features }
    }

    pub(crate) fn ids_of<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<u32>, ModelError> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                self.vocab
                    .id(t)
                    .filter(|&id| id != 0)
                    .ok_or_else(|| ModelError::TokenOutOfVocabulary(t.to_string()))
            })
            .collect()
    }

    /// Full next-token distribution over the vocabulary, indexed by id.
    pub(crate) fn probs_ids(&self, input: &EncodedInput, prefix: &[u32]) -> Vec<f64> {
        let v = self.vocab.len();
        let (a, b) = (self.params.alpha, self.params.backoff);
        let history = self.vocab.history(prefix, &self.params);
        let st = self.stats.get(&history);
        let n_h = st.map_or(0, |s| s.total) as f64;
        let count = |y: usize| st.map_or(0, |s| s.counts[y]);
        let denom = (n_h + a * v as f64 + b).ln();
        let bo = &self.backoff;
        let mut scores: Vec<f64> = (0..v)
            .map(|y| {
                let n = count(y);
                let prior = (n as f64 + a + b * bo.prior[y]).ln() - denom;
                let absent = match st {
                    Some(s) if n > 0 => s.absent[y],
                    _ => bo.absent_unseen[y],
                };
                prior + absent
            })
            .collect();
        let mut features = input.features.clone();
        if self.params.emitted {
            features.extend(
                prefix
                    .iter()
                    .map(|&i| self.emitted_feature[i as usize])
                    .filter(|&f| f != NO_FEATURE),
            );
            features.sort_unstable();
            features.dedup();
        }
        for &f in &features {
            let theta = &bo.theta[f as usize * v..(f as usize + 1) * v];
            let row = st.and_then(|_| self.rows.get(&RowKey { history, feature: f }));
            let mut hits = row.map_or(&[][..], |r| r.counts.as_slice()).iter().peekable();
            for (y, score) in scores.iter_mut().enumerate() {
                let c = match hits.peek() {
                    Some(&&(t, c)) if t as usize == y => {
                        hits.next();
                        c
                    }
                    _ => 0,
                };
                *score += presence_shift(c, count(y), theta[y], a, b);
            }
        }
        softmax_in_place(&mut scores, self.params.temperature);
        scores
    }

    /// Next-token distribution after `prefix`, as a top-k step.
    pub fn step<S: AsRef<str>>(
        &self,
        input: &ModelInput,
        prefix: &[S],
    ) -> Result<StepDistribution<f64>, ModelError> {
        let enc = self.encode(input);
        let ids = self.ids_of(prefix)?;
        Ok(self.top_k_step(&self.probs_ids(&enc, &ids), None))
    }

    /// Full distribution after `prefix` as (token, probability), vocabulary order.
    pub fn distribution<S: AsRef<str>>(
        &self,
        input: &ModelInput,
        prefix: &[S],
    ) -> Result<Vec<(String, f64)>, ModelError> {
        let enc = self.encode(input);
        let ids = self.ids_of(prefix)?;
        Ok(self
            .probs_ids(&enc, &ids)
            .into_iter()
            .enumerate()
            .map(|(i, p)| (self.vocab.token(i as u32).to_string(), p))
            .collect())
    }

    /// Ranks ids by probability (ties by id) and keeps the top k, plus
    /// `must_include` when it falls outside.
    pub(crate) fn top_k_step(&self, probs: &[f64], must_include: Option<u32>) -> StepDistribution<f64> {
        let ranked = rank(probs);
        let k = self.params.top_k.min(ranked.len());
        let mut keep: Vec<u32> = ranked[..k].to_vec();
        if let Some(id) = must_include {
            if !keep.contains(&id) {
                keep.push(id);
            }
        }
        StepDistribution::from_ranked(
            keep.into_iter()
                .map(|id| (self.vocab.token(id).to_string(), probs[id as usize]))
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string(&self.to_file())
            .map_err(|e| ModelError::Persistence(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| ModelError::Persistence(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ModelError::Persistence(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        serde_json::to_string(&self.to_file()).map_err(|e| ModelError::Persistence(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| ModelError::Persistence(e.to_string()))?;
        Self::from_file(file)
    }

    fn to_file(&self) -> ModelFile {
        let mut features: Vec<(String, u32)> =
            self.features.iter().map(|(k, v)| (k.clone(), *v)).collect();
        features.sort_by_key(|(_, id)| *id);
        let mut rows: Vec<RowEntry> = self
            .rows
            .iter()
            .map(|(k, r)| RowEntry {
                history: k.history,
                feature: (k.feature != BIAS).then_some(k.feature),
                counts: r.counts.clone(),
            })
            .collect();
        rows.sort_by_key(|r| (r.history, r.feature));
        ModelFile {
            format: "dym-count-model".into(),
            version: FORMAT_VERSION,
            direction: self.direction,
            params: self.params,
            vocabulary: self.vocab.tokens.clone(),
            features: features.into_iter().map(|(k, _)| k).collect(),
            rows,
        }
    }

    fn from_file(file: ModelFile) -> Result<Self, ModelError> {
        if file.version != FORMAT_VERSION {
            return Err(ModelError::Persistence(format!(
                "unsupported model version {}",
                file.version
            )));
        }
        validate_params(&file.params)?;
        if file.vocabulary.first().map(String::as_str) != Some(END) {
            return Err(ModelError::Persistence("vocabulary must start with the end symbol".into()));
        }
        let v = file.vocabulary.len() as u32;
        let mut rows = HashMap::new();
        for r in file.rows {
            if r.counts.iter().any(|&(y, _)| y >= v) {
                return Err(ModelError::Persistence("count row references unknown token".into()));
            }
            let total = r.counts.iter().map(|(_, c)| c).sum();
            rows.insert(
                RowKey {
                    history: r.history,
                    feature: r.feature.unwrap_or(BIAS),
                },
                Row {
                    total,
                    counts: r.counts,
                },
            );
        }
        let features: HashMap<String, u32> = file
            .features
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n, i as u32))
            .collect();
        let n_features = features.len() as u32;
        for k in rows.keys() {
            if k.feature != BIAS && k.feature >= n_features {
                return Err(ModelError::Persistence("count row references unknown feature".into()));
            }
            if k.feature != BIAS && !rows.contains_key(&RowKey { history: k.history, feature: BIAS }) {
                return Err(ModelError::Persistence("feature row without a history row".into()));
            }
        }
        Ok(Self::assemble(
            file.direction,
            file.params,
            Vocab::from_tokens(file.vocabulary),
            features,
            rows,
        ))
    }

    /// Count-table view for inspection: `(total, count of token)` for the
    /// history-only expert (`feature = None`) or a feature expert.
    pub fn counts<S: AsRef<str>>(
        &self,
        prefix: &[S],
        feature: Option<&str>,
        token: &str,
    ) -> Option<(u32, u32)> {
        let ids = self.ids_of(prefix).ok()?;
        let f = match feature {
            Some(name) => *self.features.get(name)?,
            None => BIAS,
        };
        let y = self.vocab.id(token)?;
        let row = self.rows.get(&RowKey {
            history: self.vocab.history(&ids, &self.params),
            feature: f,
        })?;
        let c = row
            .counts
            .iter()
            .find(|(t, _)| *t == y)
            .map_or(0, |(_, c)| *c);
        Some((row.total, c))
    }
}

fn validate_params(p: &TrainParams) -> Result<(), ModelError> {
    if !(p.alpha > 0.0 && p.alpha.is_finite()) {
        return Err(ModelError::InvalidParameter("alpha must be positive".into()));
    }
    if !(p.temperature > 0.0 && p.temperature.is_finite()) {
        return Err(ModelError::InvalidParameter("temperature must be positive".into()));
    }
    if p.top_k == 0 {
        return Err(ModelError::InvalidParameter("top_k must be at least 1".into()));
    }
    if !(p.backoff >= 0.0 && p.backoff.is_finite()) {
        return Err(ModelError::InvalidParameter("backoff must be non-negative".into()));
    }
    if !(1..=2).contains(&p.history) {
        return Err(ModelError::InvalidParameter("history must be 1 or 2".into()));
    }
    Ok(())
}

/// ln P(f absent | y, h) for a feature seen `c` times with a token seen `n`
/// times after the history; `g` is the history-independent P(f | y).
fn absent_log(c: u32, n: u32, g: f64, a: f64, b: f64) -> f64 {
    ((n - c) as f64 + a + b * (1.0 - g)).ln() - (n as f64 + 2.0 * a + b).ln()
}

/// ln P(f present | y, h) - ln P(f absent | y, h).
fn presence_shift(c: u32, n: u32, g: f64, a: f64, b: f64) -> f64 {
    (c as f64 + a + b * g).ln() - ((n - c) as f64 + a + b * (1.0 - g)).ln()
}

/// FNV-1a over the ids.
fn fingerprint(ids: &[u32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for id in ids {
        for b in id.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn softmax_in_place(scores: &mut [f64], temperature: f64) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = ((*s - max) / temperature).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Ids sorted by descending probability, ties by ascending id.
pub(crate) fn rank(probs: &[f64]) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..probs.len() as u32).collect();
    ids.sort_by(|&a, &b| {
        probs[b as usize]
            .partial_cmp(&probs[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids
}

pub(crate) fn argmax(probs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Serialize, Deserialize)]
struct RowEntry {
    history: History,
    feature: Option<u32>,
    counts: Vec<(u32, u32)>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    direction: Direction,
    params: TrainParams,
    vocabulary: Vec<String>,
    features: Vec<String>,
    rows: Vec<RowEntry>,
}
