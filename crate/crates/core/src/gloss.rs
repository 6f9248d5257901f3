//! Gloss generation and cycle-consistent selection.
//!
//! A gloss model proposes paraphrases of a predicted program by beam search;
//! each is scored by how likely the parse model makes the predicted program
//! when the paraphrase stands in for the user's utterance, and the best one
//! is shown to the user.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{tokens_match, DialogueExample};
use crate::model::{Model, ModelError, ModelInput, ScoredDecode};
use crate::text::detokenize;

/// Gloss beam size when none is configured.
pub const DEFAULT_BEAM: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlossError {
    #[error("gloss model produced no finished hypothesis")]
    EmptyBeam,
    #[error("beam size must be at least 1")]
    InvalidBeam,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("gloss audit: {0}")]
    Audit(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlossCandidate {
    pub tokens: Vec<String>,
    pub beam_log_prob: f64,
    /// Forced log-probability of the predicted program given this gloss.
    pub cycle_score: f64,
}

impl GlossCandidate {
    pub fn text(&self) -> String {
        detokenize(&self.tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlossChoice {
    pub index: usize,
    pub candidates: Vec<GlossCandidate>,
}

impl GlossChoice {
    pub fn selected(&self) -> &GlossCandidate {
        &self.candidates[self.index]
    }

    pub fn cycle_score(&self) -> f64 {
        self.selected().cycle_score
    }

    pub fn text(&self) -> String {
        self.selected().text()
    }
}

/// Index of the highest score, earliest on ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Cycle score of one gloss: forced log-probability of `predicted` under
/// the parse model with the gloss as the utterance.
pub fn cycle_score<S: AsRef<str>>(
    parse_model: &Model,
    example: &DialogueExample,
    gloss: &[String],
    predicted: &[S],
) -> Result<f64, ModelError> {
    let input = ModelInput::parse_with(example, gloss);
    Ok(parse_model.forced_score(&input, predicted)?.total_log_prob)
}

/// Beams `n` glosses of `predicted` in the example's context and keeps the
/// one under which the parse model best reproduces `predicted`.
pub fn best_gloss<S: AsRef<str>>(
    gloss_model: &Model,
    parse_model: &Model,
    example: &DialogueExample,
    predicted: &[S],
    n: usize,
    max_len: usize,
) -> Result<GlossChoice, GlossError> {
    if n == 0 {
        return Err(GlossError::InvalidBeam);
    }
    let hyps = gloss_model.beam_search(&ModelInput::gloss(example, predicted), n, max_len);
    if hyps.is_empty() {
        return Err(GlossError::EmptyBeam);
    }
    let candidates = hyps
        .into_iter()
        .map(|h| {
            let cycle = cycle_score(parse_model, example, &h.tokens, predicted)?;
            Ok(GlossCandidate {
                tokens: h.tokens,
                beam_log_prob: h.log_prob,
                cycle_score: cycle,
            })
        })
        .collect::<Result<Vec<_>, GlossError>>()?;
    let scores: Vec<f64> = candidates.iter().map(|c| c.cycle_score).collect();
    let index = argmax_first(&scores).expect("beam is non-empty");
    Ok(GlossChoice { index, candidates })
}

/// Greedy parse with `gloss` in place of the user's utterance.
pub fn reparse(parse_model: &Model, example: &DialogueExample, gloss: &[String], max_len: usize) -> ScoredDecode<f64> {
    parse_model.decode_greedy(&ModelInput::parse_with(example, gloss), max_len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub id: String,
    /// Selected gloss; absent when no gloss could be produced.
    pub gloss: Option<Vec<String>>,
    pub reparsed: Vec<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub accuracy: f64,
    pub records: Vec<CycleRecord>,
}

/// Glosses every gold program, re-parses the chosen gloss and scores exact
/// match against gold. Examples without a gloss count as incorrect.
pub fn cycle_consistency_eval(
    gloss_model: &Model,
    parse_model: &Model,
    examples: &[DialogueExample],
    n: usize,
    max_len: usize,
) -> CycleReport {
    let records: Vec<CycleRecord> = examples
        .par_iter()
        .map(|ex| {
            let gold = ex.gold.tokens();
            match best_gloss(gloss_model, parse_model, ex, gold, n, max_len) {
                Ok(choice) => {
                    let gloss = choice.selected().tokens.clone();
                    let d = reparse(parse_model, ex, &gloss, max_len);
                    let correct = d.terminated && tokens_match(&d.tokens, gold);
                    CycleRecord {
                        id: ex.id.clone(),
                        gloss: Some(gloss),
                        reparsed: d.tokens,
                        correct,
                    }
                }
                Err(_) => CycleRecord {
                    id: ex.id.clone(),
                    gloss: None,
                    reparsed: Vec::new(),
                    correct: false,
                },
            }
        })
        .collect();
    let hits = records.iter().filter(|r| r.correct).count();
    let accuracy = if records.is_empty() { 0.0 } else { hits as f64 / records.len() as f64 };
    CycleReport { accuracy, records }
}

/// Audit line for one glossed example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlossAudit {
    pub id: String,
    pub candidates: Vec<AuditCandidate>,
    pub selected_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCandidate {
    pub text: String,
    pub beam_logp: f64,
    pub cycle_score: f64,
}

impl GlossAudit {
    pub fn new(id: impl Into<String>, choice: &GlossChoice) -> Self {
        Self {
            id: id.into(),
            candidates: choice
                .candidates
                .iter()
                .map(|c| AuditCandidate {
                    text: c.text(),
                    beam_logp: c.beam_log_prob,
                    cycle_score: c.cycle_score,
                })
                .collect(),
            selected_index: choice.index,
        }
    }
}

pub fn write_audit<W: Write>(out: &mut W, audits: &[GlossAudit]) -> Result<(), GlossError> {
    for a in audits {
        let line = serde_json::to_string(a).map_err(|e| GlossError::Audit(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| GlossError::Audit(e.to_string()))?;
    }
    Ok(())
}

pub fn read_audit<R: BufRead>(input: R) -> Result<Vec<GlossAudit>, GlossError> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| GlossError::Audit(e.to_string()))?;
            serde_json::from_str(&l).map_err(|e| GlossError::Audit(e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_earliest_tie() {
        assert_eq!(argmax_first(&[-1.0, -0.5, -0.5]), Some(1));
        assert_eq!(argmax_first(&[]), None);
        assert_eq!(argmax_first(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), Some(0));
    }

    #[test]
    fn audit_line_format() {
        let choice = GlossChoice {
            index: 0,
            candidates: vec![GlossCandidate {
                tokens: vec!["delete".into(), "standup".into(), "?".into()],
                beam_log_prob: -0.5,
                cycle_score: -0.25,
            }],
        };
        let a = GlossAudit::new("x", &choice);
        let mut buf = Vec::new();
        write_audit(&mut buf, std::slice::from_ref(&a)).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"id\":\"x\",\"candidates\":[{\"text\":\"delete standup?\",\"beam_logp\":-0.5,\"cycle_score\":-0.25}],\"selected_index\":0}\n"
        );
        assert_eq!(read_audit(buf.as_slice()).unwrap(), vec![a]);
    }
}
