//! Selective execution: decision records, the coverage/risk report, the
//! F-beta threshold tuner and the decision policies.

mod policy;

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{f_beta, ratio, Scalar};

pub use policy::{
    confirmation, noisy_flip, run_policy, ConfirmMode, Confirmation, Policy, PolicyInput,
    PolicyModels, UserModel,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectiveError {
    #[error("no decision records")]
    EmptyInput,
    #[error("example `{0}` has more than one decision record")]
    DuplicateExample(String),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("policy needs a gloss model and a parse model")]
    MissingGlossModel,
    #[error("scripted user has no judgment for `{0}`")]
    MissingJudgment(String),
    #[error("decision records: {0}")]
    Records(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Execute,
    Abstain,
}

/// Outcome of one policy on one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub id: String,
    pub confidence: f64,
    pub policy: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed_tokens: Option<Vec<String>>,
    /// Whether the program this policy would execute matches gold.
    pub candidate_correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gloss: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judgment: Option<bool>,
}

impl DecisionRecord {
    pub fn executed(&self) -> bool {
        self.decision == Decision::Execute
    }

    /// Checks that an executed program is present exactly when executing.
    pub fn validate(&self) -> Result<(), SelectiveError> {
        if self.executed() != self.executed_tokens.is_some() {
            return Err(SelectiveError::Records(format!(
                "`{}`: executed program must be present iff the decision is execute",
                self.id
            )));
        }
        Ok(())
    }
}

pub fn write_records<W: Write>(out: &mut W, records: &[DecisionRecord]) -> Result<(), SelectiveError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| SelectiveError::Records(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| SelectiveError::Records(e.to_string()))?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<DecisionRecord>, SelectiveError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| SelectiveError::Records(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DecisionRecord = serde_json::from_str(&line)
            .map_err(|e| SelectiveError::Records(format!("line {}: {e}", n + 1)))?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

/// Coverage, risk and F-measures of one policy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveReport<F> {
    pub total: usize,
    pub executed: usize,
    pub coverage: F,
    pub risk: F,
    pub precision: F,
    pub recall: F,
    pub f1: F,
    pub f0_5: F,
    pub false_positives: usize,
    /// Examples whose policy candidate is correct; the recall denominator.
    pub candidate_correct: usize,
    /// Set when nothing was executed; risk and precision are then zero.
    pub nothing_executed: bool,
}

impl<F: Scalar> SelectiveReport<F> {
    /// Report from raw counts.
    pub fn from_counts(total: usize, executed: usize, false_positives: usize, candidate_correct: usize) -> Self {
        let hits = executed - false_positives;
        let nothing_executed = executed == 0;
        let risk: F = ratio(false_positives, executed);
        let precision = if nothing_executed { F::zero() } else { F::one() - risk };
        let recall: F = ratio(hits, candidate_correct);
        let half = F::from_f64_lossy(0.5);
        Self {
            total,
            executed,
            coverage: ratio(executed, total),
            risk,
            precision,
            recall,
            f1: f_beta(precision, recall, F::one()),
            f0_5: f_beta(precision, recall, half),
            false_positives,
            candidate_correct,
            nothing_executed,
        }
    }

    /// Table row: Cov, Risk, FP, F1, F0.5.
    pub fn render_row(&self, name: &str) -> String {
        format!(
            "{name:<10} {:>5.2} {:>5.2} {:>4} {:>5.2} {:>5.2}",
            self.coverage.to_f64_lossy(),
            self.risk.to_f64_lossy(),
            self.false_positives,
            self.f1.to_f64_lossy(),
            self.f0_5.to_f64_lossy()
        )
    }
}

pub fn render_header() -> String {
    format!("{:<10} {:>5} {:>5} {:>4} {:>5} {:>5}", "setting", "cov", "risk", "fp", "f1", "f0.5")
}

/// Scores a policy run. One record per example.
pub fn evaluate<F: Scalar>(records: &[DecisionRecord]) -> Result<SelectiveReport<F>, SelectiveError> {
    if records.is_empty() {
        return Err(SelectiveError::EmptyInput);
    }
    let mut seen = HashSet::with_capacity(records.len());
    let (mut executed, mut fp, mut pool) = (0, 0, 0);
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(SelectiveError::DuplicateExample(r.id.clone()));
        }
        r.validate()?;
        pool += usize::from(r.candidate_correct);
        if r.executed() {
            executed += 1;
            fp += usize::from(!r.candidate_correct);
        }
    }
    Ok(SelectiveReport::from_counts(records.len(), executed, fp, pool))
}

/// One grid point of the threshold curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint<F> {
    pub threshold: F,
    pub coverage: F,
    pub risk: F,
    pub f1: F,
    pub score: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTuning<F> {
    pub threshold: F,
    pub score: F,
    pub curve: Vec<ThresholdPoint<F>>,
}

/// The tuning grid `i / 100` for `i` in `0..100`.
pub fn threshold_grid<F: Scalar>() -> Vec<F> {
    (0..100).map(|i| F::from_count(i) / F::from_count(100)).collect()
}

/// Report of "execute iff confidence >= threshold" on `(confidence, correct)` pairs.
pub fn threshold_report<F: Scalar>(pairs: &[(F, bool)], threshold: F) -> SelectiveReport<F> {
    let (mut executed, mut fp, mut pool) = (0, 0, 0);
    for &(c, ok) in pairs {
        pool += usize::from(ok);
        if c >= threshold {
            executed += 1;
            fp += usize::from(!ok);
        }
    }
    SelectiveReport::from_counts(pairs.len(), executed, fp, pool)
}

/// Grid threshold maximizing F-beta; ties go to the lowest threshold.
pub fn tune_threshold_fbeta<F: Scalar>(pairs: &[(F, bool)], beta: F) -> Result<ThresholdTuning<F>, SelectiveError> {
    if pairs.is_empty() {
        return Err(SelectiveError::EmptyValidation);
    }
    let mut curve = Vec::with_capacity(100);
    let mut best: Option<(F, F)> = None;
    for t in threshold_grid::<F>() {
        let r = threshold_report(pairs, t);
        let score = f_beta(r.precision, r.recall, beta);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((t, score));
        }
        curve.push(ThresholdPoint {
            threshold: t,
            coverage: r.coverage,
            risk: r.risk,
            f1: r.f1,
            score,
        });
    }
    let (threshold, score) = best.expect("grid is non-empty");
    Ok(ThresholdTuning { threshold, score, curve })
}

/// F1-optimal grid threshold.
pub fn tune_threshold<F: Scalar>(pairs: &[(F, bool)]) -> Result<ThresholdTuning<F>, SelectiveError> {
    tune_threshold_fbeta(pairs, F::one())
}
