use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ModelError, ScoredDecode, StepDistribution};

/// One line of the prediction interchange file. External parsers write these
/// to plug their decodes into every confidence-driven tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterchangeRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub steps: Vec<Vec<(String, f64)>>,
    pub gold_tokens: Vec<String>,
    pub terminated: bool,
}

impl InterchangeRecord {
    pub fn from_decode(id: impl Into<String>, decode: &ScoredDecode<f64>, gold: &[String]) -> Self {
        Self {
            id: id.into(),
            tokens: decode.tokens.clone(),
            steps: decode.steps.iter().map(|s| s.entries.clone()).collect(),
            gold_tokens: gold.to_vec(),
            terminated: decode.terminated,
        }
    }

    /// Rebuilds the decode, checking each step and that every emitted token
    /// appears in its step.
    pub fn to_decode(&self) -> Result<ScoredDecode<f64>, ModelError> {
        let steps = self
            .steps
            .iter()
            .map(|entries| {
                let s = StepDistribution::from_ranked(entries.clone());
                s.validate().map_err(|e| ModelError::Interchange(format!("{}: {e}", self.id)))?;
                Ok(s)
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        ScoredDecode::new(self.tokens.clone(), steps, self.terminated)
            .map_err(|e| ModelError::Interchange(format!("{}: {e}", self.id)))
    }
}

pub fn write_interchange<W: Write>(out: &mut W, records: &[InterchangeRecord]) -> Result<(), ModelError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| ModelError::Interchange(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| ModelError::Interchange(e.to_string()))?;
    }
    Ok(())
}

/// Reads and validates an interchange file. Blank lines are skipped; ids
/// must be unique.
pub fn read_interchange<R: BufRead>(input: R) -> Result<Vec<InterchangeRecord>, ModelError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| ModelError::Interchange(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: InterchangeRecord = serde_json::from_str(&line)
            .map_err(|e| ModelError::Interchange(format!("line {}: {e}", n + 1)))?;
        r.to_decode()?;
        if !seen.insert(r.id.clone()) {
            return Err(ModelError::Interchange(format!("duplicate id `{}`", r.id)));
        }
        out.push(r);
    }
    Ok(out)
}
