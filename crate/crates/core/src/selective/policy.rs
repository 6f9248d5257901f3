use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Decision, DecisionRecord, SelectiveError};
use crate::confidence::decode_confidence;
use crate::dsl::{tokens_match, DialogueExample};
use crate::gloss::{best_gloss, reparse, DEFAULT_BEAM};
use crate::model::{Model, ScoredDecode};

/// What gets executed once a user accepts a gloss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmMode {
    /// The original prediction.
    Chosen,
    /// The parse of the accepted gloss.
    Reparsed,
}

impl ConfirmMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConfirmMode::Chosen => "chosen",
            ConfirmMode::Reparsed => "reparsed",
        }
    }
}

/// Simulated user judging glosses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserModel {
    /// Accepts exactly when the candidate program is correct.
    Oracle,
    /// The oracle with each judgment flipped with probability `epsilon`.
    Noisy { epsilon: f64, seed: u64 },
    /// Fixed judgments by example id.
    Scripted(HashMap<String, bool>),
}

/// Whether the noisy user flips its judgment on `id`. Each example draws
/// from its own stream so the outcome does not depend on processing order.
pub fn noisy_flip(epsilon: f64, seed: u64, id: &str) -> bool {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    rng.gen::<f64>() < epsilon
}

impl UserModel {
    pub fn judge(&self, id: &str, candidate_correct: bool) -> Result<bool, SelectiveError> {
        match self {
            UserModel::Oracle => Ok(candidate_correct),
            UserModel::Noisy { epsilon, seed } => Ok(candidate_correct ^ noisy_flip(*epsilon, *seed, id)),
            UserModel::Scripted(map) => map
                .get(id)
                .copied()
                .ok_or_else(|| SelectiveError::MissingJudgment(id.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Policy {
    AcceptAll,
    Threshold { threshold: f64 },
    DidYouMean { threshold: f64, mode: ConfirmMode, user: UserModel },
}

impl Policy {
    pub fn name(&self) -> String {
        match self {
            Policy::AcceptAll => "accept_all".into(),
            Policy::Threshold { .. } => "threshold".into(),
            Policy::DidYouMean { mode, .. } => format!("didyoumean_{}", mode.as_str()),
        }
    }
}

/// One example with its predicted decode.
#[derive(Debug, Clone)]
pub struct PolicyInput<'a> {
    pub example: &'a DialogueExample,
    pub decode: ScoredDecode<f64>,
}

/// Models a DidYouMean policy needs.
#[derive(Debug, Clone, Copy)]
pub struct PolicyModels<'a> {
    pub parse: Option<&'a Model>,
    pub gloss: Option<&'a Model>,
    pub beam: usize,
    pub max_len: usize,
}

impl Default for PolicyModels<'_> {
    fn default() -> Self {
        Self {
            parse: None,
            gloss: None,
            beam: DEFAULT_BEAM,
            max_len: 64,
        }
    }
}

fn correct(decode: &ScoredDecode<f64>, example: &DialogueExample) -> bool {
    decode.terminated && tokens_match(&decode.tokens, example.gold.tokens())
}

/// Result of showing one low-confidence prediction to a user.
#[derive(Debug, Clone, PartialEq)]
pub struct Confirmation {
    pub gloss: Option<String>,
    /// Program executed on acceptance, if it terminated.
    pub candidate: Option<Vec<String>>,
    pub candidate_correct: bool,
}

/// Glosses a prediction and works out what acceptance would execute.
pub fn confirmation(
    parse: &Model,
    gloss: &Model,
    input: &PolicyInput<'_>,
    mode: ConfirmMode,
    beam: usize,
    max_len: usize,
) -> Confirmation {
    let original_ok = correct(&input.decode, input.example);
    let choice = best_gloss(gloss, parse, input.example, &input.decode.tokens, beam, max_len);
    let Ok(choice) = choice else {
        return Confirmation {
            gloss: None,
            candidate: None,
            candidate_correct: original_ok,
        };
    };
    match mode {
        ConfirmMode::Chosen => Confirmation {
            gloss: Some(choice.text()),
            candidate: Some(input.decode.tokens.clone()),
            candidate_correct: original_ok,
        },
        ConfirmMode::Reparsed => {
            let d = reparse(parse, input.example, &choice.selected().tokens, max_len);
            let ok = correct(&d, input.example);
            Confirmation {
                gloss: Some(choice.text()),
                candidate: d.terminated.then_some(d.tokens),
                candidate_correct: ok,
            }
        }
    }
}

fn decide(
    policy: &Policy,
    input: &PolicyInput<'_>,
    models: &PolicyModels<'_>,
) -> Result<DecisionRecord, SelectiveError> {
    let confidence = decode_confidence(&input.decode);
    let original_ok = correct(&input.decode, input.example);
    let mut rec = DecisionRecord {
        id: input.example.id.clone(),
        confidence,
        policy: policy.name(),
        decision: Decision::Abstain,
        executed_tokens: None,
        candidate_correct: original_ok,
        gloss: None,
        judgment: None,
    };
    let execute_original = |rec: &mut DecisionRecord| {
        rec.decision = Decision::Execute;
        rec.executed_tokens = Some(input.decode.tokens.clone());
    };
    match policy {
        Policy::AcceptAll => execute_original(&mut rec),
        Policy::Threshold { threshold } => {
            if input.decode.terminated && confidence >= *threshold {
                execute_original(&mut rec);
            }
        }
        Policy::DidYouMean { threshold, mode, user } => {
            if !input.decode.terminated {
                return Ok(rec);
            }
            if confidence >= *threshold {
                execute_original(&mut rec);
                return Ok(rec);
            }
            let (Some(parse), Some(gloss)) = (models.parse, models.gloss) else {
                return Err(SelectiveError::MissingGlossModel);
            };
            let c = confirmation(parse, gloss, input, *mode, models.beam, models.max_len);
            rec.candidate_correct = c.candidate_correct;
            let Some(text) = c.gloss else {
                return Ok(rec);
            };
            rec.gloss = Some(text);
            // nothing runnable to confirm: abstain without asking
            let Some(tokens) = c.candidate else {
                return Ok(rec);
            };
            let accept = user.judge(&rec.id, c.candidate_correct)?;
            rec.judgment = Some(accept);
            if accept {
                rec.decision = Decision::Execute;
                rec.executed_tokens = Some(tokens);
            }
        }
    }
    Ok(rec)
}

/// Applies a policy to every input. Records come back in input order.
pub fn run_policy(
    policy: &Policy,
    inputs: &[PolicyInput<'_>],
    models: &PolicyModels<'_>,
) -> Result<Vec<DecisionRecord>, SelectiveError> {
    if let Policy::DidYouMean { .. } = policy {
        if models.parse.is_none() || models.gloss.is_none() {
            return Err(SelectiveError::MissingGlossModel);
        }
    }
    inputs.par_iter().map(|i| decide(policy, i, models)).collect()
}
