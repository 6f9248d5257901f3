//! Simulated annotator-in-the-loop decoding.
//!
//! Greedy decoding runs as usual until a step's confidence falls strictly
//! below the threshold. The oracle is then consulted: if the decoded prefix
//! agrees with the gold prefix, the gold token replaces the model's choice
//! and decoding continues; otherwise the example is abandoned.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsl::{tokens_match, DialogueExample};
use crate::model::{rank, Model, ModelInput, END};
use crate::scalar::{ratio, Scalar};

/// Rank cutoff for the top-k hit metric.
pub const TOP_K_HIT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepFlags {
    pub confidence: f64,
    pub queried: bool,
    /// Gold token within the step's top five. Only set on queried steps.
    pub top5_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitlOutcome {
    pub id: String,
    /// Emitted tokens after substitution, end symbol excluded.
    pub tokens: Vec<String>,
    /// One entry per decoding step, the end step included.
    pub steps: Vec<StepFlags>,
    pub aborted: bool,
    pub terminated: bool,
    pub correct: bool,
}

impl HitlOutcome {
    pub fn queries(&self) -> usize {
        self.steps.iter().filter(|s| s.queried).count()
    }

    pub fn top5_hits(&self) -> usize {
        self.steps.iter().filter(|s| s.top5_hit).count()
    }
}

/// Corpus metrics at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitlReport<F> {
    pub threshold: F,
    pub accuracy: F,
    /// Queried steps over all decoding steps taken.
    pub query_rate: F,
    /// Top-5 hits over queried steps; zero when nothing was queried.
    pub top5_rate: F,
    pub no_queries: bool,
    pub examples: usize,
    pub correct: usize,
    pub steps: usize,
    pub queries: usize,
    pub top5_hits: usize,
}

impl<F: Scalar> HitlReport<F> {
    pub fn from_outcomes(threshold: F, outcomes: &[HitlOutcome]) -> Self {
        let correct = outcomes.iter().filter(|o| o.correct).count();
        let steps = outcomes.iter().map(|o| o.steps.len()).sum();
        let queries = outcomes.iter().map(HitlOutcome::queries).sum();
        let top5_hits = outcomes.iter().map(HitlOutcome::top5_hits).sum();
        Self {
            threshold,
            accuracy: ratio(correct, outcomes.len()),
            query_rate: ratio(queries, steps),
            top5_rate: ratio(top5_hits, queries),
            no_queries: queries == 0,
            examples: outcomes.len(),
            correct,
            steps,
            queries,
            top5_hits,
        }
    }
}

fn in_top5(probs: &[f64], id: u32) -> bool {
    rank(probs).iter().take(TOP_K_HIT).any(|&r| r == id)
}

/// Runs oracle-assisted greedy decoding on one example.
///
/// A query fires when the emitted token's probability is strictly below
/// `threshold`. A query at step `t` needs the prefix to equal the first `t`
/// gold tokens and a gold token (or the end symbol) at position `t`;
/// otherwise the example aborts there.
pub fn simulate_example(model: &Model, example: &DialogueExample, threshold: f64, max_len: usize) -> HitlOutcome {
    let enc = model.encode(&ModelInput::parse(example));
    let gold = example.gold.tokens();
    let vocab = model.vocab();
    let mut ids: Vec<u32> = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut steps = Vec::new();
    let mut aborted = false;
    let mut terminated = false;
    loop {
        let probs = model.probs_ids(&enc, &ids);
        let best = rank(&probs)[0];
        let confidence = probs[best as usize];
        let mut flags = StepFlags {
            confidence,
            queried: confidence < threshold,
            top5_hit: false,
        };
        let mut emit: Option<(String, Option<u32>)> = Some((vocab.token(best).to_string(), Some(best)));
        if flags.queried {
            let t = tokens.len();
            let target = if t < gold.len() {
                Some(gold[t].as_str())
            } else if t == gold.len() {
                Some(END)
            } else {
                None
            };
            match target {
                Some(g) if tokens_match(&tokens, &gold[..t]) => {
                    let gid = if g == END { Some(0) } else { vocab.prefix_id(g) };
                    flags.top5_hit = vocab.id(g).is_some_and(|id| in_top5(&probs, id));
                    emit = Some((g.to_string(), gid));
                }
                _ => emit = None,
            }
        }
        steps.push(flags);
        let Some((token, id)) = emit else {
            aborted = true;
            break;
        };
        if token == END {
            terminated = true;
            break;
        }
        if tokens.len() == max_len {
            break;
        }
        match id {
            Some(id) => ids.push(id),
            // a non-literal gold token the model has never seen cannot be
            // fed back as history
            None => {
                aborted = true;
                tokens.push(token);
                break;
            }
        }
        tokens.push(token);
    }
    let correct = !aborted && terminated && tokens_match(&tokens, gold);
    HitlOutcome {
        id: example.id.clone(),
        tokens,
        steps,
        aborted,
        terminated,
        correct,
    }
}

/// Outcomes for every example at one threshold, in input order.
pub fn simulate_corpus(model: &Model, examples: &[DialogueExample], threshold: f64, max_len: usize) -> Vec<HitlOutcome> {
    examples
        .par_iter()
        .map(|ex| simulate_example(model, ex, threshold, max_len))
        .collect()
}

/// One report per threshold, in the order given.
pub fn sweep_thresholds<F: Scalar>(
    model: &Model,
    examples: &[DialogueExample],
    thresholds: &[F],
    max_len: usize,
) -> Vec<HitlReport<F>> {
    thresholds
        .iter()
        .map(|&t| {
            let outcomes = simulate_corpus(model, examples, t.to_f64_lossy(), max_len);
            HitlReport::from_outcomes(t, &outcomes)
        })
        .collect()
}

/// The sweep grid 0.0, 0.1, ..., 1.0 followed by 1.01.
pub fn default_thresholds<F: Scalar>() -> Vec<F> {
    let mut grid: Vec<F> = (0..=10).map(|i| F::from_count(i) / F::from_count(10)).collect();
    grid.push(F::from_f64_lossy(1.01));
    grid
}

/// Plain-text table of a sweep: accuracy, share of steps queried and top-5 rate.
pub fn render_sweep<F: Scalar>(reports: &[HitlReport<F>]) -> String {
    let mut out = format!("{:>9}  {:>8}  {:>9}  {:>8}\n", "threshold", "accuracy", "% queried", "% top-5");
    for r in reports {
        out.push_str(&format!(
            "{:>9.2}  {:>8.4}  {:>9.4}  {:>8.4}{}\n",
            r.threshold.to_f64_lossy(),
            r.accuracy.to_f64_lossy(),
            r.query_rate.to_f64_lossy(),
            r.top5_rate.to_f64_lossy(),
            if r.no_queries { "  (no queries)" } else { "" }
        ));
    }
    out
}
