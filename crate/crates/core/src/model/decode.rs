use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, EncodedInput, Model, ModelError, ModelInput, ScoredDecode};

/// One finished beam hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    pub tokens: Vec<String>,
    /// Total log-probability including the end symbol.
    pub log_prob: f64,
    /// Probability of each emitted token under its own prefix.
    pub token_probs: Vec<f64>,
}

impl BeamHypothesis {
    pub fn min_confidence(&self) -> Option<f64> {
        self.token_probs.iter().copied().reduce(f64::min)
    }
}

/// Teacher-forced score of a target sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedScore {
    /// Sum of per-step log-probabilities, end symbol included.
    pub total_log_prob: f64,
    pub token_probs: Vec<f64>,
    pub end_prob: f64,
}

/// Nucleus candidate-list settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NucleusConfig {
    /// Stop once the summed min-token confidences exceed this.
    pub cutoff: f64,
    /// Maximum candidates returned.
    pub cap: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Ancestral samples drawn to fill the candidate pool.
    pub draws: usize,
}

impl Default for NucleusConfig {
    fn default() -> Self {
        Self {
            cutoff: 0.85,
            cap: 10,
            max_len: 64,
            seed: 0,
            draws: 200,
        }
    }
}

/// A distinct program candidate with its minimum token probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<String>,
    pub min_confidence: f64,
}

/// Number of leading candidates kept by the cutoff rule: add candidates in
/// order until the running sum of min-confidences exceeds `cutoff`, never
/// more than `cap`.
pub fn apply_cutoff(min_confidences: &[f64], cutoff: f64, cap: usize) -> usize {
    let mut sum = 0.0;
    for (i, &c) in min_confidences.iter().take(cap).enumerate() {
        sum += c;
        if sum > cutoff {
            return i + 1;
        }
    }
    min_confidences.len().min(cap)
}

#[derive(Clone)]
struct Partial {
    ids: Vec<u32>,
    log_prob: f64,
    probs: Vec<f64>,
}

fn cmp_hyp(a_lp: f64, a_ids: &[u32], b_lp: f64, b_ids: &[u32]) -> Ordering {
    b_lp.partial_cmp(&a_lp)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_ids.cmp(b_ids))
}

impl Model {
    fn tokens_of(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.vocab.token(i).to_string()).collect()
    }

    /// Greedy decoding: emit the argmax until the end symbol or `max_len`
    /// tokens. After `max_len` tokens one more step checks whether the model
    /// would end there.
    pub fn decode_greedy(&self, input: &ModelInput, max_len: usize) -> ScoredDecode<f64> {
        let enc = self.encode(input);
        self.decode_greedy_encoded(&enc, max_len)
    }

    pub(crate) fn decode_greedy_encoded(&self, enc: &EncodedInput, max_len: usize) -> ScoredDecode<f64> {
        let mut ids = Vec::new();
        let mut steps = Vec::new();
        let mut confidences = Vec::new();
        let mut terminated = false;
        loop {
            let probs = self.probs_ids(enc, &ids);
            let best = argmax(&probs);
            if best == 0 {
                terminated = true;
                break;
            }
            if ids.len() == max_len {
                break;
            }
            steps.push(self.top_k_step(&probs, None));
            confidences.push(probs[best as usize]);
            ids.push(best);
        }
        ScoredDecode {
            tokens: self.tokens_of(&ids),
            steps,
            token_confidences: confidences,
            terminated,
        }
    }

    /// Beam search over finished hypotheses.
    ///
    /// Each round ranks every one-token extension of the live beam and keeps
    /// the best `beam`; extensions ending in the end symbol are finished, the
    /// rest continue unless they would exceed `max_len`. Returns at most `beam` finished hypotheses, best first,
    /// ties broken by token order.
    pub fn beam_search(&self, input: &ModelInput, beam: usize, max_len: usize) -> Vec<BeamHypothesis> {
        let enc = self.encode(input);
        self.beam_search_encoded(&enc, beam, max_len)
    }

    pub(crate) fn beam_search_encoded(
        &self,
        enc: &EncodedInput,
        beam: usize,
        max_len: usize,
    ) -> Vec<BeamHypothesis> {
        let beam = beam.max(1);
        let mut live = vec![Partial {
            ids: Vec::new(),
            log_prob: 0.0,
            probs: Vec::new(),
        }];
        let mut finished: Vec<Partial> = Vec::new();
        while !live.is_empty() {
            // (parent, token, log_prob)
            let mut cands: Vec<(usize, u32, f64, f64)> = Vec::new();
            for (pi, p) in live.iter().enumerate() {
                let probs = self.probs_ids(enc, &p.ids);
                for (y, &q) in probs.iter().enumerate() {
                    if q <= 0.0 {
                        continue;
                    }
                    cands.push((pi, y as u32, p.log_prob + q.ln(), q));
                }
            }
            let key = |c: &(usize, u32, f64, f64)| {
                let mut ids = live[c.0].ids.clone();
                ids.push(c.1);
                ids
            };
            cands.sort_by(|a, b| cmp_hyp(a.2, &key(a), b.2, &key(b)));
            cands.truncate(beam);
            let mut next = Vec::new();
            for (pi, y, lp, q) in cands {
                let parent = &live[pi];
                if y == 0 {
                    finished.push(Partial {
                        ids: parent.ids.clone(),
                        log_prob: lp,
                        probs: parent.probs.clone(),
                    });
                } else if parent.ids.len() < max_len {
                    let mut ids = parent.ids.clone();
                    ids.push(y);
                    let mut probs = parent.probs.clone();
                    probs.push(q);
                    next.push(Partial {
                        ids,
                        log_prob: lp,
                        probs,
                    });
                }
            }
            live = next;
            // extensions only lower scores: stop once the live beam cannot
            // displace any of the best `beam` finished hypotheses
            if finished.len() >= beam {
                finished.sort_by(|a, b| cmp_hyp(a.log_prob, &a.ids, b.log_prob, &b.ids));
                let worst = finished[beam - 1].log_prob;
                if live.iter().all(|p| p.log_prob < worst) {
                    break;
                }
            }
        }
        finished.sort_by(|a, b| cmp_hyp(a.log_prob, &a.ids, b.log_prob, &b.ids));
        finished.truncate(beam);
        finished
            .into_iter()
            .map(|p| BeamHypothesis {
                tokens: self.tokens_of(&p.ids),
                log_prob: p.log_prob,
                token_probs: p.probs,
            })
            .collect()
    }

    /// Teacher-forced log-probability of `target` followed by the end symbol.
    pub fn forced_score<S: AsRef<str>>(
        &self,
        input: &ModelInput,
        target: &[S],
    ) -> Result<ForcedScore, ModelError> {
        let enc = self.encode(input);
        let ids = self.ids_of(target)?;
        Ok(self.forced_score_ids(&enc, &ids))
    }

    pub(crate) fn forced_score_ids(&self, enc: &EncodedInput, ids: &[u32]) -> ForcedScore {
        let mut total = 0.0;
        let mut token_probs = Vec::with_capacity(ids.len());
        for t in 0..ids.len() {
            let p = self.probs_ids(enc, &ids[..t])[ids[t] as usize];
            total += p.ln();
            token_probs.push(p);
        }
        let end_prob = self.probs_ids(enc, ids)[0];
        total += end_prob.ln();
        ForcedScore {
            total_log_prob: total,
            token_probs,
            end_prob,
        }
    }

    /// Candidate programs for selection: a seeded pool of distinct finished
    /// sequences (the greedy decode plus ancestral samples), ordered by
    /// descending min-token confidence and cut by [`apply_cutoff`].
    pub fn nucleus_candidates(&self, input: &ModelInput, cfg: &NucleusConfig) -> Vec<Candidate> {
        let enc = self.encode(input);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut seen: HashSet<Vec<u32>> = HashSet::new();
        let mut pool: Vec<(Vec<u32>, f64)> = Vec::new();

        let greedy = self.decode_greedy_encoded(&enc, cfg.max_len);
        if greedy.terminated && !greedy.is_empty() {
            let ids = self.ids_of(&greedy.tokens).expect("decoded tokens are in vocabulary");
            let m = greedy.token_confidences.iter().copied().fold(1.0, f64::min);
            seen.insert(ids.clone());
            pool.push((ids, m));
        }
        // draws share most prefixes, so each distribution is computed once
        let mut cache: HashMap<Vec<u32>, Vec<f64>> = HashMap::new();
        for _ in 0..cfg.draws {
            let mut ids = Vec::new();
            let mut min_p = 1.0f64;
            let mut done = false;
            while ids.len() <= cfg.max_len {
                let probs = cache
                    .entry(ids.clone())
                    .or_insert_with(|| self.probs_ids(&enc, &ids));
                let y = sample(probs, &mut rng);
                if y == 0 {
                    done = true;
                    break;
                }
                if ids.len() == cfg.max_len {
                    break;
                }
                min_p = min_p.min(probs[y as usize]);
                ids.push(y);
            }
            if done && !ids.is_empty() && seen.insert(ids.clone()) {
                pool.push((ids, min_p));
            }
        }
        pool.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        let mins: Vec<f64> = pool.iter().map(|(_, m)| *m).collect();
        let keep = apply_cutoff(&mins, cfg.cutoff, cfg.cap);
        pool.into_iter()
            .take(keep)
            .map(|(ids, m)| Candidate {
                tokens: self.tokens_of(&ids),
                min_confidence: m,
            })
            .collect()
    }
}

fn sample<R: Rng>(probs: &[f64], rng: &mut R) -> u32 {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return i as u32;
        }
    }
    // rounding left a sliver past the last bucket
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}
