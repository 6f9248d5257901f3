use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::scalar::Scalar;

/// Tolerance on `sum(entries) + tail_mass` around one.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Top-k view of one decoding step's distribution.
///
/// Entries are sorted by descending probability with ties in vocabulary
/// order; `tail_mass` holds the probability of everything truncated away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDistribution<F> {
    pub entries: Vec<(String, F)>,
    pub tail_mass: F,
}

impl<F: Scalar> StepDistribution<F> {
    /// Builds a distribution from `(token, probability)` entries already in
    /// ranked order; the tail mass is whatever the entries leave uncovered.
    pub fn from_ranked(entries: Vec<(String, F)>) -> Self {
        let covered = entries.iter().fold(F::zero(), |acc, (_, p)| acc + *p);
        let tail_mass = (F::one() - covered).max(F::zero());
        Self { entries, tail_mass }
    }

    pub fn top(&self) -> Option<(&str, F)> {
        self.entries.first().map(|(t, p)| (t.as_str(), *p))
    }

    pub fn prob_of(&self, token: &str) -> Option<F> {
        self.entries.iter().find(|(t, _)| t == token).map(|(_, p)| *p)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.iter().any(|(t, _)| t == token)
    }

    /// Checks ranges, ordering and normalization.
    pub fn validate(&self) -> Result<(), ModelError> {
        let tol = F::from_f64_lossy(NORMALIZATION_TOL);
        for (t, p) in &self.entries {
            if !(*p > F::zero() && *p <= F::one() + tol) {
                return Err(ModelError::Interchange(format!("probability of `{t}` out of range")));
            }
        }
        if self.entries.windows(2).any(|w| w[0].1 < w[1].1) {
            return Err(ModelError::Interchange("entries not sorted by probability".into()));
        }
        let total = self.entries.iter().fold(self.tail_mass, |acc, (_, p)| acc + *p);
        if (total - F::one()).abs() > tol.max(F::epsilon() * F::from_count(self.entries.len() + 1)) {
            return Err(ModelError::Interchange(format!("distribution sums to {total}")));
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> StepDistribution<G> {
        StepDistribution {
            entries: self
                .entries
                .iter()
                .map(|(t, p)| (t.clone(), G::from_f64_lossy(p.to_f64_lossy())))
                .collect(),
            tail_mass: G::from_f64_lossy(self.tail_mass.to_f64_lossy()),
        }
    }
}

/// A decoded token sequence with its per-step distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDecode<F> {
    pub tokens: Vec<String>,
    pub steps: Vec<StepDistribution<F>>,
    pub token_confidences: Vec<F>,
    /// Whether the end symbol was produced before the length limit.
    pub terminated: bool,
}

impl<F: Scalar> ScoredDecode<F> {
    /// Pairs tokens with their step distributions; every emitted token must be
    /// listed in its step.
    pub fn new(
        tokens: Vec<String>,
        steps: Vec<StepDistribution<F>>,
        terminated: bool,
    ) -> Result<Self, ModelError> {
        if tokens.len() != steps.len() {
            return Err(ModelError::Interchange(format!(
                "{} tokens but {} steps",
                tokens.len(),
                steps.len()
            )));
        }
        let token_confidences = tokens
            .iter()
            .zip(&steps)
            .map(|(t, s)| {
                s.prob_of(t).ok_or_else(|| {
                    ModelError::Interchange(format!("token `{t}` missing from its step"))
                })
            })
            .collect::<Result<Vec<F>, _>>()?;
        Ok(Self {
            tokens,
            steps,
            token_confidences,
            terminated,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> ScoredDecode<G> {
        ScoredDecode {
            tokens: self.tokens.clone(),
            steps: self.steps.iter().map(StepDistribution::cast).collect(),
            token_confidences: self
                .token_confidences
                .iter()
                .map(|p| G::from_f64_lossy(p.to_f64_lossy()))
                .collect(),
            terminated: self.terminated,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist() -> StepDistribution<f64> {
        StepDistribution::from_ranked(vec![("a".into(), 0.5), ("b".into(), 0.3)])
    }

    #[test]
    fn tail_mass_closes_the_distribution() {
        let d = dist();
        assert!((d.tail_mass - 0.2).abs() < 1e-12);
        d.validate().unwrap();
    }

    #[test]
    fn rejects_unsorted_entries() {
        let d = StepDistribution {
            entries: vec![("a".into(), 0.2), ("b".into(), 0.8)],
            tail_mass: 0.0,
        };
        assert!(d.validate().is_err());
    }

    #[test]
    fn decode_requires_emitted_tokens_in_steps() {
        assert!(ScoredDecode::new(vec!["a".into()], vec![dist()], true).is_ok());
        assert!(ScoredDecode::new(vec!["z".into()], vec![dist()], true).is_err());
        assert!(ScoredDecode::new(vec![], vec![dist()], true).is_err());
    }

    #[test]
    fn casts_between_widths() {
        let d = ScoredDecode::new(vec!["b".into()], vec![dist()], true).unwrap();
        let narrow: ScoredDecode<f32> = d.cast();
        assert_eq!(narrow.token_confidences, vec![0.3f32]);
    }
}
