//! Token and sequence confidence, reliability diagnostics and the
//! confidence-stratified sampler used to assemble study batches.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ScoredDecode, StepDistribution};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfidenceError {
    #[error("sequence confidence of an empty decode")]
    EmptyDecode,
    #[error("no confidence pairs given")]
    EmptyInput,
    #[error("bin count must be at least 1")]
    InvalidBins,
    #[error("confidence {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("bin {0} has fewer items than requested")]
    BinUnderflow(usize),
}

/// Probability of the top entry of one step.
pub fn token_confidence<F: Scalar>(step: &StepDistribution<F>) -> F {
    step.entries.first().map_or(F::zero(), |(_, p)| *p)
}

/// Minimum token confidence over a decode.
pub fn sequence_confidence<F: Scalar>(decode: &ScoredDecode<F>) -> Result<F, ConfidenceError> {
    decode
        .token_confidences
        .iter()
        .copied()
        .reduce(F::min)
        .ok_or(ConfidenceError::EmptyDecode)
}

/// Sequence confidence with an empty decode scored as zero, for policies
/// that must rank every input.
pub fn decode_confidence<F: Scalar>(decode: &ScoredDecode<F>) -> F {
    sequence_confidence(decode).unwrap_or(F::zero())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBin<F> {
    pub lower: F,
    pub upper: F,
    pub count: usize,
    pub mean_confidence: F,
    pub accuracy: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport<F> {
    pub bins: Vec<ConfidenceBin<F>>,
    pub ece: F,
}

impl<F: Scalar> CalibrationReport<F> {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// ECE recomputed from the bins alone.
    pub fn ece_from_bins(&self) -> F {
        let total = F::from_count(self.total());
        self.bins.iter().fold(F::zero(), |acc, b| {
            acc + F::from_count(b.count) / total * (b.accuracy - b.mean_confidence).abs()
        })
    }

    /// Plain-text reliability table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>13}  {:>6}  {:>9}  {:>8}", "bin", "count", "mean conf", "accuracy");
        for b in &self.bins {
            let _ = writeln!(
                out,
                "[{:.2}, {:.2}{}  {:>6}  {:>9.4}  {:>8.4}",
                b.lower.to_f64_lossy(),
                b.upper.to_f64_lossy(),
                if b.upper >= F::one() { "]" } else { ")" },
                b.count,
                b.mean_confidence.to_f64_lossy(),
                b.accuracy.to_f64_lossy()
            );
        }
        let _ = writeln!(out, "ECE {:.4} over {} items", self.ece.to_f64_lossy(), self.total());
        out
    }
}

/// Index of the equal-width bin of `[0, upper]` holding `c`; the last bin is
/// closed. Bounds are `i * upper / n`, and the index agrees with them even
/// where floating point division would round across a boundary.
fn bin_index<F: Scalar>(c: F, n: usize, upper: F) -> usize {
    let nf = F::from_count(n);
    let lower = |i: usize| F::from_count(i) * upper / nf;
    let mut i = (c / upper * nf).floor().to_usize().unwrap_or(0).min(n - 1);
    while i > 0 && c < lower(i) {
        i -= 1;
    }
    while i + 1 < n && c >= lower(i + 1) {
        i += 1;
    }
    i
}

/// Equal-width reliability diagram over `[0, 1]` and its expected
/// calibration error.
pub fn reliability<F: Scalar>(
    pairs: &[(F, bool)],
    n_bins: usize,
) -> Result<CalibrationReport<F>, ConfidenceError> {
    if n_bins == 0 {
        return Err(ConfidenceError::InvalidBins);
    }
    if pairs.is_empty() {
        return Err(ConfidenceError::EmptyInput);
    }
    let mut sums = vec![(0usize, F::zero(), 0usize); n_bins];
    for &(c, correct) in pairs {
        if !(c >= F::zero() && c <= F::one()) {
            return Err(ConfidenceError::OutOfRange(c.to_f64_lossy()));
        }
        let s = &mut sums[bin_index(c, n_bins, F::one())];
        s.0 += 1;
        s.1 = s.1 + c;
        s.2 += usize::from(correct);
    }
    let nf = F::from_count(n_bins);
    let bins: Vec<ConfidenceBin<F>> = sums
        .into_iter()
        .enumerate()
        .map(|(i, (count, conf_sum, hits))| ConfidenceBin {
            lower: F::from_count(i) / nf,
            upper: F::from_count(i + 1) / nf,
            count,
            mean_confidence: if count == 0 { F::zero() } else { conf_sum / F::from_count(count) },
            accuracy: crate::scalar::ratio(hits, count),
        })
        .collect();
    let mut report = CalibrationReport { bins, ece: F::zero() };
    report.ece = report.ece_from_bins();
    Ok(report)
}

/// Stratum of `c` among `n_bins` equal-width bins of `[0, max_conf)`, or
/// `None` when it lies outside.
pub fn stratum<F: Scalar>(c: F, n_bins: usize, max_conf: F) -> Option<usize> {
    if n_bins == 0 || !(c >= F::zero() && c < max_conf) {
        return None;
    }
    Some(bin_index(c, n_bins, max_conf))
}

/// Draws `per_bin` ids from each of `n_bins` equal-width bins of
/// `[0, max_conf)`. Output is grouped by bin, lowest bin first.
pub fn stratified_sample<F: Scalar>(
    items: &[(String, F)],
    n_bins: usize,
    per_bin: usize,
    max_conf: F,
    seed: u64,
) -> Result<Vec<String>, ConfidenceError> {
    if n_bins == 0 {
        return Err(ConfidenceError::InvalidBins);
    }
    let mut strata: Vec<Vec<&str>> = vec![Vec::new(); n_bins];
    for (id, c) in items {
        if let Some(b) = stratum(*c, n_bins, max_conf) {
            strata[b].push(id);
        }
    }
    if let Some(b) = strata.iter().position(|s| s.len() < per_bin) {
        return Err(ConfidenceError::BinUnderflow(b));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_bins * per_bin);
    for mut s in strata {
        s.sort_unstable();
        out.extend(s.choose_multiple(&mut rng, per_bin).map(|id| id.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(ps: &[f64]) -> StepDistribution<f64> {
        StepDistribution::from_ranked(
            ps.iter().enumerate().map(|(i, p)| (format!("t{i}"), *p)).collect(),
        )
    }

    #[test]
    fn token_confidence_reads_top_entry() {
        assert_eq!(token_confidence(&step(&[1.0])), 1.0);
        let uniform = vec![0.02; 50];
        assert_eq!(token_confidence(&step(&uniform)), 0.02);
    }

    #[test]
    fn sequence_confidence_is_the_minimum() {
        let d = ScoredDecode {
            tokens: vec!["a".into(), "b".into(), "c".into()],
            steps: vec![step(&[0.9]), step(&[0.4]), step(&[0.7])],
            token_confidences: vec![0.9, 0.4, 0.7],
            terminated: true,
        };
        assert_eq!(sequence_confidence(&d).unwrap(), 0.4);
        let empty = ScoredDecode::<f64> {
            tokens: vec![],
            steps: vec![],
            token_confidences: vec![],
            terminated: true,
        };
        assert_eq!(sequence_confidence(&empty), Err(ConfidenceError::EmptyDecode));
        assert_eq!(decode_confidence(&empty), 0.0);
    }

    #[test]
    fn top_bin_is_closed() {
        let r = reliability(&[(1.0f64, true), (1.0, true)], 10).unwrap();
        assert_eq!(r.bins[9].count, 2);
        assert_eq!(r.ece, 0.0);
    }

    #[test]
    fn boundaries_go_to_the_upper_bin() {
        for i in 0..10 {
            let c = i as f64 / 10.0;
            assert_eq!(bin_index(c, 10, 1.0), i, "{c}");
        }
        assert_eq!(bin_index(0.6f64 * 3.0 / 10.0, 10, 0.6), 3);
    }

    #[test]
    fn hand_placed_pairs() {
        // bin [0.2, 0.3): four items, mean 0.25, one correct
        // bin [0.8, 0.9): six items, mean 0.85, six correct
        let mut pairs = vec![(0.2f64, true), (0.24, false), (0.26, false), (0.3 - 1e-9, false)];
        pairs.extend([(0.8, true), (0.84, true), (0.86, true), (0.9 - 1e-9, true), (0.85, true), (0.85, true)]);
        let r = reliability(&pairs, 10).unwrap();
        let m0: f64 = (0.2 + 0.24 + 0.26 + (0.3 - 1e-9)) / 4.0;
        let m1: f64 = (0.8 + 0.84 + 0.86 + (0.9 - 1e-9) + 0.85 + 0.85) / 6.0;
        let expected = 0.4 * (0.25 - m0).abs() + 0.6 * (1.0 - m1).abs();
        assert!((r.ece - expected).abs() < 1e-12);
        assert_eq!(r.bins[2].count, 4);
        assert_eq!(r.bins[8].count, 6);
    }

    #[test]
    fn stratified_sample_underflow_reports_bin() {
        let items: Vec<(String, f64)> = (0..10)
            .filter(|&b| b != 3)
            .map(|b| (format!("x{b}"), b as f64 * 0.06 + 0.01))
            .collect();
        assert_eq!(
            stratified_sample(&items, 10, 1, 0.6, 0),
            Err(ConfidenceError::BinUnderflow(3))
        );
    }

    #[test]
    fn stratified_sample_forced_selection() {
        let items: Vec<(String, f64)> =
            (0..10).map(|b| (format!("x{b}"), b as f64 * 0.06 + 0.03)).collect();
        for seed in 0..5 {
            let ids = stratified_sample(&items, 10, 1, 0.6, seed).unwrap();
            let expected: Vec<String> = (0..10).map(|b| format!("x{b}")).collect();
            assert_eq!(ids, expected);
        }
    }

    #[test]
    fn table_lists_every_bin() {
        let r = reliability(&[(0.5f32, true)], 4).unwrap();
        let t = r.render_table();
        assert_eq!(t.lines().count(), 6);
        assert!(t.contains("[0.75, 1.00]"));
    }
}
