mod common;

use common::{desk, MAX_LEN};
use dym_core::confidence::{
    reliability, sequence_confidence, stratified_sample, stratum, token_confidence, ConfidenceError,
};
use dym_core::model::{ModelInput, ScoredDecode, StepDistribution};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn token_confidence_is_max_of_dumped_distribution() {
    let d = desk();
    for e in d.test.iter().take(20) {
        let inp = ModelInput::parse(e);
        let dec = d.parse.decode_greedy(&inp, MAX_LEN);
        for (t, step) in dec.steps.iter().enumerate() {
            let full = d.parse.distribution(&inp, &dec.tokens[..t]).unwrap();
            let max = full.iter().map(|(_, p)| *p).fold(0.0, f64::max);
            assert_eq!(token_confidence(step), max);
        }
    }
}

#[test]
fn study_sample_has_ten_per_bin_below_point_six() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items: Vec<(String, f64)> = (0..2000).map(|i| (format!("d{i}"), rng.gen::<f64>())).collect();
    let ids = stratified_sample(&items, 10, 10, 0.6, 9).unwrap();
    assert_eq!(ids.len(), 100);
    let conf = |id: &str| items.iter().find(|(i, _)| i == id).unwrap().1;
    for (k, chunk) in ids.chunks(10).enumerate() {
        for id in chunk {
            let c = conf(id);
            let lo = k as f64 * 0.06;
            assert!(c >= lo - 1e-12 && c < lo + 0.06 + 1e-12 && c < 0.6, "{c} in bin {k}");
            assert_eq!(stratum(c, 10, 0.6), Some(k));
        }
    }
    let mut uniq = ids.clone();
    uniq.sort();
    uniq.dedup();
    assert_eq!(uniq.len(), 100);
    assert_eq!(stratified_sample(&items, 10, 10, 0.6, 9).unwrap(), ids);
}

#[test]
fn sample_from_model_confidences_or_underflow() {
    let d = desk();
    let items: Vec<(String, f64)> = d
        .test
        .iter()
        .map(|e| {
            let dec = d.parse.decode_greedy(&ModelInput::parse(e), MAX_LEN);
            (e.id.clone(), dym_core::confidence::decode_confidence(&dec))
        })
        .collect();
    match stratified_sample(&items, 10, 10, 0.6, 1) {
        Ok(ids) => assert_eq!(ids.len(), 100),
        Err(ConfidenceError::BinUnderflow(b)) => {
            let n = items.iter().filter(|(_, c)| stratum(*c, 10, 0.6) == Some(b)).count();
            assert!(n < 10);
        }
        Err(e) => panic!("{e}"),
    }
}

fn decode(confs: &[f64]) -> ScoredDecode<f64> {
    let steps = confs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut entries = vec![(format!("t{i}"), p)];
            if p < 1.0 {
                entries.push(("rest".into(), 1.0 - p));
            }
            entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            StepDistribution::from_ranked(entries)
        })
        .collect();
    ScoredDecode::new(confs.iter().enumerate().map(|(i, _)| format!("t{i}")).collect(), steps, true).unwrap()
}

proptest! {
    #[test]
    fn sequence_confidence_is_min_and_order_free(mut confs in prop::collection::vec(0.5f64..=1.0, 1..12)) {
        let s = sequence_confidence(&decode(&confs)).unwrap();
        for &c in &confs {
            prop_assert!(s <= c);
        }
        confs.reverse();
        prop_assert_eq!(sequence_confidence(&decode(&confs)).unwrap(), s);
    }

    #[test]
    fn reliability_counts_and_ece_are_consistent(
        pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200),
        n_bins in 1usize..20,
    ) {
        let r = reliability(&pairs, n_bins).unwrap();
        prop_assert_eq!(r.total(), pairs.len());
        prop_assert!((r.ece - r.ece_from_bins()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.ece));
        for w in r.bins.windows(2) {
            prop_assert_eq!(w[0].upper, w[1].lower);
        }
        // independent binning, away from boundaries where rounding decides
        let n = n_bins as f64;
        prop_assume!(pairs.iter().all(|(c, _)| *c == 1.0 || (c * n).fract() > 1e-9));
        let mut sums = vec![(0usize, 0.0f64, 0usize); n_bins];
        for &(c, ok) in &pairs {
            let s = &mut sums[((c * n).floor() as usize).min(n_bins - 1)];
            s.0 += 1;
            s.1 += c;
            s.2 += usize::from(ok);
        }
        let mut ece = 0.0;
        for (i, (k, conf, hits)) in sums.into_iter().enumerate() {
            prop_assert_eq!(k, r.bins[i].count);
            if k > 0 {
                let kf = k as f64;
                ece += kf / pairs.len() as f64 * (hits as f64 / kf - conf / kf).abs();
            }
        }
        prop_assert!((ece - r.ece).abs() < 1e-12);
    }

    #[test]
    fn perfectly_calibrated_bins_have_zero_ece(k in 1usize..10) {
        let mut pairs = vec![(1.0f64, true); k];
        pairs.extend(vec![(0.0f64, false); k]);
        prop_assert_eq!(reliability(&pairs, 10).unwrap().ece, 0.0);
    }
}

#[test]
fn reliability_in_single_precision() {
    let r = reliability(&[(0.25f32, true), (0.75, false)], 2).unwrap();
    assert!((r.ece - 0.75).abs() < 1e-6);
    assert_eq!(reliability::<f32>(&[], 2), Err(ConfidenceError::EmptyInput));
    assert_eq!(reliability(&[(0.5f32, true)], 0), Err(ConfidenceError::InvalidBins));
    assert!(matches!(reliability(&[(1.5f32, true)], 2), Err(ConfidenceError::OutOfRange(_))));
}
