use hyperlora_core::eval::{bootstrap_auc_ci, dca_curve, net_benefit, roc_auc, threshold_grid};
use hyperlora_core::rng;
use hyperlora_core::Error;
use proptest::prelude::*;
use rand::Rng;

/// O(n²) pair count, ties worth one half; returns (numerator·2, pairs·2).
fn pair_count(scores: &[f64], labels: &[u8]) -> (u64, u64) {
    let mut num2 = 0u64;
    let mut pairs = 0u64;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                if scores[i] > scores[j] {
                    num2 += 2;
                } else if scores[i] == scores[j] {
                    num2 += 1;
                }
            }
        }
    }
    (num2, 2 * pairs)
}

fn pair_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (num, den) = pair_count(scores, labels);
    (den > 0).then(|| num as f64 / den as f64)
}

/// Scores on a coarse grid so ties are common.
fn random_instance(r: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
    loop {
        let s: Vec<f64> = (0..n).map(|_| r.random_range(0..8) as f64 / 4.0).collect();
        let l: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        if l.contains(&0) && l.contains(&1) {
            return (s, l);
        }
    }
}

#[test]
fn auc_matches_pair_counting_on_random_instances() {
    let mut r = rng::stream(11, 0);
    for _ in 0..200 {
        let n = r.random_range(2..=50);
        let (s, l) = random_instance(&mut r, n);
        assert_eq!(roc_auc(&s, &l).unwrap(), pair_auc(&s, &l).unwrap());
    }
}

#[test]
fn auc_trivial_examples() {
    assert_eq!(roc_auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
}

proptest! {
    #[test]
    fn auc_is_invariant_under_increasing_transforms(
        raw in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..60)
    ) {
        let s: Vec<f64> = raw.iter().map(|p| p.0).collect();
        let l: Vec<u8> = raw.iter().map(|p| p.1).collect();
        prop_assume!(l.contains(&0) && l.contains(&1));
        let a = roc_auc(&s, &l).unwrap();
        let t: Vec<f64> = s.iter().map(|x| libm::exp(*x) * 3.0 + 1.0).collect();
        prop_assert_eq!(roc_auc(&t, &l).unwrap(), a);
    }

    #[test]
    fn auc_of_negated_tie_free_scores_is_complement(
        raw in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..60)
    ) {
        let s: Vec<f64> = raw.iter().map(|p| p.0).collect();
        let l: Vec<u8> = raw.iter().map(|p| p.1).collect();
        prop_assume!(l.contains(&0) && l.contains(&1));
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let total = roc_auc(&s, &l).unwrap() + roc_auc(&neg, &l).unwrap();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}

/// Step-by-step replay: same per-iteration streams, pair-count AUC, sorted
/// retained values, linear-interpolation percentiles.
fn bootstrap_oracle(scores: &[f64], labels: &[u8], iters: usize, seed: u64) -> (f64, f64, usize) {
    let n = scores.len();
    let mut kept = Vec::new();
    let mut skipped = 0;
    for it in 0..iters {
        let mut r = rng::stream(seed, it as u64);
        let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        match pair_auc(&s, &l) {
            Some(a) => kept.push(a),
            None => skipped += 1,
        }
    }
    kept.sort_by(f64::total_cmp);
    let pct = |q: f64| {
        let pos = q * (kept.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(kept.len() - 1);
        kept[lo] + (kept[hi] - kept[lo]) * (pos - lo as f64)
    };
    (pct(0.025), pct(0.975), skipped)
}

#[test]
fn bootstrap_replays_scalar_oracle_exactly() {
    let s = [0.1, 0.35, 0.4, 0.8, 0.65, 0.2];
    let l = [0, 0, 1, 1, 0, 1];
    let ci = bootstrap_auc_ci(&s, &l, 200, 42).unwrap();
    let (lo, hi, skipped) = bootstrap_oracle(&s, &l, 200, 42);
    assert_eq!(ci.lo, lo);
    assert_eq!(ci.hi, hi);
    assert_eq!(ci.skipped, skipped);
    assert_eq!(ci.retained + ci.skipped, 200);
    assert!(skipped > 0, "n = 6 should produce some single-class resamples");
}

#[test]
fn bootstrap_of_separated_sample_is_degenerate_at_one() {
    let s: Vec<f64> = (0..500).map(|i| i as f64).collect();
    let l: Vec<u8> = (0..500).map(|i| (i >= 250) as u8).collect();
    let ci = bootstrap_auc_ci(&s, &l, 200, 1).unwrap();
    assert_eq!((ci.lo, ci.hi), (1.0, 1.0));
}

#[test]
fn bootstrap_rejects_mostly_single_class_resamples() {
    // with n = 2 half of all resamples are single-class
    let mut rejected = 0;
    for seed in 0..40 {
        match bootstrap_auc_ci(&[0.2, 0.7], &[0, 1], 3, seed) {
            Err(Error::BootstrapDegenerate { skipped, iters }) => {
                assert!(2 * skipped > iters);
                rejected += 1;
            }
            Ok(ci) => assert!(2 * ci.skipped <= 3),
            Err(e) => panic!("{e}"),
        }
    }
    assert!(rejected > 0);
}

#[test]
fn net_benefit_examples() {
    let l: Vec<u8> = (0..10).map(|i| (i < 2) as u8).collect();
    let none = vec![0.0; 10];
    let perfect: Vec<f64> = l.iter().map(|&y| y as f64).collect();
    let all = vec![1.0; 10];
    for t in [0.05, 0.25, 0.5, 0.8] {
        assert_eq!(net_benefit(&none, &l, t).unwrap(), 0.0);
        assert!((net_benefit(&perfect, &l, t).unwrap() - 0.2).abs() < 1e-15);
    }
    let nb = net_benefit(&all, &l, 0.25).unwrap();
    assert!((nb - (0.2 - 0.8 / 3.0)).abs() < 1e-12);
    assert!((nb + 0.0667).abs() < 1e-4);
    assert!(net_benefit(&all, &l, 0.0).is_err());
    assert!(net_benefit(&all, &l, 1.0).is_err());
}

#[test]
fn dca_grid_and_closed_forms() {
    assert_eq!(threshold_grid(0.05, 0.80, 2).unwrap(), vec![0.05, 0.80]);
    assert!(threshold_grid(0.8, 0.05, 5).is_err());

    let mut r = rng::stream(5, 0);
    let n = 300;
    let l: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
    let s: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let pi = l.iter().filter(|&&y| y == 1).count() as f64 / n as f64;
    let c = dca_curve(&s, &l, 0.05, 0.80, 76).unwrap();
    assert_eq!(c.thresholds.first(), Some(&0.05));
    assert_eq!(c.thresholds.last(), Some(&0.80));
    for (i, &t) in c.thresholds.iter().enumerate() {
        assert_eq!(c.nb_treat_none[i], 0.0);
        assert!((c.nb_treat_all[i] - (pi - (1.0 - pi) * t / (1.0 - t))).abs() <= 1e-12);
        // scalar confusion-matrix oracle
        let (mut tp, mut fp) = (0.0, 0.0);
        for (&si, &yi) in s.iter().zip(&l) {
            if si >= t {
                if yi == 1 {
                    tp += 1.0
                } else {
                    fp += 1.0
                }
            }
        }
        let want = tp / n as f64 - fp / n as f64 * t / (1.0 - t);
        assert!((c.nb_model[i] - want).abs() <= 1e-12);
    }
}

#[test]
fn perfect_classifier_dominates_both_baselines() {
    let l: Vec<u8> = (0..50).map(|i| (i % 5 == 0) as u8).collect();
    let s: Vec<f64> = l.iter().map(|&y| y as f64).collect();
    let c = dca_curve(&s, &l, 0.05, 0.80, 16).unwrap();
    for i in 0..c.thresholds.len() {
        assert!((c.nb_model[i] - 0.2).abs() < 1e-15);
        assert!(c.nb_model[i] >= c.nb_treat_all[i]);
        assert!(c.nb_model[i] >= c.nb_treat_none[i]);
    }
}

#[test]
fn bootstrap_ci_contains_estimate_and_narrows_with_n() {
    let draw = |r: &mut rng::StreamRng, n: usize| -> (Vec<f64>, Vec<u8>) {
        let l: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let s = l.iter().map(|&y| rng::normal(r) + y as f64).collect();
        (s, l)
    };
    let mut r = rng::stream(8, 1);
    let mut inside = 0;
    for i in 0..100 {
        let (s, l) = draw(&mut r, 100 + i);
        let a = roc_auc(&s, &l).unwrap();
        let ci = bootstrap_auc_ci(&s, &l, 1000, i as u64).unwrap();
        inside += (ci.lo <= a && a <= ci.hi) as usize;
    }
    assert!(inside >= 99, "{inside}/100");

    let mut narrower = 0;
    for seed in 0..10 {
        let mut r = rng::stream(100 + seed, 2);
        let (s1, l1) = draw(&mut r, 200);
        let (s2, l2) = draw(&mut r, 2000);
        let w1 = bootstrap_auc_ci(&s1, &l1, 200, seed).unwrap();
        let w2 = bootstrap_auc_ci(&s2, &l2, 200, seed).unwrap();
        narrower += (w2.hi - w2.lo < w1.hi - w1.lo) as usize;
    }
    assert!(narrower >= 6, "{narrower}/10");
}
