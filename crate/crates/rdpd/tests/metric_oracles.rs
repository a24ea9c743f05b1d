//! Brute-force oracles for both AUCs: pairwise counting for ROC and an
//! exhaustive threshold sweep for average precision. The fast
//! implementations must agree with them to 1e-10 on every small input.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use rdpd::metrics::{multiclass_aggregate, pr_auc_binary, roc_auc_binary};

/// O(n^2) Mann–Whitney: ordered pairs count 1, ties count one half.
fn roc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut ordered = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                ordered += 1.0;
            } else if scores[i] == scores[j] {
                ordered += 0.5;
            }
        }
    }
    ordered / pairs
}

/// Average precision by explicit confusion counts at every distinct
/// threshold, walked from the highest score down.
fn pr_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &theta in &thresholds {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= theta {
                if l {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let precision = tp / (tp + fp);
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

fn random_instance(rng: &mut ChaCha20Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=12);
    loop {
        let labels: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.5).collect();
        let pos = labels.iter().filter(|&&l| l).count();
        if pos == 0 || pos == n {
            continue;
        }
        // quantized scores so ties actually happen
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(0.0_f64..1.0) * 8.0).round() / 8.0)
            .collect();
        return (scores, labels);
    }
}

#[test]
fn aucs_match_brute_force_on_200_random_small_instances() {
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    for case in 0..200 {
        let (scores, labels) = random_instance(&mut rng);
        let roc = roc_auc_binary(&scores, &labels).unwrap();
        let roc_ref = roc_oracle(&scores, &labels);
        assert!(
            (roc - roc_ref).abs() < 1e-10,
            "case {case}: roc {roc} vs oracle {roc_ref} on {scores:?} {labels:?}"
        );
        let pr = pr_auc_binary(&scores, &labels).unwrap();
        let pr_ref = pr_oracle(&scores, &labels);
        assert!(
            (pr - pr_ref).abs() < 1e-10,
            "case {case}: pr {pr} vs oracle {pr_ref} on {scores:?} {labels:?}"
        );
    }
}

#[test]
fn hand_cases_reproduce_exactly() {
    let labels = [false, false, true, true];
    assert_eq!(
        roc_auc_binary(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap(),
        0.75
    );
    assert_eq!(
        roc_auc_binary(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(),
        1.0
    );
    assert_eq!(roc_auc_binary(&[0.5; 4], &labels).unwrap(), 0.5);
    assert_eq!(pr_auc_binary(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    assert_eq!(pr_auc_binary(&[0.9, 0.1], &[false, true]).unwrap(), 0.5);
}

#[test]
fn aggregate_matches_oracles_on_multiclass_instances() {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    for _ in 0..50 {
        let n = rng.random_range(4..=12);
        let c = rng.random_range(2..=4);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let probs: Vec<f64> = (0..n * c)
            .map(|_| (rng.random_range(0.0_f64..1.0) * 4.0).round() / 4.0)
            .collect();
        let names: Vec<String> = (0..c).map(|k| format!("k{k}")).collect();
        let Ok(agg) = multiclass_aggregate(&probs, c, &labels, &names, 0) else {
            continue; // all classes single-outcome
        };
        let mut roc_sum = 0.0;
        let mut included = 0;
        for class in 0..c {
            let scores: Vec<f64> = (0..n).map(|i| probs[i * c + class]).collect();
            let binary: Vec<bool> = labels.iter().map(|&l| l == class).collect();
            let pos = binary.iter().filter(|&&b| b).count();
            if pos == 0 || pos == n {
                assert!(agg.per_class[class].roc_auc.is_none());
                continue;
            }
            let r = roc_oracle(&scores, &binary);
            assert!((agg.per_class[class].roc_auc.unwrap() - r).abs() < 1e-10);
            roc_sum += r;
            included += 1;
        }
        assert!((agg.roc_auc - roc_sum / included as f64).abs() < 1e-10);
    }
}

proptest! {
    /// ROC-AUC only depends on the score ordering.
    #[test]
    fn roc_invariant_under_strictly_increasing_transforms(
        raw in proptest::collection::vec((0u8..6, any::<bool>()), 3..40),
        scale in 0.1f64..4.0,
        shift in -5.0f64..5.0,
    ) {
        let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
        let pos = labels.iter().filter(|&&l| l).count();
        prop_assume!(pos > 0 && pos < labels.len());
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 / 3.0).collect();
        let base = roc_auc_binary(&scores, &labels).unwrap();
        // exp is strictly increasing; affine with positive scale too
        let transformed: Vec<f64> = scores.iter().map(|&s| (scale * s + shift).exp()).collect();
        let t = roc_auc_binary(&transformed, &labels).unwrap();
        prop_assert!((base - t).abs() < 1e-12);
    }

    /// Complement identity: flipping all labels mirrors the AUC around 1/2.
    #[test]
    fn roc_complement_sums_to_one(
        raw in proptest::collection::vec((0u8..8, any::<bool>()), 3..40),
    ) {
        let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
        let pos = labels.iter().filter(|&&l| l).count();
        prop_assume!(pos > 0 && pos < labels.len());
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 / 7.0).collect();
        let flipped: Vec<bool> = labels.iter().map(|&l| !l).collect();
        let a = roc_auc_binary(&scores, &labels).unwrap();
        let b = roc_auc_binary(&scores, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    /// Macro-F1 stays in [0,1] and hits 1 only on exact prediction matrices.
    #[test]
    fn macro_f1_bounds(
        rows in proptest::collection::vec((0usize..3, 0u8..2, 0u8..2, 0u8..2), 2..30),
    ) {
        let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let probs: Vec<f64> = rows
            .iter()
            .flat_map(|r| [r.1, r.2, r.3].map(|b| if b == 1 { 0.9 } else { 0.1 }))
            .collect();
        let f1 = rdpd::metrics::macro_f1(&probs, 3, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
        let exact = rows.iter().all(|r| {
            let predicted = [r.1 == 1, r.2 == 1, r.3 == 1];
            (0..3).all(|c| predicted[c] == (r.0 == c))
        });
        if exact {
            prop_assert!((f1 - 1.0).abs() < 1e-12);
        }
    }
}
