//! Evaluation metrics: mean class accuracy, seen/unseen harmonic mean, and
//! ROC analysis for the seen/unseen detection stage.
//!
//! ROC curves treat higher scores as more positive and decide "positive" at
//! score >= threshold. Tied scores are collapsed into one curve vertex, which
//! makes the trapezoidal area equal to the Mann-Whitney pairwise concordance
//! (ties counted half). Both the sweep and the area are accumulated in
//! integer counts and divided once at the end, so the equality is exact in
//! floating point, not just up to rounding.

use serde::{Deserialize, Serialize};

use crate::data::ClassId;

/// Composite scores for one generalized zero-shot evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GzslScores {
    /// Mean class accuracy over seen-class test samples under the full
    /// (routed) system.
    pub seen_acc: f64,
    /// Mean class accuracy over unseen-class test samples under the full
    /// system.
    pub unseen_acc: f64,
    /// Harmonic mean of the two accuracies above.
    pub harmonic_mean: f64,
    /// Mean class accuracy on unseen-class samples when the search space is
    /// restricted to unseen classes only.
    pub zsl_acc: f64,
}

impl GzslScores {
    pub fn new(seen_acc: f64, unseen_acc: f64, zsl_acc: f64) -> GzslScores {
        GzslScores { seen_acc, unseen_acc, harmonic_mean: harmonic_mean(seen_acc, unseen_acc), zsl_acc }
    }
}

/// Harmonic mean 2su/(s+u), zero when either input is zero.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Unweighted average of per-class accuracies over the classes that actually
/// appear in `labels`. Returns 0 for empty input.
pub fn mean_class_accuracy(predictions: &[ClassId], labels: &[ClassId]) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "prediction/label length mismatch");
    if labels.is_empty() {
        return 0.0;
    }
    let mut per_class: std::collections::BTreeMap<ClassId, (usize, usize)> = Default::default();
    for (&pred, &label) in predictions.iter().zip(labels) {
        let entry = per_class.entry(label).or_insert((0, 0));
        entry.1 += 1;
        if pred == label {
            entry.0 += 1;
        }
    }
    let sum: f64 = per_class.values().map(|&(hit, total)| hit as f64 / total as f64).sum();
    sum / per_class.len() as f64
}

/// One vertex of an ROC curve. `threshold` is the lowest score still
/// classified positive at this vertex; the first vertex (0,0) uses infinity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve with tie-grouped vertices from (0,0) to (1,1) and its exact
/// trapezoidal area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Builds the ROC curve for `scores` where `is_positive` marks the positive
/// class. Requires at least one positive and one negative sample.
pub fn roc_curve(scores: &[f64], is_positive: &[bool]) -> RocCurve {
    assert_eq!(scores.len(), is_positive.len(), "score/label length mismatch");
    let pos_total = is_positive.iter().filter(|&&p| p).count() as u64;
    let neg_total = is_positive.len() as u64 - pos_total;
    assert!(pos_total > 0 && neg_total > 0, "ROC needs both classes present");

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("scores must not be NaN"));

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    // Trapezoid area numerator in units of 1/(2 * pos_total * neg_total).
    let mut area_x2: u128 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (prev_tp, prev_fp) = (tp, fp);
        // Consume the whole tie group at this threshold.
        while i < order.len() && scores[order[i]] == threshold {
            if is_positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area_x2 += u128::from(fp - prev_fp) * u128::from(prev_tp + tp);
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg_total as f64,
            tpr: tp as f64 / pos_total as f64,
        });
    }
    let auc = area_x2 as f64 / (2.0 * pos_total as f64 * neg_total as f64);
    RocCurve { points, auc }
}

/// Area under the ROC curve; equals the probability that a random positive
/// outscores a random negative, ties counted half.
pub fn auc(scores: &[f64], is_positive: &[bool]) -> f64 {
    roc_curve(scores, is_positive).auc
}

/// Smallest false-positive rate at which the curve reaches `target_tpr`,
/// interpolating linearly between bracketing vertices.
pub fn fpr_at_tpr(curve: &RocCurve, target_tpr: f64) -> f64 {
    assert!((0.0..=1.0).contains(&target_tpr), "target TPR out of range");
    if target_tpr == 0.0 {
        return 0.0;
    }
    for pair in curve.points.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if hi.tpr >= target_tpr {
            if hi.tpr == lo.tpr {
                // Horizontal segment cannot cross the target; keep walking.
                continue;
            }
            let frac = (target_tpr - lo.tpr) / (hi.tpr - lo.tpr);
            return lo.fpr + frac * (hi.fpr - lo.fpr);
        }
    }
    1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pairwise concordance oracle: counts positive-negative pairs won (2) or
    /// tied (1) in the same integer units as the curve accumulator.
    fn brute_force_auc(scores: &[f64], is_positive: &[bool]) -> f64 {
        let mut num: u128 = 0;
        let mut p = 0u64;
        for (i, &pi) in is_positive.iter().enumerate() {
            if !pi {
                continue;
            }
            p += 1;
            for (j, &pj) in is_positive.iter().enumerate() {
                if pj {
                    continue;
                }
                if scores[i] > scores[j] {
                    num += 2;
                } else if scores[i] == scores[j] {
                    num += 1;
                }
            }
        }
        let n = is_positive.iter().filter(|&&x| !x).count() as u64;
        num as f64 / (2.0 * p as f64 * n as f64)
    }

    #[test]
    fn perfect_separation_gives_auc_one() {
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = [true, true, true, false, false];
        assert_eq!(auc(&scores, &labels), 1.0);
        assert_eq!(auc(&scores, &[false, false, false, true, true]), 0.0);
    }

    #[test]
    fn all_tied_scores_give_auc_half() {
        let scores = [0.5; 6];
        let labels = [true, false, true, false, true, false];
        assert_eq!(auc(&scores, &labels), 0.5);
    }

    #[test]
    fn hand_worked_curve_with_ties() {
        // Descending: 0.9+, 0.8-, 0.7 tie group {+,-}, 0.3-.
        let scores = [0.9, 0.8, 0.7, 0.7, 0.3];
        let labels = [true, false, true, false, false];
        let curve = roc_curve(&scores, &labels);
        let verts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(
            verts,
            vec![(0.0, 0.0), (0.0, 0.5), (1.0 / 3.0, 0.5), (2.0 / 3.0, 1.0), (1.0, 1.0)]
        );
        // Pairs: pos 0.9 beats all 3 negs; pos 0.7 beats 0.3, ties 0.7,
        // loses 0.8 -> (3 + 1.5) / 6.
        assert_eq!(curve.auc, brute_force_auc(&scores, &labels));
        assert!((curve.auc - 4.5 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn trapezoid_equals_concordance_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for round in 0..50 {
            let n = rng.random_range(2..200);
            let mut labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            labels.shuffle(&mut rng);
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            // Coarse grid to force plenty of ties.
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
            let fast = auc(&scores, &labels);
            let slow = brute_force_auc(&scores, &labels);
            assert_eq!(fast, slow, "round {round}: {fast} != {slow}");
        }
    }

    #[test]
    fn fpr_at_tpr_interpolates() {
        // Two positives at 0.9/0.4, two negatives at 0.6/0.1. Curve verts:
        // (0,0) -> (0,0.5) -> (0.5,0.5) -> (0.5,1) -> (1,1).
        let scores = [0.9, 0.4, 0.6, 0.1];
        let labels = [true, true, false, false];
        let curve = roc_curve(&scores, &labels);
        assert_eq!(fpr_at_tpr(&curve, 0.5), 0.0);
        assert_eq!(fpr_at_tpr(&curve, 1.0), 0.5);
        // Halfway up the vertical segment from (0.5,0.5) to (0.5,1).
        assert_eq!(fpr_at_tpr(&curve, 0.75), 0.5);
        assert_eq!(fpr_at_tpr(&curve, 0.0), 0.0);
    }

    #[test]
    fn mean_class_accuracy_is_unweighted() {
        // Class 0: 1 of 4 correct. Class 1: 1 of 1 correct. Overall accuracy
        // would be 2/5; the class mean is (0.25 + 1) / 2.
        let labels = vec![ClassId(0), ClassId(0), ClassId(0), ClassId(0), ClassId(1)];
        let preds = vec![ClassId(0), ClassId(1), ClassId(1), ClassId(1), ClassId(1)];
        let acc = mean_class_accuracy(&preds, &labels);
        assert!((acc - 0.625).abs() < 1e-15);
    }

    #[test]
    fn harmonic_mean_basics() {
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.4, 0.0), 0.0);
        assert!((harmonic_mean(0.5, 0.5) - 0.5).abs() < 1e-15);
        assert!((harmonic_mean(27.15, 27.15) - 27.15).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn auc_is_bounded_and_flip_symmetric(
            raw in prop::collection::vec((0u8..40, any::<bool>()), 2..120)
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 / 7.0).collect();
            let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auc(&scores, &labels);
            prop_assert!((0.0..=1.0).contains(&a));
            let flipped: Vec<bool> = labels.iter().map(|&l| !l).collect();
            let b = auc(&scores, &flipped);
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auc_is_invariant_under_monotone_transforms(
            raw in prop::collection::vec((-50i32..50, any::<bool>()), 2..100)
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 / 10.0).collect();
            let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auc(&scores, &labels);
            let transformed: Vec<f64> = scores.iter().map(|&s| 3.0 * s + 1.0).collect();
            prop_assert_eq!(a, auc(&transformed, &labels));
            let exp: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
            prop_assert!((a - auc(&exp, &labels)).abs() < 1e-12);
        }

        #[test]
        fn roc_curve_is_monotone_from_origin_to_one(
            raw in prop::collection::vec((0u8..25, any::<bool>()), 2..150)
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64).collect();
            let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let curve = roc_curve(&scores, &labels);
            let first = curve.points.first().unwrap();
            let last = curve.points.last().unwrap();
            prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            for pair in curve.points.windows(2) {
                prop_assert!(pair[1].fpr >= pair[0].fpr);
                prop_assert!(pair[1].tpr >= pair[0].tpr);
                prop_assert!(pair[1].threshold < pair[0].threshold);
            }
        }

        #[test]
        fn harmonic_mean_lies_between_inputs(s in 0.0f64..100.0, u in 0.0f64..100.0) {
            let hm = harmonic_mean(s, u);
            prop_assert!(hm >= 0.0);
            if s > 0.0 && u > 0.0 {
                prop_assert!(hm <= s.max(u) + 1e-12);
                prop_assert!(hm >= s.min(u) - 1e-12);
                // The harmonic mean never exceeds the arithmetic mean.
                prop_assert!(hm <= (s + u) / 2.0 + 1e-12);
            }
            prop_assert!((harmonic_mean(u, s) - hm).abs() < 1e-12);
        }

        #[test]
        fn mean_class_accuracy_is_bounded_and_exact_on_perfection(
            labels in prop::collection::vec(0u32..6, 1..80)
        ) {
            let labels: Vec<ClassId> = labels.into_iter().map(ClassId).collect();
            let acc = mean_class_accuracy(&labels, &labels);
            prop_assert_eq!(acc, 1.0);
            let wrong: Vec<ClassId> = labels.iter().map(|c| ClassId(c.0 + 100)).collect();
            prop_assert_eq!(mean_class_accuracy(&wrong, &labels), 0.0);
        }
    }
}
