//! Ranking metrics for multi-label tagging plus logit ensembling.
//!
//! Average precision follows the step-interpolated area under the
//! precision-recall curve: walk the examples in descending-score order and
//! sum precision at every rank where recall steps up. Ties keep their
//! original order so results never depend on sort internals.

use crate::error::{Error, Result};
use crate::linalg::{Mat, Scalar};

/// Scores and binary targets for a batch of examples, one row per example.
pub struct PredictionSet {
    logits: Mat<f64>,
    targets: Mat<f64>,
}

impl PredictionSet {
    pub fn new(logits: Mat<f64>, targets: Mat<f64>) -> Result<Self> {
        if logits.rows() != targets.rows() || logits.cols() != targets.cols() {
            return Err(Error::shape(format!(
                "{}x{} logits vs {}x{} targets",
                logits.rows(),
                logits.cols(),
                targets.rows(),
                targets.cols()
            )));
        }
        if logits.rows() == 0 {
            return Err(Error::shape("empty prediction set"));
        }
        if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::config("targets must be 0 or 1"));
        }
        Ok(PredictionSet { logits, targets })
    }

    pub fn n_examples(&self) -> usize {
        self.logits.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.logits.cols()
    }
}

/// Ranks in descending score; among equal scores, earlier examples first.
fn ranked_indices(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    idx
}

/// Area under the precision-recall curve for one class; `None` when the
/// class has no positives (the caller skips it).
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), targets.len(), "score/target length mismatch");
    let n_pos = targets.iter().filter(|&&t| t).count();
    if n_pos == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranked_indices(scores).iter().enumerate() {
        if targets[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

/// Unweighted mean of per-class average precision, skipping classes with no
/// positive examples.
pub fn mean_ap(preds: &PredictionSet) -> Result<f64> {
    let (m, c) = (preds.n_examples(), preds.n_classes());
    let mut total = 0.0;
    let mut counted = 0usize;
    for class in 0..c {
        let scores: Vec<f64> = (0..m).map(|r| preds.logits.get(r, class)).collect();
        let targets: Vec<bool> = (0..m).map(|r| preds.targets.get(r, class) == 1.0).collect();
        if let Some(ap) = average_precision(&scores, &targets) {
            total += ap;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::config("no class has a positive example"));
    }
    Ok(total / counted as f64)
}

/// Elementwise mean of raw logit matrices (average first, sigmoid later —
/// if ever — so the vote happens in logit space).
pub fn ensemble_logits<T: Scalar>(models: &[Mat<T>]) -> Result<Mat<T>> {
    let first = models
        .first()
        .ok_or_else(|| Error::config("nothing to ensemble"))?;
    for (i, m) in models.iter().enumerate() {
        if m.rows() != first.rows() || m.cols() != first.cols() {
            return Err(Error::shape(format!(
                "model {} is {}x{}, expected {}x{}",
                i,
                m.rows(),
                m.cols(),
                first.rows(),
                first.cols()
            )));
        }
    }
    let scale = T::from_f64(1.0 / models.len() as f64);
    let mut out = Mat::zeros(first.rows(), first.cols());
    for m in models {
        for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
            *o = *o + *v;
        }
    }
    out.scale(scale);
    Ok(out)
}

/// Fraction of rows whose argmax matches the single true class. Ties go to
/// the lowest index.
pub fn accuracy(logits: &Mat<f64>, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::shape(format!(
            "{} logit rows vs {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::shape("empty prediction set"));
    }
    let mut correct = 0usize;
    for (r, &want) in targets.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == want {
            correct += 1;
        }
    }
    Ok(correct as f64 / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    /// Independent oracle: integrate the precision curve rank by rank,
    /// adding precision * (recall step) at every prefix.
    fn ap_by_prefix_integration(scores: &[f64], targets: &[bool]) -> Option<f64> {
        let n_pos = targets.iter().filter(|&&t| t).count();
        if n_pos == 0 {
            return None;
        }
        let order = ranked_indices(scores);
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        let mut tp = 0usize;
        for (k, &i) in order.iter().enumerate() {
            if targets[i] {
                tp += 1;
            }
            let recall = tp as f64 / n_pos as f64;
            let precision = tp as f64 / (k + 1) as f64;
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        Some(area)
    }

    #[test]
    fn hand_checked_average_precision() {
        // Perfect ranking of two positives among four.
        let ap = average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]);
        assert_eq!(ap, Some(1.0));
        // Positives at ranks 2 and 4: (1/2 + 2/4) / 2.
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[false, true, false, true]);
        assert!((ap.unwrap() - 0.5).abs() < 1e-12);
        // All positive: every prefix has precision 1.
        let ap = average_precision(&[0.1, 0.9, 0.5], &[true, true, true]);
        assert_eq!(ap, Some(1.0));
        // No positives: undefined.
        assert_eq!(average_precision(&[1.0, 2.0], &[false, false]), None);
    }

    #[test]
    fn ties_keep_original_order() {
        // Identical scores: the earlier example ranks first.
        let ap = average_precision(&[0.5, 0.5], &[true, false]).unwrap();
        assert_eq!(ap, 1.0);
        let ap = average_precision(&[0.5, 0.5], &[false, true]).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn mean_ap_averages_defined_classes_only() {
        // Class 0 AP = 1.0, class 1 AP = 0.5, class 2 has no positives.
        let logits = Mat::from_vec(
            4,
            3,
            vec![
                0.9, 0.9, 0.9, //
                0.8, 0.8, 0.8, //
                0.7, 0.7, 0.7, //
                0.6, 0.6, 0.6,
            ],
        )
        .unwrap();
        let targets = Mat::from_vec(
            4,
            3,
            vec![
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0,
            ],
        )
        .unwrap();
        let preds = PredictionSet::new(logits, targets).unwrap();
        // class 0: pos at rank 1 -> 1.0; class 1: ranks 2,4 -> 0.5.
        assert!((mean_ap(&preds).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn mean_ap_errors_without_any_positive() {
        let preds = PredictionSet::new(
            Mat::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            Mat::zeros(2, 2),
        )
        .unwrap();
        assert!(mean_ap(&preds).is_err());
    }

    #[test]
    fn prediction_set_rejects_bad_inputs() {
        let l = Mat::<f64>::zeros(2, 3);
        assert!(PredictionSet::new(l, Mat::zeros(3, 3)).is_err());
        let l = Mat::<f64>::zeros(2, 3);
        let mut t = Mat::zeros(2, 3);
        t.set(0, 0, 0.5);
        assert!(PredictionSet::new(l, t).is_err());
    }

    #[test]
    fn random_balanced_scores_sit_near_half() {
        let mut r = rng::seeded(11);
        let m = 10_000;
        let mut logits = Mat::zeros(m, 2);
        let mut targets = Mat::zeros(m, 2);
        for i in 0..m {
            logits.set(i, 0, r.random::<f64>());
            logits.set(i, 1, r.random::<f64>());
            let c = usize::from(r.random::<bool>());
            targets.set(i, c, 1.0);
        }
        let map = mean_ap(&PredictionSet::new(logits, targets).unwrap()).unwrap();
        assert!((map - 0.5).abs() < 0.03, "mAP {map}");
    }

    #[test]
    fn matches_prefix_integration_oracle() {
        let mut r = rng::seeded(23);
        for _ in 0..1000 {
            let m = r.random_range(1..=32);
            let scores: Vec<f64> = (0..m)
                .map(|_| (r.random::<f64>() * 8.0).round() / 8.0)
                .collect();
            let targets: Vec<bool> = (0..m).map(|_| r.random::<bool>()).collect();
            let a = average_precision(&scores, &targets);
            let b = ap_by_prefix_integration(&scores, &targets);
            match (a, b) {
                (None, None) => {}
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9, "{x} vs {y}"),
                other => panic!("disagree on definedness: {other:?}"),
            }
        }
    }

    #[test]
    fn ensemble_is_the_elementwise_mean() {
        let z = Mat::from_vec(2, 2, vec![1.0f32, -2.0, 3.0, -4.0]).unwrap();
        let neg = z.map(|v| -v);
        // A model and its negation cancel.
        let avg = ensemble_logits(&[z.clone(), neg]).unwrap();
        assert!(avg.data().iter().all(|&v| v == 0.0));
        // Identical models pass through unchanged.
        let same = ensemble_logits(&[z.clone(), z.clone(), z.clone()]).unwrap();
        assert_eq!(same.data(), z.data());
        // Single model is the identity.
        let one = ensemble_logits(std::slice::from_ref(&z)).unwrap();
        assert_eq!(one.data(), z.data());
        // Shape mismatch and empty list are rejected.
        assert!(ensemble_logits(&[z.clone(), Mat::zeros(1, 2)]).is_err());
        assert!(ensemble_logits::<f32>(&[]).is_err());
    }

    #[test]
    fn accuracy_hand_cases() {
        let logits = Mat::from_vec(
            3,
            3,
            vec![
                5.0, 1.0, 1.0, //
                0.0, 2.0, 1.0, //
                0.0, 1.0, 9.0,
            ],
        )
        .unwrap();
        assert_eq!(accuracy(&logits, &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&logits, &[1, 0, 0]).unwrap(), 0.0);
        // Tie in a row goes to the lowest index.
        let tied = Mat::from_vec(1, 3, vec![7.0, 7.0, 1.0]).unwrap();
        assert_eq!(accuracy(&tied, &[0]).unwrap(), 1.0);
        assert_eq!(accuracy(&tied, &[1]).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn monotone_transforms_leave_ap_alone(
            scores in proptest::collection::vec(-10.0f64..10.0, 2..20),
            flags in proptest::collection::vec(any::<bool>(), 2..20),
        ) {
            let n = scores.len().min(flags.len());
            let scores = &scores[..n];
            let flags = &flags[..n];
            let before = average_precision(scores, flags);
            // exp is strictly increasing; ranking identical.
            let warped: Vec<f64> = scores.iter().map(|&s| (s * 0.5).exp()).collect();
            let after = average_precision(&warped, flags);
            match (before, after) {
                (None, None) => {}
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                other => prop_assert!(false, "definedness changed: {:?}", other),
            }
        }

        #[test]
        fn ensemble_order_never_matters(seed in 0u64..500) {
            let mut r = rng::seeded(seed);
            let mats: Vec<Mat<f64>> = (0..3)
                .map(|_| Mat::from_fn(2, 3, |_, _| r.random::<f64>()))
                .collect();
            let fwd = ensemble_logits(&mats).unwrap();
            let rev: Vec<Mat<f64>> = mats.iter().rev().cloned().collect();
            let bwd = ensemble_logits(&rev).unwrap();
            for (a, b) in fwd.data().iter().zip(bwd.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
