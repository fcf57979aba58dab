use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Average precision of `truth` ranked by descending score.
///
/// Ties keep original index order.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            truth.len()
        )));
    }
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// `scores[i] >= tau` marks sample `i` as bias-conflicting.
pub fn assign_pseudo_labels(scores: &[f64], tau: f64) -> Vec<bool> {
    let flags: Vec<bool> = scores.iter().map(|&s| s >= tau).collect();
    if !flags.iter().any(|&f| f) {
        log::warn!("no sample reaches score threshold {tau}; the mined conflicting set is empty");
    }
    flags
}

/// Agreement of mined flags with ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    pub threshold: f64,
    pub mined: usize,
    pub actual: usize,
    pub true_positives: usize,
    /// `None` when nothing was mined.
    pub precision: Option<f64>,
    /// `None` when the ground truth has no conflicting sample.
    pub recall: Option<f64>,
}

pub fn label_quality(flags: &[bool], truth: &[bool], threshold: f64) -> Result<LabelQuality> {
    if flags.len() != truth.len() {
        return Err(Error::shape(format!("{} flags vs {} labels", flags.len(), truth.len())));
    }
    let mined = flags.iter().filter(|&&f| f).count();
    let actual = truth.iter().filter(|&&t| t).count();
    let tp = flags.iter().zip(truth).filter(|(&f, &t)| f && t).count();
    Ok(LabelQuality {
        threshold,
        mined,
        actual,
        true_positives: tp,
        precision: (mined > 0).then(|| tp as f64 / mined as f64),
        recall: (actual > 0).then(|| tp as f64 / actual as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: precision at every cut-off k, averaged over the
    /// cut-offs where a positive enters the ranked list.
    fn brute_force_ap(scores: &[f64], truth: &[bool]) -> f64 {
        let n = scores.len();
        // Rank of i = number of items strictly ahead of it.
        let rank = |i: usize| {
            (0..n)
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count()
        };
        let ranks: Vec<usize> = (0..n).map(rank).collect();
        let mut total = 0.0;
        let mut positives = 0;
        for i in 0..n {
            if !truth[i] {
                continue;
            }
            positives += 1;
            let k = ranks[i] + 1;
            let hits_in_top_k = (0..n).filter(|&j| truth[j] && ranks[j] < k).count();
            total += hits_in_top_k as f64 / k as f64;
        }
        total / positives as f64
    }

    #[test]
    fn hand_computed_case() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((ap - brute_force_ap(&[0.9, 0.8, 0.1], &[true, false, true])).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_reversed_rankings() {
        let scores: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 / 10.0).collect();
        let mut truth = vec![false; 10];
        truth[..3].fill(true);
        assert_eq!(average_precision(&scores, &truth).unwrap(), 1.0);

        // Positives at the bottom three ranks of ten.
        let reversed: Vec<bool> = truth.iter().rev().copied().collect();
        let expected = brute_force_ap(&scores, &reversed);
        assert!((expected - (1.0 / 8.0 + 2.0 / 9.0 + 3.0 / 10.0) / 3.0).abs() < 1e-15);
        assert!((average_precision(&scores, &reversed).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn ties_follow_index_order() {
        let ap = average_precision(&[0.5, 0.5], &[false, true]).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn no_positive_is_undefined() {
        assert!(matches!(
            average_precision(&[0.3, 0.4], &[false, false]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn threshold_assignment() {
        assert_eq!(assign_pseudo_labels(&[0.9, 0.1], 0.8), vec![true, false]);
        assert_eq!(assign_pseudo_labels(&[0.8], 0.8), vec![true]);
        assert_eq!(assign_pseudo_labels(&[0.1, 0.2], 0.8), vec![false, false]);
    }

    #[test]
    fn quality_counts() {
        let q = label_quality(&[true, true, false, false], &[true, false, true, false], 0.8).unwrap();
        assert_eq!(q.precision, Some(0.5));
        assert_eq!(q.recall, Some(0.5));
        let empty = label_quality(&[false, false], &[true, false], 0.8).unwrap();
        assert_eq!(empty.precision, None);
        assert_eq!(empty.recall, Some(0.0));
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            items in prop::collection::vec((0u8..6, any::<bool>()), 1..40)
        ) {
            let scores: Vec<f64> = items.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let truth: Vec<bool> = items.iter().map(|(_, t)| *t).collect();
            prop_assume!(truth.iter().any(|&t| t));
            let ap = average_precision(&scores, &truth).unwrap();
            prop_assert!((ap - brute_force_ap(&scores, &truth)).abs() < 1e-12);
            prop_assert!(ap > 0.0 && ap <= 1.0);
        }
    }
}
