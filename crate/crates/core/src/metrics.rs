//! Unbiased and per-group accuracy, fairness ratios, best/last stability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Sample};
use crate::nn::ModelParams;
use crate::{Error, Result};

/// Group label from per-attribute alignment, e.g. `"aligned"` or
/// `"conflicting/aligned"` for two attributes.
pub fn group_key(aligned: &[bool]) -> String {
    aligned
        .iter()
        .map(|&a| if a { "aligned" } else { "conflicting" })
        .collect::<Vec<_>>()
        .join("/")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall_unbiased_acc: f64,
    pub total: usize,
    pub groups: BTreeMap<String, GroupAccuracy>,
}

impl Evaluation {
    pub fn group_accuracies(&self) -> BTreeMap<String, f64> {
        self.groups.iter().map(|(k, g)| (k.clone(), g.accuracy)).collect()
    }

    /// Unweighted mean over the groups present.
    pub fn mean_group_accuracy(&self) -> f64 {
        self.groups.values().map(|g| g.accuracy).sum::<f64>() / self.groups.len() as f64
    }
}

pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::UndefinedMetric("cannot evaluate on an empty test set".into()));
    }
    let preds = params.predict(test.features().view())?;
    evaluate_predictions(&preds, &test.samples)
}

/// Accuracy overall and per ground-truth alignment group.
pub fn evaluate_predictions(preds: &[usize], samples: &[Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("cannot evaluate on an empty test set".into()));
    }
    if preds.len() != samples.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (p, s) in preds.iter().zip(samples) {
        let hit = *p == s.target;
        correct += hit as usize;
        let entry = groups.entry(group_key(&s.aligned)).or_default();
        entry.0 += 1;
        entry.1 += hit as usize;
    }
    Ok(Evaluation {
        overall_unbiased_acc: correct as f64 / samples.len() as f64,
        total: samples.len(),
        groups: groups
            .into_iter()
            .map(|(k, (count, correct))| {
                (
                    k,
                    GroupAccuracy {
                        count,
                        correct,
                        accuracy: correct as f64 / count as f64,
                    },
                )
            })
            .collect(),
    })
}

/// Fairness ratios across bias groups; 1 means identical rates in every group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fairness {
    /// `min_g P(ŷ=1 | g) / max_g P(ŷ=1 | g)`.
    pub dp: f64,
    /// Mean of the min/max ratios of `P(ŷ=1 | y=1, g)` and `P(ŷ=0 | y=0, g)`.
    pub eq_odd: f64,
}

/// Fairness of a binary classifier with respect to the first bias attribute.
pub fn fairness(params: &ModelParams, test: &Dataset) -> Result<Fairness> {
    if test.num_classes() != 2 || test.spec.num_bias_attributes() != 1 {
        return Err(Error::UndefinedMetric(
            "fairness ratios need a binary task with one bias attribute".into(),
        ));
    }
    let preds = params.predict(test.features().view())?;
    let groups: Vec<usize> = test.samples.iter().map(|s| s.bias_attrs[0]).collect();
    fairness_from_predictions(&preds, &test.targets(), &groups)
}

fn min_max_ratio(rates: &[f64]) -> f64 {
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Every group at rate zero is perfectly equal.
    if max == 0.0 {
        1.0
    } else {
        min / max
    }
}

pub fn fairness_from_predictions(preds: &[usize], targets: &[usize], groups: &[usize]) -> Result<Fairness> {
    if preds.len() != targets.len() || preds.len() != groups.len() {
        return Err(Error::shape("predictions, targets and groups differ in length"));
    }
    if preds.iter().chain(targets).any(|&v| v > 1) {
        return Err(Error::UndefinedMetric("fairness ratios are defined for binary labels".into()));
    }
    // Per group: [n, ŷ=1, n(y=1), ŷ=1 & y=1, n(y=0), ŷ=0 & y=0]
    let mut tally: BTreeMap<usize, [usize; 6]> = BTreeMap::new();
    for ((&p, &y), &g) in preds.iter().zip(targets).zip(groups) {
        let t = tally.entry(g).or_default();
        t[0] += 1;
        t[1] += (p == 1) as usize;
        if y == 1 {
            t[2] += 1;
            t[3] += (p == 1) as usize;
        } else {
            t[4] += 1;
            t[5] += (p == 0) as usize;
        }
    }
    if tally.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "need at least two bias groups, found {}",
            tally.len()
        )));
    }
    let mut positive = Vec::new();
    let mut tpr = Vec::new();
    let mut tnr = Vec::new();
    for (g, t) in &tally {
        if t[2] == 0 || t[4] == 0 {
            return Err(Error::UndefinedMetric(format!(
                "bias group {g} lacks samples of both classes"
            )));
        }
        positive.push(t[1] as f64 / t[0] as f64);
        tpr.push(t[3] as f64 / t[2] as f64);
        tnr.push(t[5] as f64 / t[4] as f64);
    }
    Ok(Fairness {
        dp: min_max_ratio(&positive),
        eq_odd: 0.5 * (min_max_ratio(&tpr) + min_max_ratio(&tnr)),
    })
}

/// Best-epoch versus last-epoch accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    /// One-based epoch of the best accuracy (first one on ties).
    pub best_epoch: usize,
    pub best_epoch_acc: f64,
    pub last_epoch_acc: f64,
    pub delta: f64,
}

pub fn stability(per_epoch_acc: &[f64]) -> Result<Stability> {
    let last = *per_epoch_acc
        .last()
        .ok_or_else(|| Error::UndefinedMetric("no epochs recorded".into()))?;
    let (best_idx, best) = per_epoch_acc
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, a)| if a > acc.1 { (i, a) } else { acc });
    Ok(Stability {
        best_epoch: best_idx + 1,
        best_epoch_acc: best,
        last_epoch_acc: last,
        delta: best - last,
    })
}

/// Final evaluation record written by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_unbiased_acc: f64,
    pub group_accuracies: BTreeMap<String, f64>,
    pub mean_group_accuracy: f64,
    pub dp: Option<f64>,
    pub eq_odd: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_epoch_acc: Option<f64>,
    pub last_epoch_acc: Option<f64>,
    pub delta: Option<f64>,
}

impl EvalReport {
    /// Evaluate the final model; fairness is filled in for binary single-bias tasks.
    pub fn build(params: &ModelParams, test: &Dataset, per_epoch_acc: &[f64]) -> Result<Self> {
        let eval = evaluate(params, test)?;
        let fair = if test.num_classes() == 2 && test.spec.num_bias_attributes() == 1 {
            Some(fairness(params, test)?)
        } else {
            None
        };
        let stab = if per_epoch_acc.is_empty() {
            None
        } else {
            Some(stability(per_epoch_acc)?)
        };
        Ok(Self {
            overall_unbiased_acc: eval.overall_unbiased_acc,
            group_accuracies: eval.group_accuracies(),
            mean_group_accuracy: eval.mean_group_accuracy(),
            dp: fair.map(|f| f.dp),
            eq_odd: fair.map(|f| f.eq_odd),
            best_epoch: stab.map(|s| s.best_epoch),
            best_epoch_acc: stab.map(|s| s.best_epoch_acc),
            last_epoch_acc: stab.map(|s| s.last_epoch_acc),
            delta: stab.map(|s| s.delta),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, BiasedDatasetSpec};
    use proptest::prelude::*;

    fn binary_test_set() -> Dataset {
        let spec = BiasedDatasetSpec {
            num_classes: 2,
            train_size: 20,
            test_size: 400,
            rho: vec![0.95],
            ..Default::default()
        };
        generate(&spec).unwrap().1
    }

    #[test]
    fn constant_predictor_on_balanced_binary_set() {
        let test = binary_test_set();
        let eval = evaluate_predictions(&vec![0; test.len()], &test.samples).unwrap();
        assert_eq!(eval.overall_unbiased_acc, 0.5);
    }

    #[test]
    fn oracle_is_perfect_in_every_group() {
        let spec = BiasedDatasetSpec {
            train_size: 20,
            test_size: 2_000,
            rho: vec![0.99, 0.95],
            ..Default::default()
        };
        let test = generate(&spec).unwrap().1;
        let eval = evaluate_predictions(&test.targets(), &test.samples).unwrap();
        assert_eq!(eval.overall_unbiased_acc, 1.0);
        let keys: Vec<&str> = eval.groups.keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            ["aligned/aligned", "aligned/conflicting", "conflicting/aligned", "conflicting/conflicting"]
        );
        assert!(eval.groups.values().all(|g| g.accuracy == 1.0));
    }

    #[test]
    fn empty_and_mismatched_inputs_fail() {
        assert!(matches!(evaluate_predictions(&[], &[]), Err(Error::UndefinedMetric(_))));
        let test = binary_test_set();
        assert!(matches!(evaluate_predictions(&[0], &test.samples), Err(Error::Shape(_))));
    }

    #[test]
    fn group_independent_predictor_is_fair() {
        // Predictions depend on the target only.
        let targets = [0, 1, 0, 1, 0, 1, 0, 1];
        let groups = [0, 0, 0, 0, 1, 1, 1, 1];
        let f = fairness_from_predictions(&targets, &targets, &groups).unwrap();
        assert_eq!((f.dp, f.eq_odd), (1.0, 1.0));
    }

    #[test]
    fn predicting_the_bias_is_maximally_unfair() {
        let test = binary_test_set();
        let preds: Vec<usize> = test.samples.iter().map(|s| s.bias_attrs[0]).collect();
        let groups = preds.clone();
        let f = fairness_from_predictions(&preds, &test.targets(), &groups).unwrap();
        assert_eq!(f.dp, 0.0);
        assert_eq!(f.eq_odd, 0.0);
    }

    #[test]
    fn eight_sample_table_matches_enumeration() {
        // group 0: (y,ŷ) = (1,1) (1,0) (0,0) (0,1)
        // group 1: (y,ŷ) = (1,1) (1,1) (0,0) (0,0)
        let targets = [1, 1, 0, 0, 1, 1, 0, 0];
        let preds = [1, 0, 0, 1, 1, 1, 0, 0];
        let groups = [0, 0, 0, 0, 1, 1, 1, 1];
        // P(ŷ=1|g): 2/4 and 2/4 → DP 1.
        // TPR: 1/2 and 2/2 → 0.5. TNR: 1/2 and 2/2 → 0.5. EqOdd = 0.5.
        let f = fairness_from_predictions(&preds, &targets, &groups).unwrap();
        assert_eq!(f.dp, 1.0);
        assert_eq!(f.eq_odd, 0.5);

        let preds = [1, 1, 1, 1, 0, 1, 0, 0];
        // P(ŷ=1|g): 4/4, 1/4 → 0.25. TPR: 2/2, 1/2 → 0.5. TNR: 0/2, 2/2 → 0.
        let f = fairness_from_predictions(&preds, &targets, &groups).unwrap();
        assert_eq!(f.dp, 0.25);
        assert_eq!(f.eq_odd, 0.25);
    }

    #[test]
    fn fairness_needs_two_populated_groups() {
        let err = fairness_from_predictions(&[0, 1], &[0, 1], &[0, 0]).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
        let err = fairness_from_predictions(&[0, 1, 1], &[0, 1, 1], &[0, 0, 1]).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
    }

    #[test]
    fn stability_picks_best_and_last() {
        let s = stability(&[0.5, 0.8, 0.8, 0.7]).unwrap();
        assert_eq!(s.best_epoch, 2);
        assert_eq!(s.best_epoch_acc, 0.8);
        assert_eq!(s.last_epoch_acc, 0.7);
        assert!((s.delta - 0.1).abs() < 1e-15);
        assert!(stability(&[]).is_err());
    }

    proptest! {
        #[test]
        fn ratios_ignore_group_relabeling(
            rows in prop::collection::vec((0usize..2, 0usize..2, 0usize..2), 8..60)
        ) {
            let preds: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let targets: Vec<usize> = rows.iter().map(|r| r.1).collect();
            let groups: Vec<usize> = rows.iter().map(|r| r.2).collect();
            let swapped: Vec<usize> = groups.iter().map(|g| 1 - g).collect();
            let a = fairness_from_predictions(&preds, &targets, &groups);
            let b = fairness_from_predictions(&preds, &targets, &swapped);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(a, b);
                    prop_assert!((0.0..=1.0).contains(&a.dp) && (0.0..=1.0).contains(&a.eq_odd));
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "relabeling changed definedness"),
            }
        }

        #[test]
        fn overall_is_size_weighted_group_mean(
            hits in prop::collection::vec(any::<bool>(), 400)
        ) {
            let test = binary_test_set();
            let preds: Vec<usize> = test.samples.iter().zip(&hits)
                .map(|(s, &h)| if h { s.target } else { 1 - s.target }).collect();
            let eval = evaluate_predictions(&preds, &test.samples).unwrap();
            let weighted: f64 = eval.groups.values()
                .map(|g| g.accuracy * g.count as f64).sum::<f64>() / eval.total as f64;
            prop_assert!((weighted - eval.overall_unbiased_acc).abs() <= 1e-12);
        }

        #[test]
        fn best_never_below_last(accs in prop::collection::vec(0.0f64..=1.0, 1..30)) {
            let s = stability(&accs).unwrap();
            prop_assert!(s.best_epoch_acc >= s.last_epoch_acc - 1e-12);
            prop_assert!(s.delta >= 0.0);
        }
    }
}
