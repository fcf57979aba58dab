//! Invariants checked through the public API.

use gradalign::datagen::{dataset_to_string, generate, parse_dataset};
use gradalign::ecs::average_precision;
use gradalign::metrics::stability;
use gradalign::nn::{ce_logit_gradient, logit_grad_l1, read_checkpoint, softmax, write_checkpoint};
use gradalign::trainers::{compute_ratio, train, RatioStatus};
use gradalign::{BiasedDatasetSpec, LabelSource, ModelParams, StageTwoConfig, TrainMethod};
use proptest::prelude::*;

fn probs(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, 0..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn logit_gradient_l1_is_two_minus_two_p(
        z in prop::collection::vec(-30.0..30.0f64, 2..16),
        pick in any::<prop::sample::Index>(),
    ) {
        let y = pick.index(z.len());
        let l1: f64 = ce_logit_gradient(&z, y).iter().map(|g| g.abs()).sum();
        let p = softmax(&z)[y];
        prop_assert!((l1 - logit_grad_l1(p).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn computed_ratio_balances_the_groups(
        conf in probs(40),
        aligned in probs(200),
        gamma in 0.1..10.0f64,
    ) {
        let step = compute_ratio(&conf, &aligned, gamma, Some(0.7), 1e3).unwrap();
        let g_conf: f64 = conf.iter().map(|p| 2.0 - 2.0 * p).sum();
        let g_al: f64 = aligned.iter().map(|p| 2.0 - 2.0 * p).sum();
        match step.status {
            RatioStatus::Computed => {
                prop_assert!(step.value.is_finite() && step.value >= 0.0);
                let lhs = step.value * g_al;
                let rhs = g_conf / gamma;
                prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
            }
            RatioStatus::CarriedForward => {
                prop_assert!(conf.is_empty());
                prop_assert_eq!(step.value, 0.7);
            }
            RatioStatus::Clamped => prop_assert_eq!(step.value, 1e3),
            RatioStatus::Static => prop_assert!(false, "GA ratio never static"),
        }
    }

    #[test]
    fn ratio_falls_as_gamma_grows(
        conf in prop::collection::vec(0.0..0.99f64, 1..20),
        aligned in prop::collection::vec(0.0..0.99f64, 1..100),
        gamma in 0.1..5.0f64,
    ) {
        let a = compute_ratio(&conf, &aligned, gamma, None, f64::MAX).unwrap().value;
        let b = compute_ratio(&conf, &aligned, gamma * 2.0, None, f64::MAX).unwrap().value;
        prop_assert!(b < a);
    }

    #[test]
    fn average_precision_is_a_probability(
        pairs in prop::collection::vec((0.0..=1.0f64, any::<bool>()), 1..200),
    ) {
        let (scores, truth): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        prop_assume!(truth.iter().any(|&t| t));
        let ap = average_precision(&scores, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        // Scoring the ground truth itself ranks every positive first.
        let perfect: Vec<f64> = truth.iter().map(|&t| t as u8 as f64).collect();
        prop_assert_eq!(average_precision(&perfect, &truth).unwrap(), 1.0);
    }

    #[test]
    fn stability_gap_is_never_negative(acc in prop::collection::vec(0.0..=1.0f64, 1..50)) {
        let s = stability(&acc).unwrap();
        prop_assert!(s.delta >= 0.0);
        prop_assert_eq!(s.last_epoch_acc, *acc.last().unwrap());
        prop_assert_eq!(acc[s.best_epoch - 1], s.best_epoch_acc);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn datasets_round_trip_through_text(
        classes in 2usize..6,
        attrs in 1usize..3,
        rho in 0.5..0.99f64,
        seed in any::<u64>(),
    ) {
        let spec = BiasedDatasetSpec {
            num_classes: classes,
            train_size: 50,
            test_size: 20,
            rho: vec![rho; attrs],
            intrinsic_dim: 3,
            bias_dim: 2,
            seed,
            ..Default::default()
        };
        let (train_set, test_set) = generate(&spec).unwrap();
        for ds in [train_set, test_set] {
            let text = dataset_to_string(&ds).unwrap();
            prop_assert_eq!(parse_dataset(&text, "mem".as_ref()).unwrap(), ds);
        }
    }

    #[test]
    fn checkpoints_round_trip(
        sizes in prop::collection::vec(1usize..12, 2..5),
        seed in any::<u64>(),
    ) {
        let params = ModelParams::init(&sizes, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_checkpoint(&params, &path).unwrap();
        prop_assert_eq!(read_checkpoint(&path).unwrap(), params);
    }
}

fn one_epoch(method: TrainMethod, gamma: f64) -> gradalign::TrainOutcome {
    let spec = BiasedDatasetSpec {
        train_size: 4000,
        test_size: 500,
        ..Default::default()
    };
    let (train_set, test_set) = generate(&spec).unwrap();
    let cfg = StageTwoConfig {
        method,
        gamma,
        epochs: 1,
        label_source: LabelSource::GroundTruth,
        ..Default::default()
    };
    train(&train_set, &train_set.conflicting_flags(), &test_set, &cfg).unwrap()
}

#[test]
fn aligned_contributions_dominate_vanilla_training() {
    let out = one_epoch(TrainMethod::Vanilla, 1.0);
    let (al, conf, n_al, n_conf) = out.trace.records.iter().fold((0.0, 0.0, 0, 0), |acc, r| {
        (
            acc.0 + r.g_aligned,
            acc.1 + r.g_conflicting,
            acc.2 + r.aligned_count,
            acc.3 + r.conflicting_count,
        )
    });
    assert!(n_conf > 0);
    // Larger in total, while each aligned sample contributes less.
    assert!(al > conf, "aligned {al} vs conflicting {conf}");
    assert!(al / (n_al as f64) < conf / (n_conf as f64));
}

#[test]
fn aligned_weight_vanishes_as_gamma_grows() {
    for method in [TrainMethod::Rew, TrainMethod::Ga] {
        let mean_ratio = |gamma| {
            let out = one_epoch(method, gamma);
            out.trace.records.iter().map(|r| r.ratio).sum::<f64>() / out.trace.len() as f64
        };
        let (low, high) = (mean_ratio(1.0), mean_ratio(1e6));
        assert!(high < low, "{method:?}");
        assert!(high < 1e-3, "{method:?}: {high}");
    }
}
