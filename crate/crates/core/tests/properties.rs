use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbcit_core::augment::{apply_augmentation, sample_augmentation};
use sbcit_core::config::{AugmentRanges, SplitPlan};
use sbcit_core::data::{generate_synthetic, split_dataset, SyntheticSpec};
use sbcit_core::metrics::{argmax_rows, basic_metrics, confusion_matrix, evaluate};
use sbcit_tensor::Tensor;

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
fn mann_whitney(positive: &[bool], score: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1.0;
                wins += match score[i].partial_cmp(&score[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    wins / pairs
}

fn labelled_scores(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    (4usize..40).prop_flat_map(move |n| {
        (
            prop::collection::vec(0..k, n),
            // coarse grid so ties occur
            prop::collection::vec((0u8..12).prop_map(|v| v as f64 / 11.0), n * k),
        )
    })
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("c{c}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roc_auc_matches_the_rank_statistic((truth, scores) in labelled_scores(3)) {
        let report = evaluate(&truth, &scores, &names(3)).unwrap();
        for c in 0..3 {
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            let column: Vec<f64> = (0..truth.len()).map(|i| scores[i * 3 + c]).collect();
            match report.per_class_roc_auc[c] {
                Some(auc) => prop_assert!((auc - mann_whitney(&positive, &column)).abs() < 1e-12),
                None => prop_assert!(positive.iter().all(|&p| p) || positive.iter().all(|&p| !p)),
            }
        }
    }

    #[test]
    fn confusion_tallies_are_consistent((truth, scores) in labelled_scores(4)) {
        let predicted = argmax_rows(&scores, 4);
        let cm = confusion_matrix(&truth, &predicted, 4).unwrap();
        let m = basic_metrics(&cm).unwrap();
        let n = truth.len() as u64;
        let correct = truth.iter().zip(&predicted).filter(|(a, b)| a == b).count();
        prop_assert!((m.overall_accuracy - correct as f64 / n as f64).abs() < 1e-12);
        for c in &m.per_class {
            prop_assert_eq!(c.tp + c.tn + c.fp + c.fn_, n);
            for v in [c.accuracy, c.sensitivity, c.precision, c.specificity] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn argmax_ignores_a_common_shift((_, scores) in labelled_scores(4), shift in -50.0f64..50.0) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        prop_assert_eq!(argmax_rows(&scores, 4), argmax_rows(&shifted, 4));
    }

    #[test]
    fn sampled_augmentations_respect_the_ranges(seed in any::<u64>()) {
        let r = AugmentRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let p = sample_augmentation(&mut rng, &r);
            prop_assert!(p.rotation_deg.abs() <= r.rotation_deg);
            prop_assert!((0.0..=r.shear_max_deg).contains(&p.shear_deg));
            prop_assert!((r.scale_min..=r.scale_max).contains(&p.scale));
            prop_assert!(p.translate_px.0.abs() <= r.translate_px && p.translate_px.1.abs() <= r.translate_px);
        }
    }

    #[test]
    fn augmentation_is_deterministic_and_shape_preserving(seed in any::<u64>()) {
        let image = Tensor::from_fn(vec![1, 16, 12], |i| ((i * 37) % 11) as f32 / 10.0);
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_augmentation(&mut rng, &AugmentRanges::default());
            apply_augmentation(&image, &p).unwrap()
        };
        let a = draw();
        prop_assert_eq!(a.shape(), image.shape());
        prop_assert_eq!(a, draw());
    }

    #[test]
    fn splits_partition_each_class(per_class in 3usize..30, seed in any::<u64>()) {
        let ds = generate_synthetic(SyntheticSpec { classes: 3, per_class, size: 32, seed: 1 }).unwrap();
        let plan = SplitPlan { seed, ..SplitPlan::default() };
        let s = split_dataset(&ds, &plan).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        prop_assert_eq!(&s, &split_dataset(&ds, &plan).unwrap());
        for class in 0..3 {
            let count = |part: &[usize]| part.iter().filter(|&&i| ds.samples[i].label == class).count();
            prop_assert_eq!(count(&s.test), s.test.len() / 3);
            prop_assert!(count(&s.train) >= 1);
        }
    }
}
