use approx::assert_relative_eq;
use hagroute_core::loss::{
    huber, normalize_targets, weighted_huber_loss, ResidualSpace, SizeLossConfig,
};
use hagroute_core::metrics::{
    avg_sens_spec, balanced_accuracy, bin_size, confusion, consolidate_folds, evaluate, f1_macro,
    f1_weighted, ConfusionMatrix, F1Average, Prediction, Scheme, SizeClass,
};
use hagroute_core::tensor::{finite_diff_check_inputs, Array, Graph};
use proptest::prelude::*;

/// Straight-line weighted Huber in normalised space.
fn oracle(preds: &[f64], targets_mm: &[f64], cfg: &SizeLossConfig) -> f64 {
    let mut total = 0.0;
    for (&p, &y) in preds.iter().zip(targets_mm) {
        let t = 2.0 * (y.clamp(cfg.min_mm, cfg.max_mm) - cfg.min_mm) / (cfg.max_mm - cfg.min_mm) - 1.0;
        let a = if y > cfg.t2_mm {
            cfg.alpha2
        } else if y > cfg.t1_mm {
            cfg.alpha1
        } else {
            1.0
        };
        let r = (p - t).abs();
        let h = if r <= cfg.huber_delta {
            0.5 * r * r
        } else {
            cfg.huber_delta * (r - 0.5 * cfg.huber_delta)
        };
        total += a * h;
    }
    total / preds.len() as f64
}

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..20).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(0.0f64..25.0, n),
        )
    })
}

fn loss_value(preds: &[f64], targets: &[f64], cfg: &SizeLossConfig) -> f64 {
    let g = Graph::new();
    let p = g.constant(Array::vector(preds));
    weighted_huber_loss(&g, &p, targets, cfg).unwrap().item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn weighted_huber_matches_reference((preds, targets) in pairs(), delta in 0.05f64..2.0) {
        let cfg = SizeLossConfig { huber_delta: delta, ..SizeLossConfig::default() };
        let got = loss_value(&preds, &targets, &cfg);
        let want = oracle(&preds, &targets, &cfg);
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn band_weight_is_monotone(a in 0.0f64..30.0, b in 0.0f64..30.0) {
        let cfg = SizeLossConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(cfg.size_weight(lo) <= cfg.size_weight(hi));
        prop_assert!(cfg.size_weight(lo) >= 1.0);
    }

    #[test]
    fn huber_is_quadratic_then_linear(r in -10.0f64..10.0, delta in 0.01f64..3.0) {
        let h = huber(r, 0.0, delta);
        prop_assert!(h <= 0.5 * r * r + 1e-12);
        prop_assert!(h <= delta * r.abs() + 1e-12);
        if r.abs() <= delta {
            prop_assert!((h - 0.5 * r * r).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences((preds, targets) in pairs()) {
        let cfg = SizeLossConfig::default();
        let t = normalize_targets(&targets, &cfg).values;
        // stay clear of the Huber kink
        let preds: Vec<f64> = preds
            .iter()
            .zip(&t)
            .map(|(&p, &ti)| if ((p - ti).abs() - cfg.huber_delta).abs() < 1e-3 { p + 0.01 } else { p })
            .collect();
        let err = finite_diff_check_inputs(
            |g, v| weighted_huber_loss(g, &v[0], &targets, &cfg),
            &[Array::vector(&preds)],
            1e-7,
        )
        .unwrap();
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn normalisation_round_trips_in_range(y in 0.5f64..20.0) {
        let cfg = SizeLossConfig::default();
        assert_relative_eq!(cfg.denormalize(cfg.normalize(y)), y, max_relative = 1e-12);
        prop_assert!((-1.0..=1.0).contains(&cfg.normalize(y)));
    }
}

#[test]
fn millimetre_residuals_scale_the_loss() {
    let norm = SizeLossConfig::default();
    let mm = SizeLossConfig {
        residual_space: ResidualSpace::Millimeter,
        huber_delta: 100.0,
        ..norm
    };
    let norm_q = SizeLossConfig { huber_delta: 100.0, ..norm };
    let preds = [0.1, -0.4, 0.7];
    let targets = [3.0, 7.0, 14.0];
    let half = 0.5 * (norm.max_mm - norm.min_mm);
    // purely quadratic: the mm loss is the normalised loss times half_range²
    assert_relative_eq!(
        loss_value(&preds, &targets, &mm),
        loss_value(&preds, &targets, &norm_q) * half * half,
        max_relative = 1e-12
    );
}

#[test]
fn out_of_range_targets_are_clamped_and_counted() {
    let cfg = SizeLossConfig::default();
    let n = normalize_targets(&[0.1, 3.0, 25.0, 20.0, 0.5], &cfg);
    assert_eq!(n.clamped, 2);
    assert_eq!(n.values[0], -1.0);
    assert_eq!(n.values[2], 1.0);
    assert!(n.values.iter().all(|v| (-1.0..=1.0).contains(v)));
}

fn labels(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..60).prop_flat_map(move |n| {
        (
            prop::collection::vec(0..k, n),
            prop::collection::vec(0..k, n),
        )
    })
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn metrics_lie_in_unit_interval((t, p) in labels(3)) {
        let cm = ConfusionMatrix::from_labels(&t, &p, 3).unwrap();
        prop_assert!(in_unit(balanced_accuracy(&cm).unwrap()));
        prop_assert!(in_unit(f1_macro(&cm).unwrap()));
        prop_assert!(in_unit(f1_weighted(&cm).unwrap()));
        prop_assert!(in_unit(avg_sens_spec(&cm).unwrap()));
        prop_assert!(in_unit(cm.accuracy().unwrap()));
    }

    #[test]
    fn balanced_accuracy_ignores_class_frequency((t, p) in labels(3), class in 0usize..3, copies in 1usize..5) {
        let cm = ConfusionMatrix::from_labels(&t, &p, 3).unwrap();
        let (mut t2, mut p2) = (t.clone(), p.clone());
        for _ in 0..copies {
            for (a, b) in t.iter().zip(&p).filter(|(a, _)| **a == class) {
                t2.push(*a);
                p2.push(*b);
            }
        }
        let cm2 = ConfusionMatrix::from_labels(&t2, &p2, 3).unwrap();
        assert_relative_eq!(balanced_accuracy(&cm).unwrap(), balanced_accuracy(&cm2).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn binary_sensitivity_is_the_other_specificity((t, p) in labels(2)) {
        let cm = ConfusionMatrix::from_labels(&t, &p, 2).unwrap();
        prop_assert_eq!(cm.recall(1), cm.specificity(0));
        prop_assert_eq!(cm.recall(0), cm.specificity(1));
        let swap = |v: &[usize]| v.iter().map(|&x| 1 - x).collect::<Vec<_>>();
        let flipped = ConfusionMatrix::from_labels(&swap(&t), &swap(&p), 2).unwrap();
        prop_assert_eq!(flipped.recall(0), cm.recall(1));
        prop_assert_eq!(flipped.specificity(0), cm.specificity(1));
    }

    #[test]
    fn metrics_are_order_invariant((t, p) in labels(3), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..t.len()).collect();
        idx.shuffle(&mut hagroute_core::init::rng(seed));
        let t2: Vec<usize> = idx.iter().map(|&i| t[i]).collect();
        let p2: Vec<usize> = idx.iter().map(|&i| p[i]).collect();
        prop_assert_eq!(
            ConfusionMatrix::from_labels(&t, &p, 3).unwrap(),
            ConfusionMatrix::from_labels(&t2, &p2, 3).unwrap()
        );
    }

    #[test]
    fn pooled_confusion_is_sum_of_folds(
        sizes in prop::collection::vec((0.0f64..25.0, 0.0f64..25.0), 5..80),
        k in 2usize..5,
    ) {
        let preds: Vec<Prediction> = sizes
            .iter()
            .enumerate()
            .map(|(i, &(p, y))| Prediction {
                sample_id: format!("s{i}"),
                unique_id: format!("u{}", i / 2),
                pred_mm: p,
                target_mm: y,
            })
            .collect();
        let mut folds = vec![Vec::new(); k];
        for (i, p) in preds.into_iter().enumerate() {
            folds[i % k].push(p);
        }
        let c = consolidate_folds(&folds, F1Average::Macro).unwrap();
        for scheme in Scheme::ALL {
            let mut sum = ConfusionMatrix::new(scheme.classes().len());
            for r in &c.per_fold {
                sum.merge(&r.scheme(scheme).confusion).unwrap();
            }
            prop_assert_eq!(&sum, &c.pooled.scheme(scheme).confusion);
            let s = &c.summary[&format!("{}.balanced_accuracy", scheme.as_str())];
            prop_assert!(s.variance >= 0.0);
        }
    }
}

#[test]
fn bin_edges() {
    use SizeClass::*;
    let tri = |y| bin_size(y, Scheme::Triclass).unwrap();
    assert_eq!([tri(0.0), tri(5.0), tri(5.0001), tri(9.999), tri(10.0)], [Diminutive, Diminutive, Small, Small, Large]);
    assert_eq!(bin_size(9.999, Scheme::Binary).unwrap().index(), 0);
    assert_eq!(bin_size(10.0, Scheme::Binary).unwrap().index(), 1);
    assert!(bin_size(-0.1, Scheme::Binary).is_err());
    assert!(bin_size(f64::NAN, Scheme::Triclass).is_err());
}

#[test]
fn hand_worked_triclass_report() {
    // truth D D S S L L, predictions D S S S L D
    let preds = [3.0, 6.0, 7.0, 8.0, 12.0, 1.0];
    let targets = [2.0, 4.0, 6.0, 9.0, 11.0, 15.0];
    let cm = confusion(&preds, &targets, Scheme::Triclass).unwrap();
    assert_eq!(cm.counts, vec![vec![1, 1, 0], vec![0, 2, 0], vec![1, 0, 1]]);
    assert_relative_eq!(balanced_accuracy(&cm).unwrap(), (0.5 + 1.0 + 0.5) / 3.0, max_relative = 1e-15);
    // f1: D 0.5, S 0.8, L 2/3
    assert_relative_eq!(f1_macro(&cm).unwrap(), (0.5 + 0.8 + 2.0 / 3.0) / 3.0, max_relative = 1e-12);
    // specificity: D 3/4, S 3/4, L 1
    let ss = ((0.5 + 0.75) / 2.0 + (1.0 + 0.75) / 2.0 + (0.5 + 1.0) / 2.0) / 3.0;
    assert_relative_eq!(avg_sens_spec(&cm).unwrap(), ss, max_relative = 1e-12);
}

#[test]
fn negative_predictions_are_clamped_before_binning() {
    let p = |pred_mm, target_mm| Prediction {
        sample_id: format!("{pred_mm}"),
        unique_id: "u".into(),
        pred_mm,
        target_mm,
    };
    let r = evaluate(&[p(-3.0, 2.0), p(12.0, 13.0)], F1Average::Macro).unwrap();
    assert_eq!(r.binary.balanced_accuracy, 1.0);
    assert_eq!(r.unique_ids, 1);
}

#[test]
fn overlapping_folds_are_rejected() {
    let p = Prediction {
        sample_id: "a".into(),
        unique_id: "u".into(),
        pred_mm: 1.0,
        target_mm: 1.0,
    };
    assert!(consolidate_folds(&[vec![p.clone()], vec![p]], F1Average::Macro).is_err());
}
