mod common;

use gramsec::calibration::{default_top_k, Bounds, CalibrationModel, ClassLayerStats, LayerScore};
use gramsec::deviation::{argmin, delta, predict, total_deviation, Metrics, DELTA_EPS};
use gramsec::gram::{summarize_sample, GramSummary};
use gramsec::interchange::LayerShape;
use proptest::prelude::*;

fn ordered_pair() -> impl Strategy<Value = (f64, f64)> {
    (-5.0f64..5.0, 0.0f64..5.0).prop_map(|(lo, w)| (lo, lo + w))
}

/// Independent restatement of the per-channel rule.
fn delta_ref(lo: f64, hi: f64, g: f64) -> f64 {
    if g < lo {
        (lo - g) / f64::max(lo.abs(), DELTA_EPS)
    } else if g > hi {
        (g - hi) / f64::max(hi.abs(), DELTA_EPS)
    } else {
        0.0
    }
}

/// Total deviations computed straight from the model's stats.
fn totals_ref(summaries: &[GramSummary], model: &CalibrationModel) -> Vec<f64> {
    (0..model.num_classes)
        .map(|c| {
            model
                .selected
                .iter()
                .map(|&l| {
                    let st = model.stats(c, l);
                    let d: f64 = summaries[l]
                        .normalized
                        .iter()
                        .enumerate()
                        .map(|(k, &g)| delta_ref(st.bounds.lower[k], st.bounds.upper[k], g))
                        .sum();
                    d / st.expected_dev
                })
                .sum()
        })
        .collect()
}

fn one_channel_model(bounds: &[(f64, f64)], expected: &[f64], selected: Vec<usize>) -> CalibrationModel {
    let layers: Vec<LayerShape> = (0..bounds.len())
        .map(|l| LayerShape {
            layer_id: l as u32,
            channels: 1,
            height: 1,
            width: 1,
        })
        .collect();
    let stats = bounds
        .iter()
        .zip(expected)
        .enumerate()
        .map(|(l, (&(lo, hi), &e))| ClassLayerStats {
            class: 0,
            layer_id: l as u32,
            bounds: Bounds {
                lower: vec![lo],
                upper: vec![hi],
            },
            expected_dev: e,
        })
        .collect();
    let scores = (0..bounds.len())
        .map(|l| LayerScore {
            layer_id: l as u32,
            per_class: vec![0.0],
            aggregate: 0.0,
        })
        .collect();
    CalibrationModel {
        num_classes: 1,
        layers,
        top_k: selected.len(),
        selected,
        delta_eps: DELTA_EPS,
        expected_dev_floor: 1e-12,
        stats,
        scores,
    }
}

fn summary(layer: u32, g: f64) -> GramSummary {
    GramSummary {
        layer_id: layer,
        raw: vec![g],
        normalized: vec![g],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn delta_is_nonnegative_and_matches_rule((lo, hi) in ordered_pair(), g in -20.0f64..20.0) {
        let d = delta(lo, hi, g).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, delta_ref(lo, hi, g));
    }

    #[test]
    fn delta_zero_iff_in_range((lo, hi) in ordered_pair(), g in -20.0f64..20.0) {
        let d = delta(lo, hi, g).unwrap();
        prop_assert_eq!(d == 0.0, lo <= g && g <= hi);
    }

    #[test]
    fn delta_continuous_at_breakpoints((lo, hi) in ordered_pair(), h in 1e-12f64..1e-9) {
        prop_assert_eq!(delta(lo, hi, lo).unwrap(), 0.0);
        prop_assert_eq!(delta(lo, hi, hi).unwrap(), 0.0);
        // a step of h just outside moves delta by about h / max(|bound|, eps);
        // the factor 2 absorbs rounding of the displaced point
        let below = delta(lo, hi, lo - h).unwrap();
        let above = delta(lo, hi, hi + h).unwrap();
        prop_assert!(below <= 2.0 * h / lo.abs().max(DELTA_EPS));
        prop_assert!(above <= 2.0 * h / hi.abs().max(DELTA_EPS));
    }

    #[test]
    fn delta_monotone_outside((lo, hi) in ordered_pair(), a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (near, far) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(delta(lo, hi, lo - near).unwrap() <= delta(lo, hi, lo - far).unwrap());
        prop_assert!(delta(lo, hi, hi + near).unwrap() <= delta(lo, hi, hi + far).unwrap());
    }

    #[test]
    fn argmin_survives_shared_power_of_two_scaling(seed in any::<u64>(), shift in -20i32..20) {
        let (model, _) = common::random_model(seed, 3, 3, 2);
        let mut scaled = model.clone();
        let factor = 2f64.powi(shift);
        for s in &mut scaled.stats {
            s.expected_dev *= factor;
        }
        let mut rng = common::rng(seed ^ 0x5eed);
        for label in 0..3 {
            let sample = common::class_sample(&mut rng, format!("t{label}"), label, &model.layers);
            let a = predict(&sample, &model).unwrap();
            let b = predict(&sample, &scaled).unwrap();
            prop_assert_eq!(a.predicted_class, b.predicted_class);
        }
    }

    #[test]
    fn predict_matches_reference(seed in any::<u64>(), classes in 2usize..=4, layers in 1usize..=4) {
        let (model, _) = common::random_model(seed, classes, layers, default_top_k(layers));
        let mut rng = common::rng(seed.wrapping_add(1));
        let label = (seed % classes as u64) as usize;
        let sample = common::class_sample(&mut rng, "probe".into(), label, &model.layers);
        let got = predict(&sample, &model).unwrap();
        let expected = totals_ref(&summarize_sample(&sample).unwrap(), &model);
        prop_assert_eq!(got.totals.len(), classes);
        for (a, b) in got.totals.iter().zip(&expected) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
        prop_assert_eq!(got.predicted_class, argmin(&expected));
        prop_assert_eq!(got.per_layer.len(), classes);
        prop_assert!(got.per_layer.iter().all(|t| t.len() == model.selected.len()));
    }
}

#[test]
fn total_deviation_divides_each_layer_by_its_expectation() {
    // delta per layer 0.2 and 0.4, expectations 0.1 and 0.2
    let model = one_channel_model(&[(0.0, 0.5), (0.0, 0.5)], &[0.1, 0.2], vec![0, 1]);
    let summaries = [summary(0, 0.6), summary(1, 0.7)];
    let total = total_deviation(&summaries, 0, &model).unwrap();
    assert!((total - 4.0).abs() < 1e-12, "{total}");
}

#[test]
fn single_selected_layer_ignores_the_rest() {
    let model = one_channel_model(&[(0.0, 0.5), (0.0, 0.5)], &[0.1, 0.2], vec![1]);
    let summaries = [summary(0, 0.6), summary(1, 0.7)];
    let total = total_deviation(&summaries, 0, &model).unwrap();
    assert!((total - 2.0).abs() < 1e-12, "{total}");
}

#[test]
fn zero_upper_bound_uses_floor() {
    let d = delta(0.0, 0.0, 1e-3).unwrap();
    assert_eq!(d, 1e-3 / DELTA_EPS);
}

#[test]
fn inverted_bounds_rejected() {
    assert!(delta(1.0, 0.0, 0.5).is_err());
}

#[test]
fn argmin_ties_go_low() {
    assert_eq!(argmin(&[3.0, 1.0, 1.0, 2.0]), 1);
    assert_eq!(argmin(&[0.0, 0.0]), 0);
}

#[test]
fn metrics_example() {
    let truth = vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 1];
    let pred = vec![0; 10];
    let m = Metrics::from_labels(&truth, &pred, 2).unwrap();
    assert_eq!(m.accuracy, 0.9);
    assert_eq!(m.balanced_accuracy, 0.5);
    assert_eq!(m.confusion, vec![vec![9, 0], vec![1, 0]]);
}
