//! Out-of-range deviation scoring and minimum-deviation classification.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::calibration::{Bounds, CalibrationModel};
use crate::gram::{summarize_sample, GramError, GramSummary};
use crate::interchange::{DatasetManifest, FormatError, LayerShape, ManifestEntry, SampleActivations, Split};

/// Denominator guard for bounds at (or near) zero.
pub const DELTA_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DeviationError {
    #[error("lower bound {lower} exceeds upper bound {upper}")]
    InvertedBounds { lower: f64, upper: f64 },
    #[error("layer {layer}: summary has {found} channels, stats expect {expected}")]
    ChannelMismatch {
        layer: u32,
        expected: usize,
        found: usize,
    },
    #[error("sample has {found} layers, model expects {expected}")]
    LayerCount { expected: usize, found: usize },
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: LayerShape, found: LayerShape },
    #[error("no stats for class {class}")]
    MissingClass { class: usize },
    #[error("test split is empty")]
    EmptyTest,
    #[error("{sample}: {source}")]
    Load { sample: String, source: Box<dyn std::error::Error + Send + Sync> },
    #[error(transparent)]
    Gram(#[from] GramError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Relative distance of `g` outside `[lower, upper]`; zero inside.
pub fn delta(lower: f64, upper: f64, g: f64) -> Result<f64, DeviationError> {
    delta_with_floor(lower, upper, g, DELTA_EPS)
}

pub fn delta_with_floor(lower: f64, upper: f64, g: f64, eps: f64) -> Result<f64, DeviationError> {
    if lower > upper {
        return Err(DeviationError::InvertedBounds { lower, upper });
    }
    Ok(if g < lower {
        (lower - g) / lower.abs().max(eps)
    } else if g > upper {
        (g - upper) / upper.abs().max(eps)
    } else {
        0.0
    })
}

/// Sum of per-channel deviations of one layer summary against one class's bounds.
pub fn layer_deviation(summary: &GramSummary, bounds: &Bounds) -> Result<f64, DeviationError> {
    layer_deviation_with_floor(summary, bounds, DELTA_EPS)
}

pub(crate) fn layer_deviation_with_floor(
    summary: &GramSummary,
    bounds: &Bounds,
    eps: f64,
) -> Result<f64, DeviationError> {
    if summary.normalized.len() != bounds.lower.len() {
        return Err(DeviationError::ChannelMismatch {
            layer: summary.layer_id,
            expected: bounds.lower.len(),
            found: summary.normalized.len(),
        });
    }
    let mut total = 0.0;
    for ((&g, &lo), &hi) in summary.normalized.iter().zip(&bounds.lower).zip(&bounds.upper) {
        total += delta_with_floor(lo, hi, g, eps)?;
    }
    Ok(total)
}

/// Sum over the model's selected layers of the layer deviation against class
/// `class`, each divided by that class's expected validation deviation.
pub fn total_deviation(
    summaries: &[GramSummary],
    class: usize,
    model: &CalibrationModel,
) -> Result<f64, DeviationError> {
    Ok(per_layer_terms(summaries, class, model)?.iter().sum())
}

fn per_layer_terms(
    summaries: &[GramSummary],
    class: usize,
    model: &CalibrationModel,
) -> Result<Vec<f64>, DeviationError> {
    if class >= model.num_classes {
        return Err(DeviationError::MissingClass { class });
    }
    if summaries.len() != model.layers.len() {
        return Err(DeviationError::LayerCount {
            expected: model.layers.len(),
            found: summaries.len(),
        });
    }
    model
        .selected
        .iter()
        .map(|&l| {
            let stats = model.stats(class, l);
            let d = layer_deviation_with_floor(&summaries[l], &stats.bounds, model.delta_eps)?;
            Ok(d / stats.expected_dev)
        })
        .collect()
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Per-class total deviations for one sample and the resulting prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationVector {
    pub sample_id: String,
    pub totals: Vec<f64>,
    pub predicted_class: usize,
    /// `[class][selected layer]` normalized terms.
    pub per_layer: Vec<Vec<f64>>,
}

pub fn deviation_vector(
    sample_id: &str,
    summaries: &[GramSummary],
    model: &CalibrationModel,
) -> Result<DeviationVector, DeviationError> {
    let per_layer = (0..model.num_classes)
        .map(|c| per_layer_terms(summaries, c, model))
        .collect::<Result<Vec<_>, _>>()?;
    let totals: Vec<f64> = per_layer.iter().map(|t| t.iter().sum()).collect();
    Ok(DeviationVector {
        sample_id: sample_id.to_string(),
        predicted_class: argmin(&totals),
        totals,
        per_layer,
    })
}

pub fn check_layout(sample: &SampleActivations, layers: &[LayerShape]) -> Result<(), DeviationError> {
    if sample.records.len() != layers.len() {
        return Err(DeviationError::LayerCount {
            expected: layers.len(),
            found: sample.records.len(),
        });
    }
    for (record, expected) in sample.records.iter().zip(layers) {
        let found = record.shape();
        if found != *expected {
            return Err(DeviationError::ShapeMismatch {
                expected: *expected,
                found,
            });
        }
    }
    Ok(())
}

pub fn predict(sample: &SampleActivations, model: &CalibrationModel) -> Result<DeviationVector, DeviationError> {
    check_layout(sample, &model.layers)?;
    let summaries = summarize_sample(sample)?;
    deviation_vector(&sample.sample_id, &summaries, model)
}

/// Accuracy, balanced accuracy and the confusion matrix
/// (`confusion[true][predicted]`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    /// Balanced accuracy averages recall over classes that occur in `truth`.
    pub fn from_labels(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self, DeviationError> {
        assert_eq!(truth.len(), predicted.len());
        if truth.is_empty() {
            return Err(DeviationError::EmptyTest);
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let recalls: Vec<f64> = confusion
            .iter()
            .enumerate()
            .filter_map(|(c, row)| {
                let support: usize = row.iter().sum();
                (support > 0).then(|| row[c] as f64 / support as f64)
            })
            .collect();
        Ok(Metrics {
            accuracy: correct as f64 / truth.len() as f64,
            balanced_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
            confusion,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<(ManifestEntry, DeviationVector)>,
}

/// Scores every test entry of `manifest`, reading samples through `load`.
pub fn evaluate_with<F, E>(
    manifest: &DatasetManifest,
    model: &CalibrationModel,
    load: F,
) -> Result<Evaluation, DeviationError>
where
    F: Fn(&ManifestEntry) -> Result<SampleActivations, E> + Sync,
    E: std::error::Error + Send + Sync + 'static,
{
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Test).collect();
    if entries.is_empty() {
        return Err(DeviationError::EmptyTest);
    }
    let predictions = entries
        .par_iter()
        .map(|entry| {
            debug_assert_eq!(entry.split, Split::Test);
            let sample = load(entry).map_err(|e| DeviationError::Load {
                sample: entry.id.clone(),
                source: Box::new(e),
            })?;
            Ok(((*entry).clone(), predict(&sample, model)?))
        })
        .collect::<Result<Vec<_>, DeviationError>>()?;
    let truth: Vec<usize> = predictions.iter().map(|(e, _)| e.label).collect();
    let predicted: Vec<usize> = predictions.iter().map(|(_, d)| d.predicted_class).collect();
    let metrics = Metrics::from_labels(&truth, &predicted, manifest.num_classes)?;
    Ok(Evaluation { metrics, predictions })
}

/// Scores the test split, reading activation files as listed.
pub fn evaluate(manifest: &DatasetManifest, model: &CalibrationModel) -> Result<Evaluation, DeviationError> {
    evaluate_with(manifest, model, |e| manifest.load_entry(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_branches() {
        assert_eq!(delta(0.2, 0.8, 0.5).unwrap(), 0.0);
        assert!((delta(0.2, 0.8, 0.1).unwrap() - 0.5).abs() < 1e-12);
        assert!((delta(0.2, 0.8, 1.0).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn delta_rejects_inverted_bounds() {
        assert!(matches!(
            delta(0.9, 0.1, 0.5),
            Err(DeviationError::InvertedBounds { .. })
        ));
    }

    #[test]
    fn delta_guard_at_zero_bound() {
        assert_eq!(delta(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!((delta(0.0, 0.0, 1e-12).unwrap() - 1.0).abs() < 1e-12);
        assert!(delta(0.0, 0.0, 0.5).unwrap().is_finite());
    }

    fn summary(values: Vec<f64>) -> GramSummary {
        GramSummary {
            layer_id: 0,
            raw: values.clone(),
            normalized: values,
        }
    }

    #[test]
    fn layer_deviation_inside_and_below() {
        let bounds = Bounds {
            lower: vec![0.2, 0.0, 0.4],
            upper: vec![0.6, 1.0, 0.9],
        };
        assert_eq!(layer_deviation(&summary(vec![0.3, 0.5, 0.4]), &bounds).unwrap(), 0.0);
        let d = layer_deviation(&summary(vec![0.1, 0.5, 0.8]), &bounds).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_deviation_channel_mismatch() {
        let bounds = Bounds {
            lower: vec![0.0; 2],
            upper: vec![1.0; 2],
        };
        assert!(matches!(
            layer_deviation(&summary(vec![0.0; 3]), &bounds),
            Err(DeviationError::ChannelMismatch { expected: 2, found: 3, .. })
        ));
    }

    #[test]
    fn argmin_ties_to_lowest() {
        assert_eq!(argmin(&[2.1, 0.3, 5.0]), 1);
        assert_eq!(argmin(&[0.7, 0.7]), 0);
    }

    #[test]
    fn metrics_all_correct() {
        let m = Metrics::from_labels(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.balanced_accuracy, 1.0);
        assert_eq!(m.confusion, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn metrics_half_right() {
        let m = Metrics::from_labels(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.balanced_accuracy, 0.5);
    }

    #[test]
    fn metrics_imbalanced() {
        let truth = [0, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        let m = Metrics::from_labels(&truth, &[0; 10], 2).unwrap();
        assert_eq!(m.accuracy, 0.9);
        assert_eq!(m.balanced_accuracy, 0.5);
    }

    #[test]
    fn metrics_empty() {
        assert!(matches!(Metrics::from_labels(&[], &[], 2), Err(DeviationError::EmptyTest)));
    }
}
