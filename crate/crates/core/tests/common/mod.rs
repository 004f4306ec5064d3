#![allow(dead_code)]

use gramsec::calibration::{
    fit_bounds, fit_expected_devs, score_layers, CalibrationModel, SummarizedSample,
};
use gramsec::gram::summarize_sample;
use gramsec::interchange::{ActivationRecord, LayerShape, SampleActivations, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_record<R: Rng>(rng: &mut R, layer_id: u32, k: usize, m: usize, n: usize) -> ActivationRecord {
    let values = (0..k * m * n).map(|_| rng.random_range(-4.0f32..4.0)).collect();
    ActivationRecord::new(layer_id, k, m, n, values).unwrap()
}

/// Non-negative activations with a class-dependent per-channel gain, so
/// classes differ in their correlation profile.
pub fn class_sample<R: Rng>(rng: &mut R, id: String, label: usize, layout: &[LayerShape]) -> SampleActivations {
    let records = layout
        .iter()
        .map(|s| {
            let map = s.height * s.width;
            let values = (0..s.channels * map)
                .map(|i| {
                    let channel = i / map;
                    let gain = 1.0 + 3.0 * (((channel + label) % s.channels) as f32 / s.channels as f32);
                    gain * rng.random_range(0.0f32..1.0)
                })
                .collect();
            ActivationRecord::new(s.layer_id, s.channels, s.height, s.width, values).unwrap()
        })
        .collect();
    SampleActivations::new(id, records).unwrap()
}

pub fn random_layout<R: Rng>(rng: &mut R, layers: usize) -> Vec<LayerShape> {
    (0..layers)
        .map(|l| LayerShape {
            layer_id: l as u32,
            channels: rng.random_range(2..=5),
            height: rng.random_range(1..=3),
            width: rng.random_range(1..=3),
        })
        .collect()
}

pub fn summarized<R: Rng>(
    rng: &mut R,
    layout: &[LayerShape],
    classes: usize,
    per_class: usize,
    split: Split,
) -> Vec<SummarizedSample> {
    let mut out = Vec::new();
    for label in 0..classes {
        for i in 0..per_class {
            let id = format!("{split}-{label}-{i}");
            let sample = class_sample(rng, id.clone(), label, layout);
            out.push(SummarizedSample {
                sample_id: id,
                split,
                label,
                layers: summarize_sample(&sample).unwrap(),
            });
        }
    }
    out
}

/// A fitted model over a random dataset, plus its training samples.
pub fn random_model(seed: u64, classes: usize, layers: usize, top_k: usize) -> (CalibrationModel, Vec<SummarizedSample>) {
    let mut rng = rng(seed);
    let layout = random_layout(&mut rng, layers);
    let train = summarized(&mut rng, &layout, classes, 4, Split::Train);
    let val = summarized(&mut rng, &layout, classes, 3, Split::Validation);
    let bounds = fit_bounds(&train, classes).unwrap();
    let expected = fit_expected_devs(&val, &bounds).unwrap();
    let scores = score_layers(&val, &bounds).unwrap();
    let model = CalibrationModel::assemble(layout, bounds, expected, scores, top_k).unwrap();
    (model, train)
}
