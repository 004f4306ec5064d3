//! Synthetic datasets and end-to-end experiment runs.

use std::error::Error as StdError;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{MelSpectrogram, MEL_BANDS};
use crate::calibration::{
    default_top_k, fit_bounds, fit_expected_devs, save_model, score_layers, CalibrationModel, LayerScore,
    SummarizedSample,
};
use crate::deviation::{evaluate_with, Evaluation, Metrics};
use crate::gram::summarize_sample;
use crate::interchange::{
    load_manifest, write_activation_file, DatasetManifest, FormatError, ManifestEntry, SampleActivations, Split,
};
use crate::refnet::{forward, RefNetConfig, RefNetError, BAND_ROWS};

/// Noise standard deviation as a fraction of the band amplitude.
pub const NOISE_FRACTION: f64 = 0.05;
pub const DEFAULT_FRAMES: usize = 32;

type BoxError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{classes} classes cannot be given disjoint {BAND_ROWS}-row bands in {MEL_BANDS} rows")]
    BandPartition { classes: usize },
    #[error("stage {stage} failed: {source}")]
    Stage { stage: &'static str, source: BoxError },
}

fn stage<E: Into<BoxError>>(stage: &'static str) -> impl FnOnce(E) -> HarnessError {
    move |e| HarnessError::Stage {
        stage,
        source: e.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub seed: u64,
    pub frames: usize,
}

/// Spectrogram surrogate for `class`: band rows `16c..16c+16` carry the
/// amplitude `gain`, every cell gets Gaussian noise of `0.05 * gain`.
pub fn surrogate_spectrogram<R: Rng>(class: usize, frames: usize, rng: &mut R) -> MelSpectrogram {
    let gain: f64 = rng.random_range(0.5..1.5);
    let noise = Normal::new(0.0, NOISE_FRACTION * gain).expect("positive std");
    let band = class * BAND_ROWS..(class + 1) * BAND_ROWS;
    let mut values = Vec::with_capacity(MEL_BANDS * frames);
    for row in 0..MEL_BANDS {
        let level = if band.contains(&row) { gain } else { 0.0 };
        for _ in 0..frames {
            values.push(level + noise.sample(rng));
        }
    }
    MelSpectrogram::new(MEL_BANDS, frames, values).expect("finite surrogate")
}

/// Writes `spectrograms/*.gram`, `manifest.json` and a ready-to-run
/// `experiment.json` (band-filtered refnet) under `out_dir`.
pub fn generate_synthetic(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest, HarnessError> {
    if config.classes == 0 || config.classes * BAND_ROWS > MEL_BANDS {
        return Err(HarnessError::BandPartition {
            classes: config.classes,
        });
    }
    let spec_dir = out_dir.join("spectrograms");
    fs::create_dir_all(&spec_dir).map_err(stage("synth"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::new();
    for (split, count) in [
        (Split::Train, config.train),
        (Split::Validation, config.validation),
        (Split::Test, config.test),
    ] {
        for class in 0..config.classes {
            for i in 0..count {
                let id = format!("{split}-c{class}-{i:03}");
                let path = PathBuf::from("spectrograms").join(format!("{id}.gram"));
                let spec = surrogate_spectrogram(class, config.frames, &mut rng);
                let sample = spec.to_sample(id.clone()).map_err(stage("synth"))?;
                write_activation_file(&out_dir.join(&path), &sample).map_err(stage("synth"))?;
                entries.push(ManifestEntry {
                    id,
                    split,
                    label: class,
                    path,
                });
            }
        }
    }
    let mut manifest = DatasetManifest::new(config.classes, entries).map_err(stage("synth"))?;
    manifest.base_dir = out_dir.to_path_buf();
    fs::write(out_dir.join("manifest.json"), manifest.to_json()).map_err(stage("synth"))?;
    let experiment = ExperimentConfig {
        manifest: PathBuf::from("manifest.json"),
        refnet: Some(RefNetConfig {
            seed: config.seed,
            band_filter_mode: true,
            ..RefNetConfig::default()
        }),
        top_k: None,
        seed: config.seed,
        output_dir: PathBuf::from("run"),
    };
    fs::write(out_dir.join("experiment.json"), experiment.to_json()).map_err(stage("synth"))?;
    Ok(manifest)
}

/// Experiment definition. Relative paths resolve against the config file's
/// directory. Without `refnet`, manifest files are taken as activations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    #[serde(default)]
    pub refnet: Option<RefNetConfig>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), HarnessError> {
        let text = fs::read_to_string(path).map_err(stage("config"))?;
        let config: ExperimentConfig = serde_json::from_str(&text).map_err(stage("config"))?;
        let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
        Ok((config, base))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    RefNet(#[from] RefNetError),
    #[error(transparent)]
    Frontend(#[from] crate::audio::FrontendError),
}

/// Reads one manifest entry, running refnet over it when configured.
pub fn load_sample(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    refnet: Option<&RefNetConfig>,
) -> Result<SampleActivations, LoadError> {
    let stored = manifest.load_entry(entry)?;
    match refnet {
        None => Ok(stored),
        Some(config) => {
            let spec = MelSpectrogram::from_sample(&stored)?;
            Ok(forward(&spec, config, entry.id.clone())?)
        }
    }
}

/// Loads and summarizes every entry of one split.
pub fn summarize_split(
    manifest: &DatasetManifest,
    split: Split,
    refnet: Option<&RefNetConfig>,
) -> Result<Vec<SummarizedSample>, BoxError> {
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    entries
        .par_iter()
        .map(|entry| -> Result<SummarizedSample, BoxError> {
            let sample = load_sample(manifest, entry, refnet).map_err(|e| format!("{}: {e}", entry.id))?;
            Ok(SummarizedSample {
                sample_id: entry.id.clone(),
                split: entry.split,
                label: entry.label,
                layers: summarize_sample(&sample)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub num_classes: usize,
    pub num_test: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub top_k: usize,
    pub selected_layers: Vec<u32>,
    pub layer_scores: Vec<LayerScore>,
}

impl RunReport {
    fn new(model: &CalibrationModel, metrics: &Metrics, num_test: usize) -> Self {
        RunReport {
            num_classes: model.num_classes,
            num_test,
            accuracy: metrics.accuracy,
            balanced_accuracy: metrics.balanced_accuracy,
            confusion: metrics.confusion.clone(),
            top_k: model.top_k,
            selected_layers: model.selected_layer_ids(),
            layer_scores: model.scores.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "accuracy {:.6}", self.accuracy).unwrap();
        writeln!(out, "balanced_accuracy {:.6}", self.balanced_accuracy).unwrap();
        writeln!(out, "test_samples {}", self.num_test).unwrap();
        writeln!(out, "confusion (rows: true class, columns: predicted)").unwrap();
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
            writeln!(out, "{}", cells.join(" ")).unwrap();
        }
        writeln!(out, "layer scores (top_k = {})", self.top_k).unwrap();
        writeln!(out, "layer  selected  I_l  per-class W_d").unwrap();
        for s in &self.layer_scores {
            let mark = if self.selected_layers.contains(&s.layer_id) { "*" } else { "-" };
            let per: Vec<String> = s.per_class.iter().map(|d| format!("{d:.6e}")).collect();
            writeln!(out, "{:>5}  {:>8}  {:.6e}  {}", s.layer_id, mark, s.aggregate, per.join(" ")).unwrap();
        }
        out
    }
}

pub fn predictions_csv(evaluation: &Evaluation, num_classes: usize) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string(), "predicted_class".to_string()];
    header.extend((0..num_classes).map(|c| format!("delta_{c}")));
    w.write_record(&header)?;
    for (_, dv) in &evaluation.predictions {
        let mut row = vec![dv.sample_id.clone(), dv.predicted_class.to_string()];
        row.extend(dv.totals.iter().map(|d| d.to_string()));
        w.write_record(&row)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

fn run_log(config: &ExperimentConfig, manifest: &DatasetManifest, model: &CalibrationModel) -> String {
    let mut out = String::new();
    let count = |s| manifest.split(s).count();
    writeln!(out, "manifest {}", config.manifest.display()).unwrap();
    writeln!(out, "classes {}", manifest.num_classes).unwrap();
    writeln!(
        out,
        "samples train={} validation={} test={}",
        count(Split::Train),
        count(Split::Validation),
        count(Split::Test)
    )
    .unwrap();
    match &config.refnet {
        Some(r) => writeln!(
            out,
            "activations refnet blocks={} channels={:?} seed={} band_filter_mode={}",
            r.num_blocks, r.channels, r.seed, r.band_filter_mode
        )
        .unwrap(),
        None => writeln!(out, "activations external").unwrap(),
    }
    writeln!(out, "seed {}", config.seed).unwrap();
    writeln!(out, "bounds_partition train").unwrap();
    writeln!(out, "expected_dev_partition validation").unwrap();
    writeln!(out, "layer_score_partition validation").unwrap();
    writeln!(out, "layer_score_pooling mean").unwrap();
    writeln!(out, "top_k {}", model.top_k).unwrap();
    writeln!(out, "selected_layers {:?}", model.selected_layer_ids()).unwrap();
    writeln!(out, "delta_eps {:e}", model.delta_eps).unwrap();
    writeln!(out, "expected_dev_floor {:e}", model.expected_dev_floor).unwrap();
    out
}

/// Fits bounds on the training split, expected deviations and layer scores
/// on the validation split, and selects `top_k` layers (default half the
/// layers, rounded up). `layout` is the stored file layout from
/// [`DatasetManifest::probe_layout`].
pub fn fit_model(
    manifest: &DatasetManifest,
    layout: &[crate::interchange::LayerShape],
    refnet: Option<&RefNetConfig>,
    top_k: Option<usize>,
) -> Result<CalibrationModel, HarnessError> {
    let train = summarize_split(manifest, Split::Train, refnet).map_err(stage("summarize"))?;
    let bounds = fit_bounds(&train, manifest.num_classes).map_err(stage("fit_bounds"))?;
    drop(train);

    let validation = summarize_split(manifest, Split::Validation, refnet).map_err(stage("summarize"))?;
    let expected = fit_expected_devs(&validation, &bounds).map_err(stage("fit_expected_devs"))?;
    let scores = score_layers(&validation, &bounds).map_err(stage("score_layers"))?;

    // refnet output replaces the stored spectrogram layout
    let layers = match refnet {
        None => layout.to_vec(),
        Some(r) => {
            let first = manifest.entries.first().ok_or("manifest has no entries").map_err(stage("layout"))?;
            load_sample(manifest, first, Some(r)).map_err(stage("layout"))?.layout()
        }
    };
    let top_k = top_k.unwrap_or_else(|| default_top_k(layers.len()));
    CalibrationModel::assemble(layers, bounds, expected, scores, top_k).map_err(stage("select_layers"))
}

/// Result of a full run, with everything that was written to disk.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub model: CalibrationModel,
    pub output_dir: PathBuf,
}

/// Fits a model (see [`fit_model`]) and evaluates it on the test split. Writes `model.gram`,
/// `predictions.csv`, `metrics.txt`, `metrics.json` and `run.log`.
pub fn run_experiment(config: &ExperimentConfig, base_dir: &Path) -> Result<RunOutcome, HarnessError> {
    let manifest_path = base_dir.join(&config.manifest);
    let output_dir = base_dir.join(&config.output_dir);
    let manifest = load_manifest(&manifest_path).map_err(stage("manifest"))?;
    let layout = manifest.probe_layout().map_err(stage("manifest"))?;
    let refnet = config.refnet.as_ref();
    let model = fit_model(&manifest, &layout, refnet, config.top_k)?;

    let evaluation = evaluate_with(&manifest, &model, |e| load_sample(&manifest, e, refnet)).map_err(stage("evaluate"))?;
    let report = RunReport::new(&model, &evaluation.metrics, evaluation.predictions.len());

    fs::create_dir_all(&output_dir).map_err(stage("write"))?;
    save_model(&model, &output_dir.join("model.gram")).map_err(stage("write"))?;
    let csv = predictions_csv(&evaluation, model.num_classes).map_err(stage("write"))?;
    fs::write(output_dir.join("predictions.csv"), csv).map_err(stage("write"))?;
    fs::write(output_dir.join("metrics.txt"), report.to_text()).map_err(stage("write"))?;
    let json = serde_json::to_string_pretty(&report).map_err(stage("write"))?;
    fs::write(output_dir.join("metrics.json"), json + "\n").map_err(stage("write"))?;
    fs::write(output_dir.join("run.log"), run_log(config, &manifest, &model)).map_err(stage("write"))?;
    Ok(RunOutcome {
        report,
        model,
        output_dir,
    })
}
