use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gramsec::audio::{log_mel, AudioSegment, MelSpectrogram};
use gramsec::calibration::{load_model, save_model};
use gramsec::deviation::evaluate;
use gramsec::gram::summarize_sample;
use gramsec::harness::{
    fit_model, generate_synthetic, predictions_csv, run_experiment, ExperimentConfig, SynthConfig, DEFAULT_FRAMES,
};
use gramsec::interchange::{
    load_manifest, read_activation_file, write_activation_file, ActivationRecord, SampleActivations,
};
use gramsec::refnet::{forward, RefNetConfig};

#[derive(Parser)]
#[command(name = "gramsec", version, about = "Gram-matrix deviation classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a PCM WAV file into a 128-band log-mel spectrogram file.
    Spectrogram {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the reference CNN over a spectrogram file.
    Refnet {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        band_filters: bool,
        /// Channels per block.
        #[arg(long, value_delimiter = ',', default_values_t = vec![8, 16, 32])]
        channels: Vec<usize>,
    },
    /// Write normalized Gram correlation profiles of an activation file.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate a model from the manifest's train and validation splits.
    Fit {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Write per-class deviations and predictions for the test split.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print accuracy, balanced accuracy and the confusion matrix.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Generate a synthetic band-energy dataset.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        val: usize,
        #[arg(long)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_FRAMES)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run fit, layer selection and evaluation from an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's top_k.
        #[arg(long)]
        top_k: Option<usize>,
    },
}

fn read_wav(path: &Path) -> Result<AudioSegment> {
    let mut reader = hound::WavReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()?,
        (format, bits) => bail!("unsupported WAV encoding: {format:?} {bits}-bit"),
    };
    let channels = spec.channels.max(1) as usize;
    let mono = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok(AudioSegment::new(mono, spec.sample_rate)?)
}

fn file_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn main() -> Result<()> {
    execute(Cli::parse().command, &mut io::stdout().lock())
}

fn execute(command: Command, w: &mut dyn Write) -> Result<()> {
    match command {
        Command::Spectrogram { input, out } => {
            let audio = read_wav(&input)?;
            let mel = log_mel(&audio)?;
            write_activation_file(&out, &mel.to_sample(file_id(&input))?)?;
            writeln!(w, "{} bands x {} frames -> {}", mel.bands, mel.frames, out.display())?;
        }
        Command::Refnet {
            input,
            out,
            seed,
            band_filters,
            channels,
        } => {
            let stored = read_activation_file(&input, &file_id(&input))?;
            let spec = MelSpectrogram::from_sample(&stored)?;
            let config = RefNetConfig {
                num_blocks: channels.len(),
                channels,
                seed,
                band_filter_mode: band_filters,
            };
            let acts = forward(&spec, &config, stored.sample_id.clone())?;
            write_activation_file(&out, &acts)?;
            for shape in acts.layout() {
                writeln!(w, "{shape}")?;
            }
        }
        Command::Summarize { input, out } => {
            let sample = read_activation_file(&input, &file_id(&input))?;
            let summaries = summarize_sample(&sample)?;
            let records = summaries
                .iter()
                .map(|s| {
                    let values = s.normalized.iter().map(|&v| v as f32).collect();
                    ActivationRecord::new(s.layer_id, 1, 1, s.normalized.len(), values)
                })
                .collect::<Result<Vec<_>, _>>()?;
            write_activation_file(&out, &SampleActivations::new(sample.sample_id, records)?)?;
        }
        Command::Fit { manifest, out, top_k } => {
            let manifest = load_manifest(&manifest)?;
            let layout = manifest.probe_layout()?;
            let model = fit_model(&manifest, &layout, None, top_k)?;
            save_model(&model, &out)?;
            writeln!(
                w,
                "fitted {} classes x {} layers, selected layers {:?} -> {}",
                model.num_classes,
                model.layers.len(),
                model.selected_layer_ids(),
                out.display()
            )?;
        }
        Command::Predict { manifest, model, out } => {
            let manifest = load_manifest(&manifest)?;
            let model = load_model(&model)?;
            let evaluation = evaluate(&manifest, &model)?;
            fs::write(&out, predictions_csv(&evaluation, model.num_classes)?)?;
        }
        Command::Eval { manifest, model } => {
            let manifest = load_manifest(&manifest)?;
            let model = load_model(&model)?;
            let metrics = evaluate(&manifest, &model)?.metrics;
            writeln!(w, "ACC {:.4}", metrics.accuracy)?;
            writeln!(w, "BA {:.4}", metrics.balanced_accuracy)?;
            writeln!(w, "confusion (rows: true, columns: predicted)")?;
            for row in &metrics.confusion {
                let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
                writeln!(w, "{}", cells.join(" "))?;
            }
        }
        Command::Synth {
            classes,
            train,
            val,
            test,
            seed,
            frames,
            out,
        } => {
            let config = SynthConfig {
                classes,
                train,
                validation: val,
                test,
                seed,
                frames,
            };
            let manifest = generate_synthetic(&config, &out)?;
            writeln!(w, "{} samples -> {}", manifest.entries.len(), out.join("manifest.json").display())?;
        }
        Command::Run { config, top_k } => {
            let (mut experiment, base) = ExperimentConfig::load(&config)?;
            if top_k.is_some() {
                experiment.top_k = top_k;
            }
            let outcome = run_experiment(&experiment, &base)?;
            write!(w, "{}", outcome.report.to_text())?;
            writeln!(w, "outputs in {}", outcome.output_dir.display())?;
        }
    }
    Ok(())
}
