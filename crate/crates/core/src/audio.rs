//! Audio to log-mel spectrogram: windowed-sinc resampling, Hann STFT with
//! zero padding, and a triangular mel filterbank.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::interchange::{ActivationRecord, FormatError, SampleActivations};

pub const TARGET_RATE: u32 = 16_000;
pub const FFT_SIZE: usize = 1024;
pub const WINDOW_MS: u32 = 40;
pub const HOP_MS: u32 = 20;
pub const MEL_BANDS: usize = 128;
pub const LOG_FLOOR: f64 = 1e-10;

/// Taps per output sample of the resampling kernel.
pub const RESAMPLE_TAPS: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum FrontendError {
    #[error("audio segment is empty")]
    Empty,
    #[error("sample rate must be positive")]
    ZeroRate,
    #[error("audio of {len} samples is shorter than one {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("expected {expected} frequency bins, got {found}")]
    BinCount { expected: usize, found: usize },
    #[error("power value {value} at bin {bin}, frame {frame} is negative or non-finite")]
    BadPower { bin: usize, frame: usize, value: f64 },
    #[error("non-finite spectrogram value at band {band}, frame {frame}")]
    NonFinite { band: usize, frame: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSegment {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, FrontendError> {
        if sample_rate == 0 {
            return Err(FrontendError::ZeroRate);
        }
        Ok(AudioSegment {
            samples,
            sample_rate,
        })
    }
}

/// Power spectrogram, `bins` rows by `frames` columns, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl PowerSpectrum {
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    /// Column `frame` as a vector over bins.
    pub fn column(&self, frame: usize) -> Vec<f64> {
        (0..self.bins).map(|b| self.get(b, frame)).collect()
    }
}

/// Log-mel energies, `bands` rows by `frames` columns, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub bands: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(bands: usize, frames: usize, values: Vec<f64>) -> Result<Self, FrontendError> {
        assert_eq!(values.len(), bands * frames, "spectrogram shape mismatch");
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FrontendError::NonFinite {
                band: i / frames,
                frame: i % frames,
            });
        }
        Ok(MelSpectrogram {
            bands,
            frames,
            values,
        })
    }

    pub fn get(&self, band: usize, frame: usize) -> f64 {
        self.values[band * self.frames + frame]
    }

    /// Packs the spectrogram as a one-layer, one-channel activation sample
    /// (`m` = bands, `n` = frames).
    pub fn to_sample(&self, sample_id: impl Into<String>) -> Result<SampleActivations, FormatError> {
        let values = self.values.iter().map(|&v| v as f32).collect();
        let record = ActivationRecord::new(0, 1, self.bands, self.frames, values)?;
        SampleActivations::new(sample_id, vec![record])
    }

    /// Inverse of [`MelSpectrogram::to_sample`]; takes the first channel of
    /// the first layer.
    pub fn from_sample(sample: &SampleActivations) -> Result<Self, FrontendError> {
        let record = sample.records.first().ok_or(FrontendError::Empty)?;
        let values = record.feature_map(0).iter().map(|&v| v as f64).collect();
        MelSpectrogram::new(record.height, record.width, values)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel of
/// [`RESAMPLE_TAPS`] taps. Weights are renormalized per output sample, so
/// constant signals pass through unchanged, edges included.
pub fn resample(audio: &AudioSegment, target_rate: u32) -> Result<AudioSegment, FrontendError> {
    if target_rate == 0 || audio.sample_rate == 0 {
        return Err(FrontendError::ZeroRate);
    }
    if audio.samples.is_empty() {
        return Err(FrontendError::Empty);
    }
    if target_rate == audio.sample_rate {
        return Ok(audio.clone());
    }
    let ratio = target_rate as f64 / audio.sample_rate as f64;
    // cutoff relative to the input Nyquist
    let cutoff = ratio.min(1.0);
    let out_len = ((audio.samples.len() as f64 * ratio).round() as usize).max(1);
    let half = (RESAMPLE_TAPS / 2) as i64;
    let input = &audio.samples;
    let samples = (0..out_len)
        .map(|i| {
            let t = i as f64 / ratio;
            let base = t.floor() as i64;
            let mut acc = 0.0;
            let mut norm = 0.0;
            for j in (base - half + 1)..=(base + half) {
                if j < 0 || j as usize >= input.len() {
                    continue;
                }
                let d = t - j as f64;
                let window = 0.5 + 0.5 * (PI * d / half as f64).cos();
                let w = cutoff * sinc(cutoff * d) * window;
                acc += w * input[j as usize];
                norm += w;
            }
            if norm.abs() > 1e-12 {
                acc / norm
            } else {
                0.0
            }
        })
        .collect();
    Ok(AudioSegment {
        samples,
        sample_rate: target_rate,
    })
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / hop + 1
    }
}

/// Short-time power spectrum: Hann-windowed frames of `window_ms`, advanced
/// by `hop_ms`, zero-padded to `fft_size`. Output has `fft_size / 2 + 1` rows.
pub fn stft_power(
    audio: &AudioSegment,
    fft_size: usize,
    window_ms: u32,
    hop_ms: u32,
) -> Result<PowerSpectrum, FrontendError> {
    if audio.sample_rate == 0 {
        return Err(FrontendError::ZeroRate);
    }
    let window = (audio.sample_rate as usize * window_ms as usize) / 1000;
    let hop = (audio.sample_rate as usize * hop_ms as usize) / 1000;
    assert!(window <= fft_size, "window longer than FFT");
    assert!(hop > 0, "hop must be positive");
    let frames = frame_count(audio.samples.len(), window, hop);
    if frames == 0 {
        return Err(FrontendError::TooShort {
            len: audio.samples.len(),
            window,
        });
    }
    let bins = fft_size / 2 + 1;
    let taper = hann(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut values = vec![0.0; bins * frames];
    for f in 0..frames {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < window {
                Complex::new(audio.samples[start + i] * taper[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for b in 0..bins {
            values[b * frames + f] = buf[b].norm_sqr();
        }
    }
    Ok(PowerSpectrum {
        bins,
        frames,
        values,
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, centers equally spaced on the mel
/// scale between 0 Hz and `sample_rate / 2`. Triangles are linear in Hz, so
/// neighbouring filters sum to one between the first and last centers.
/// Returned row-major as `num_bands x bins`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub num_bands: usize,
    pub bins: usize,
    pub weights: Vec<f64>,
    /// Band edge and center frequencies, `num_bands + 2` points.
    pub points_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(num_bands: usize, fft_size: usize, sample_rate: u32) -> Self {
        let bins = fft_size / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let points_hz: Vec<f64> = (0..num_bands + 2)
            .map(|i| mel_to_hz(top * i as f64 / (num_bands + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mut weights = vec![0.0; num_bands * bins];
        for band in 0..num_bands {
            let (lo, mid, hi) = (points_hz[band], points_hz[band + 1], points_hz[band + 2]);
            for b in 0..bins {
                let f = b as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[band * bins + b] = w;
            }
        }
        MelFilterbank {
            num_bands,
            bins,
            weights,
            points_hz,
        }
    }

    pub fn row(&self, band: usize) -> &[f64] {
        &self.weights[band * self.bins..(band + 1) * self.bins]
    }
}

/// Applies a 0 to 8 kHz mel filterbank to each frame and takes `ln(x + 1e-10)`.
pub fn mel_project(power: &PowerSpectrum, num_bands: usize) -> Result<MelSpectrogram, FrontendError> {
    let expected = FFT_SIZE / 2 + 1;
    if power.bins != expected {
        return Err(FrontendError::BinCount {
            expected,
            found: power.bins,
        });
    }
    if let Some(i) = power.values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(FrontendError::BadPower {
            bin: i / power.frames,
            frame: i % power.frames,
            value: power.values[i],
        });
    }
    let bank = MelFilterbank::new(num_bands, FFT_SIZE, TARGET_RATE);
    let mut values = vec![0.0; num_bands * power.frames];
    for band in 0..num_bands {
        let row = bank.row(band);
        for f in 0..power.frames {
            let energy: f64 = row
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(b, w)| w * power.get(b, f))
                .sum();
            values[band * power.frames + f] = (energy + LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::new(num_bands, power.frames, values)
}

/// Full front-end: resample to 16 kHz, 1024-point STFT over 40 ms windows
/// with a 20 ms hop, then 128 log-mel bands.
pub fn log_mel(audio: &AudioSegment) -> Result<MelSpectrogram, FrontendError> {
    let audio = resample(audio, TARGET_RATE)?;
    let power = stft_power(&audio, FFT_SIZE, WINDOW_MS, HOP_MS)?;
    mel_project(&power, MEL_BANDS)
}
