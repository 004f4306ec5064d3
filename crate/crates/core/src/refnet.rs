//! Small deterministic convolutional network used as an activation source.
//!
//! Each block is a 3x3 convolution (stride 1, zero padding 1, zero bias),
//! ReLU, then 2x2 max pooling. Activations are captured after the ReLU and
//! before pooling, one record per block. Weights come from a counter-based
//! splitmix64 generator keyed by `(seed, block, index)`, so they depend on
//! nothing but the config.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::MelSpectrogram;
use crate::interchange::{ActivationRecord, FormatError, SampleActivations};

/// Rows per band for the band-selector first block.
pub const BAND_ROWS: usize = 16;

#[derive(Debug, Error)]
pub enum RefNetError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("block {block} input is {height}x{width}, too small to pool for the next block")]
    TooSmall {
        block: usize,
        height: usize,
        width: usize,
    },
    #[error("non-finite input spectrogram")]
    NonFinite,
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefNetConfig {
    pub num_blocks: usize,
    pub channels: Vec<usize>,
    pub seed: u64,
    /// First-block kernels become band selectors: output channel `c` averages
    /// the 3x3 neighbourhood restricted to mel rows `16c..16c+16` and is zero
    /// outside that band.
    pub band_filter_mode: bool,
}

impl Default for RefNetConfig {
    fn default() -> Self {
        RefNetConfig {
            num_blocks: 3,
            channels: vec![8, 16, 32],
            seed: 0,
            band_filter_mode: false,
        }
    }
}

impl RefNetConfig {
    pub fn validate(&self) -> Result<(), RefNetError> {
        if self.num_blocks == 0 {
            return Err(RefNetError::Config("num_blocks must be at least 1".into()));
        }
        if self.channels.len() != self.num_blocks {
            return Err(RefNetError::Config(format!(
                "{} channel counts for {} blocks",
                self.channels.len(),
                self.num_blocks
            )));
        }
        if self.channels.contains(&0) {
            return Err(RefNetError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Uniform draw in [-1, 1) that depends only on `(seed, block, index)`.
fn unit_weight(seed: u64, block: usize, index: usize) -> f64 {
    let key = splitmix64(seed ^ splitmix64(block as u64 + 1));
    let bits = splitmix64(key.wrapping_add(index as u64));
    let unit = (bits >> 11) as f64 / (1u64 << 53) as f64;
    2.0 * unit - 1.0
}

/// Conv weights of block `block`, laid out `[out][in][3][3]`, uniform in
/// `[-s, s]` with `s = 1 / sqrt(in * 9)`.
pub fn block_weights(seed: u64, block: usize, in_channels: usize, out_channels: usize) -> Vec<f64> {
    let scale = 1.0 / ((in_channels * 9) as f64).sqrt();
    (0..out_channels * in_channels * 9)
        .map(|i| scale * unit_weight(seed, block, i))
        .collect()
}

/// Order-sensitive checksum over every random weight of the network.
pub fn weight_checksum(config: &RefNetConfig) -> u64 {
    let mut in_ch = 1;
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for (block, &out_ch) in config.channels.iter().enumerate() {
        for w in block_weights(config.seed, block, in_ch, out_ch) {
            hash = splitmix64(hash ^ w.to_bits());
        }
        in_ch = out_ch;
    }
    hash
}

/// Feature maps `[channel][row][col]`.
#[derive(Debug, Clone)]
struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    fn to_record(&self, layer_id: u32) -> Result<ActivationRecord, FormatError> {
        let values = self.data.iter().map(|&v| v as f32).collect();
        ActivationRecord::new(layer_id, self.channels, self.height, self.width, values)
    }
}

fn conv3x3_relu(input: &Tensor3, weights: &[f64], out_channels: usize) -> Tensor3 {
    let (h, w) = (input.height, input.width);
    let in_ch = input.channels;
    let mut out = Tensor3::zeros(out_channels, h, w);
    for o in 0..out_channels {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for c in 0..in_ch {
                    let kernel = &weights[(o * in_ch + c) * 9..(o * in_ch + c + 1) * 9];
                    for di in 0..3 {
                        let y = i as isize + di as isize - 1;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for dj in 0..3 {
                            let x = j as isize + dj as isize - 1;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            acc += kernel[di * 3 + dj] * input.at(c, y as usize, x as usize);
                        }
                    }
                }
                out.data[(o * h + i) * w + j] = acc.max(0.0);
            }
        }
    }
    out
}

/// Band-selector block over a single-channel input. Channel `c` covers rows
/// of band `c mod bands`; taps outside the band contribute nothing.
fn band_select_relu(input: &Tensor3, out_channels: usize) -> Tensor3 {
    let (h, w) = (input.height, input.width);
    let bands = h.div_ceil(BAND_ROWS);
    let mut out = Tensor3::zeros(out_channels, h, w);
    for o in 0..out_channels {
        let band = o % bands;
        let lo = band * BAND_ROWS;
        let hi = (lo + BAND_ROWS).min(h);
        for i in lo..hi {
            for j in 0..w {
                let mut acc = 0.0;
                for y in i.saturating_sub(1)..=(i + 1) {
                    if y < lo || y >= hi {
                        continue;
                    }
                    for x in j.saturating_sub(1)..=(j + 1) {
                        if x < w {
                            acc += input.at(0, y, x);
                        }
                    }
                }
                out.data[(o * h + i) * w + j] = (acc / 9.0).max(0.0);
            }
        }
    }
    out
}

fn max_pool2(input: &Tensor3) -> Tensor3 {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = Tensor3::zeros(input.channels, h, w);
    for c in 0..input.channels {
        for i in 0..h {
            for j in 0..w {
                let m = input
                    .at(c, 2 * i, 2 * j)
                    .max(input.at(c, 2 * i + 1, 2 * j))
                    .max(input.at(c, 2 * i, 2 * j + 1))
                    .max(input.at(c, 2 * i + 1, 2 * j + 1));
                out.data[(c * h + i) * w + j] = m;
            }
        }
    }
    out
}

/// Runs the network and returns one record per block, layer ids `0..blocks`.
pub fn forward(
    spec: &MelSpectrogram,
    config: &RefNetConfig,
    sample_id: impl Into<String>,
) -> Result<SampleActivations, RefNetError> {
    config.validate()?;
    if spec.values.iter().any(|v| !v.is_finite()) {
        return Err(RefNetError::NonFinite);
    }
    let mut x = Tensor3 {
        channels: 1,
        height: spec.bands,
        width: spec.frames,
        data: spec.values.clone(),
    };
    let mut records = Vec::with_capacity(config.num_blocks);
    for (block, &out_ch) in config.channels.iter().enumerate() {
        if block > 0 {
            if x.height < 2 || x.width < 2 {
                return Err(RefNetError::TooSmall {
                    block: block - 1,
                    height: x.height,
                    width: x.width,
                });
            }
            x = max_pool2(&x);
        }
        let act = if block == 0 && config.band_filter_mode {
            band_select_relu(&x, out_ch)
        } else {
            let weights = block_weights(config.seed, block, x.channels, out_ch);
            conv3x3_relu(&x, &weights, out_ch)
        };
        records.push(act.to_record(block as u32)?);
        x = act;
    }
    Ok(SampleActivations::new(sample_id, records)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(bands: usize, frames: usize, f: impl Fn(usize, usize) -> f64) -> MelSpectrogram {
        let values = (0..bands * frames).map(|i| f(i / frames, i % frames)).collect();
        MelSpectrogram::new(bands, frames, values).unwrap()
    }

    #[test]
    fn zero_input_zero_activations() {
        let s = spec(32, 8, |_, _| 0.0);
        let out = forward(&s, &RefNetConfig::default(), "z").unwrap();
        assert_eq!(out.records.len(), 3);
        for r in &out.records {
            assert!(r.values.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let s = spec(4, 4, |i, j| (i as f64 - 1.5) * (j as f64 + 0.5));
        let config = RefNetConfig {
            seed: 42,
            ..RefNetConfig::default()
        };
        let a = forward(&s, &config, "a").unwrap();
        let b = forward(&s, &config, "a").unwrap();
        let bits = |x: &SampleActivations| -> Vec<u32> {
            x.records.iter().flat_map(|r| r.values.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn band_selector_isolates_band_zero() {
        let s = spec(128, 8, |i, j| if i < 16 { 1.0 + 0.1 * j as f64 } else { 0.0 });
        let config = RefNetConfig {
            band_filter_mode: true,
            ..RefNetConfig::default()
        };
        let out = forward(&s, &config, "b").unwrap();
        let block1 = &out.records[0];
        for c in 0..block1.channels {
            let mean: f64 =
                block1.feature_map(c).iter().map(|&v| v as f64).sum::<f64>() / block1.map_len() as f64;
            if c == 0 {
                assert!(mean > 0.0);
            } else {
                assert_eq!(mean, 0.0, "channel {c}");
            }
        }
        // interior of band 0 sees the full 3x3 average of the input
        let interior = block1.feature_map(0)[5 * 8 + 3] as f64;
        assert!((interior - (1.0 + 0.1 * 3.0)).abs() < 1e-6);
    }

    #[test]
    fn shapes_and_relu() {
        let s = spec(20, 12, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let config = RefNetConfig {
            num_blocks: 3,
            channels: vec![2, 3, 4],
            seed: 9,
            band_filter_mode: false,
        };
        let out = forward(&s, &config, "s").unwrap();
        let dims: Vec<_> = out.records.iter().map(|r| (r.channels, r.height, r.width)).collect();
        assert_eq!(dims, vec![(2, 20, 12), (3, 10, 6), (4, 5, 3)]);
        assert!(out.records.iter().all(|r| r.values.iter().all(|v| *v >= 0.0)));
    }

    #[test]
    fn too_small_input() {
        let s = spec(2, 2, |_, _| 1.0);
        let err = forward(&s, &RefNetConfig::default(), "t").unwrap_err();
        assert!(matches!(err, RefNetError::TooSmall { block: 1, height: 1, width: 1 }));
    }

    #[test]
    fn seeds_change_weights() {
        let a = RefNetConfig {
            seed: 1,
            ..RefNetConfig::default()
        };
        let b = RefNetConfig {
            seed: 2,
            ..RefNetConfig::default()
        };
        assert_ne!(weight_checksum(&a), weight_checksum(&b));
        assert_eq!(weight_checksum(&a), weight_checksum(&a.clone()));
    }

    #[test]
    fn weights_within_fan_in_bound() {
        let w = block_weights(5, 1, 8, 16);
        let s = 1.0 / (72f64).sqrt();
        assert!(w.iter().all(|v| v.abs() <= s));
        assert!(w.iter().any(|v| *v > 0.0) && w.iter().any(|v| *v < 0.0));
    }

    #[test]
    fn rejects_bad_config() {
        let s = spec(8, 8, |_, _| 1.0);
        let config = RefNetConfig {
            num_blocks: 2,
            channels: vec![4],
            ..RefNetConfig::default()
        };
        assert!(matches!(forward(&s, &config, "c"), Err(RefNetError::Config(_))));
    }
}
