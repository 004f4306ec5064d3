//! Per-class calibration: channel bounds from the training split, expected
//! layer deviations from the validation split, and Wasserstein layer scoring.

use std::cmp::Ordering;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::deviation::{layer_deviation_with_floor, DeviationError, DELTA_EPS};
use crate::gram::GramSummary;
use crate::interchange::{LayerShape, Split};

/// Floor on expected validation deviations.
pub const EXPECTED_DEV_FLOOR: f64 = 1e-12;

pub const MODEL_MAGIC: [u8; 4] = *b"GRMM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("class {0} has no training samples")]
    NoTrainSamples(usize),
    #[error("class {0} has no validation samples")]
    NoValidationSamples(usize),
    #[error("sample {id} is from the {found} split, expected {expected}")]
    WrongSplit { id: String, expected: Split, found: Split },
    #[error("sample {id}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { id: String, label: usize, num_classes: usize },
    #[error("sample {id}: layer {layer} has {found} channels, expected {expected}")]
    Heterogeneous {
        id: String,
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("sample {id} has {found} layers, expected {expected}")]
    LayerCount { id: String, expected: usize, found: usize },
    #[error("empty distribution")]
    EmptyDistribution,
    #[error("top_k {top_k} outside 1..={layers}")]
    TopKOutOfRange { top_k: usize, layers: usize },
    #[error(transparent)]
    Deviation(#[from] DeviationError),
    #[error(transparent)]
    Model(#[from] ModelFileError),
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("bad model magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported model version {0}")]
    Version(u32),
    #[error("truncated model file: needed {expected} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        expected: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after model")]
    Trailing(usize),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Gram summaries of one labelled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SummarizedSample {
    pub sample_id: String,
    pub split: Split,
    pub label: usize,
    pub layers: Vec<GramSummary>,
}

/// Per-channel `[lower, upper]` range of normalized correlations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    fn point(values: &[f64]) -> Self {
        Bounds {
            lower: values.to_vec(),
            upper: values.to_vec(),
        }
    }

    fn widen(&mut self, values: &[f64]) {
        for ((lo, hi), &v) in self.lower.iter_mut().zip(self.upper.iter_mut()).zip(values) {
            *lo = lo.min(v);
            *hi = hi.max(v);
        }
    }

    fn absorb(&mut self, other: &Bounds) {
        self.widen(&other.lower);
        self.widen(&other.upper);
    }
}

/// Bounds for every (class, layer) cell, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsTable {
    pub num_classes: usize,
    pub num_layers: usize,
    cells: Vec<Bounds>,
}

impl BoundsTable {
    pub fn get(&self, class: usize, layer: usize) -> &Bounds {
        &self.cells[class * self.num_layers + layer]
    }
}

/// Streaming min/max reduction over training samples. Accumulators built
/// from disjoint chunks can be merged in any order.
#[derive(Debug, Clone)]
pub struct BoundsAccumulator {
    num_classes: usize,
    channels: Option<Vec<usize>>,
    cells: Vec<Option<Bounds>>,
}

impl BoundsAccumulator {
    pub fn new(num_classes: usize) -> Self {
        BoundsAccumulator {
            num_classes,
            channels: None,
            cells: Vec::new(),
        }
    }

    pub fn observe(&mut self, sample: &SummarizedSample) -> Result<(), CalibrationError> {
        if sample.split != Split::Train {
            return Err(CalibrationError::WrongSplit {
                id: sample.sample_id.clone(),
                expected: Split::Train,
                found: sample.split,
            });
        }
        if sample.label >= self.num_classes {
            return Err(CalibrationError::LabelOutOfRange {
                id: sample.sample_id.clone(),
                label: sample.label,
                num_classes: self.num_classes,
            });
        }
        let channels: Vec<usize> = sample.layers.iter().map(|s| s.normalized.len()).collect();
        match &self.channels {
            None => {
                self.cells = vec![None; self.num_classes * channels.len()];
                self.channels = Some(channels);
            }
            Some(expected) => check_channels(&sample.sample_id, expected, &channels)?,
        }
        let layers = sample.layers.len();
        for (l, summary) in sample.layers.iter().enumerate() {
            match &mut self.cells[sample.label * layers + l] {
                Some(b) => b.widen(&summary.normalized),
                slot @ None => *slot = Some(Bounds::point(&summary.normalized)),
            }
        }
        Ok(())
    }

    pub fn merge(mut self, other: BoundsAccumulator) -> Result<Self, CalibrationError> {
        let Some(theirs) = &other.channels else {
            return Ok(self);
        };
        match &self.channels {
            None => return Ok(other),
            Some(ours) => check_channels("<merge>", ours, theirs)?,
        }
        for (mine, their) in self.cells.iter_mut().zip(other.cells) {
            match (mine.as_mut(), their) {
                (Some(a), Some(b)) => a.absorb(&b),
                (None, Some(b)) => *mine = Some(b),
                _ => {}
            }
        }
        Ok(self)
    }

    pub fn finish(self) -> Result<BoundsTable, CalibrationError> {
        let channels = self.channels.ok_or(CalibrationError::NoTrainSamples(0))?;
        let num_layers = channels.len();
        let mut cells = Vec::with_capacity(self.cells.len());
        for (i, cell) in self.cells.into_iter().enumerate() {
            cells.push(cell.ok_or(CalibrationError::NoTrainSamples(i / num_layers.max(1)))?);
        }
        Ok(BoundsTable {
            num_classes: self.num_classes,
            num_layers,
            cells,
        })
    }
}

fn check_channels(id: &str, expected: &[usize], found: &[usize]) -> Result<(), CalibrationError> {
    if expected.len() != found.len() {
        return Err(CalibrationError::LayerCount {
            id: id.to_string(),
            expected: expected.len(),
            found: found.len(),
        });
    }
    if let Some(layer) = (0..expected.len()).find(|&l| expected[l] != found[l]) {
        return Err(CalibrationError::Heterogeneous {
            id: id.to_string(),
            layer,
            expected: expected[layer],
            found: found[layer],
        });
    }
    Ok(())
}

/// Elementwise min and max of the normalized profiles over each class's
/// training samples.
pub fn fit_bounds(train: &[SummarizedSample], num_classes: usize) -> Result<BoundsTable, CalibrationError> {
    let mut acc = BoundsAccumulator::new(num_classes);
    for sample in train {
        acc.observe(sample)?;
    }
    acc.finish()
}

fn check_against(table: &BoundsTable, sample: &SummarizedSample) -> Result<(), CalibrationError> {
    if sample.label >= table.num_classes {
        return Err(CalibrationError::LabelOutOfRange {
            id: sample.sample_id.clone(),
            label: sample.label,
            num_classes: table.num_classes,
        });
    }
    if sample.layers.len() != table.num_layers {
        return Err(CalibrationError::LayerCount {
            id: sample.sample_id.clone(),
            expected: table.num_layers,
            found: sample.layers.len(),
        });
    }
    Ok(())
}

/// Mean own-class layer deviation over the validation split, floored at
/// [`EXPECTED_DEV_FLOOR`]. Indexed `[class][layer]`.
pub fn fit_expected_devs(
    validation: &[SummarizedSample],
    bounds: &BoundsTable,
) -> Result<Vec<Vec<f64>>, CalibrationError> {
    let mut sums = vec![vec![0.0; bounds.num_layers]; bounds.num_classes];
    let mut counts = vec![0usize; bounds.num_classes];
    for sample in validation {
        if sample.split != Split::Validation {
            return Err(CalibrationError::WrongSplit {
                id: sample.sample_id.clone(),
                expected: Split::Validation,
                found: sample.split,
            });
        }
        check_against(bounds, sample)?;
        counts[sample.label] += 1;
        for (l, summary) in sample.layers.iter().enumerate() {
            sums[sample.label][l] +=
                layer_deviation_with_floor(summary, bounds.get(sample.label, l), DELTA_EPS)?;
        }
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(CalibrationError::NoValidationSamples(class));
    }
    Ok(sums
        .into_iter()
        .zip(&counts)
        .map(|(row, &n)| {
            row.into_iter()
                .map(|s| (s / n as f64).max(EXPECTED_DEV_FLOOR))
                .collect()
        })
        .collect())
}

/// Exact 1-Wasserstein distance between two empirical distributions: the
/// integral of `|F_a - F_b|`, walked over the merged sorted support.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, CalibrationError> {
    if a.is_empty() || b.is_empty() {
        return Err(CalibrationError::EmptyDistribution);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut x = a[0].min(b[0]);
    let mut area = 0.0;
    while i < na || j < nb {
        let next = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        // F_a - F_b on [x, next), as an exact integer ratio
        let gap = (i * nb).abs_diff(j * na) as f64 / (na * nb) as f64;
        area += gap * (next - x);
        x = next;
        while i < na && a[i] == x {
            i += 1;
        }
        while j < nb && b[j] == x {
            j += 1;
        }
    }
    Ok(area)
}

/// Wasserstein separation of one layer, per class and averaged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerScore {
    pub layer_id: u32,
    pub per_class: Vec<f64>,
    pub aggregate: f64,
}

/// For each layer and class, compares the layer deviations of the class's
/// own samples with those of every other class, both measured against the
/// class's bounds. The layer score is the mean over classes.
pub fn score_layers(
    samples: &[SummarizedSample],
    bounds: &BoundsTable,
) -> Result<Vec<LayerScore>, CalibrationError> {
    for s in samples {
        check_against(bounds, s)?;
    }
    let layer_ids: Vec<u32> = match samples.first() {
        Some(s) => s.layers.iter().map(|g| g.layer_id).collect(),
        None => return Err(CalibrationError::EmptyDistribution),
    };
    let mut scores = Vec::with_capacity(bounds.num_layers);
    for (l, &layer_id) in layer_ids.iter().enumerate() {
        let mut per_class = Vec::with_capacity(bounds.num_classes);
        for c in 0..bounds.num_classes {
            let mut own = Vec::new();
            let mut rest = Vec::new();
            for s in samples {
                let d = layer_deviation_with_floor(&s.layers[l], bounds.get(c, l), DELTA_EPS)?;
                if s.label == c {
                    own.push(d);
                } else {
                    rest.push(d);
                }
            }
            per_class.push(if own.is_empty() || rest.is_empty() {
                0.0
            } else {
                wasserstein_1d(&own, &rest)?
            });
        }
        let aggregate = per_class.iter().sum::<f64>() / per_class.len() as f64;
        scores.push(LayerScore {
            layer_id,
            per_class,
            aggregate,
        });
    }
    Ok(scores)
}

/// Positions of the `top_k` highest-scoring layers, ties to the lower
/// position, returned ascending.
pub fn select_layers(scores: &[LayerScore], top_k: usize) -> Result<Vec<usize>, CalibrationError> {
    if top_k == 0 || top_k > scores.len() {
        return Err(CalibrationError::TopKOutOfRange {
            top_k,
            layers: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&x, &y| {
        scores[y]
            .aggregate
            .partial_cmp(&scores[x].aggregate)
            .unwrap_or(Ordering::Equal)
            .then(x.cmp(&y))
    });
    let mut picked = order[..top_k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn default_top_k(layers: usize) -> usize {
    layers.div_ceil(2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassLayerStats {
    pub class: usize,
    pub layer_id: u32,
    pub bounds: Bounds,
    pub expected_dev: f64,
}

/// Everything inference needs: per (class, layer) stats, the selected
/// layers and the scores that chose them.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    pub num_classes: usize,
    pub layers: Vec<LayerShape>,
    pub top_k: usize,
    /// Positions into `layers`, ascending.
    pub selected: Vec<usize>,
    pub delta_eps: f64,
    pub expected_dev_floor: f64,
    /// Class-major, `num_classes * layers.len()` cells.
    pub stats: Vec<ClassLayerStats>,
    pub scores: Vec<LayerScore>,
}

impl CalibrationModel {
    pub fn stats(&self, class: usize, layer: usize) -> &ClassLayerStats {
        &self.stats[class * self.layers.len() + layer]
    }

    pub fn selected_layer_ids(&self) -> Vec<u32> {
        self.selected.iter().map(|&l| self.layers[l].layer_id).collect()
    }

    pub fn assemble(
        layers: Vec<LayerShape>,
        bounds: BoundsTable,
        expected: Vec<Vec<f64>>,
        scores: Vec<LayerScore>,
        top_k: usize,
    ) -> Result<Self, CalibrationError> {
        let selected = select_layers(&scores, top_k)?;
        let mut stats = Vec::with_capacity(bounds.cells.len());
        // a short `expected` leaves stats missing, which validate rejects
        for (c, row) in expected.iter().enumerate().take(bounds.num_classes) {
            for ((l, shape), &expected_dev) in layers.iter().enumerate().zip(row) {
                stats.push(ClassLayerStats {
                    class: c,
                    layer_id: shape.layer_id,
                    bounds: bounds.get(c, l).clone(),
                    expected_dev,
                });
            }
        }
        let model = CalibrationModel {
            num_classes: bounds.num_classes,
            layers,
            top_k,
            selected,
            delta_eps: DELTA_EPS,
            expected_dev_floor: EXPECTED_DEV_FLOOR,
            stats,
            scores,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ModelFileError> {
        let invalid = |m: String| Err(ModelFileError::Invalid(m));
        let l = self.layers.len();
        if self.num_classes == 0 || l == 0 {
            return invalid("model needs at least one class and one layer".into());
        }
        if self.selected.is_empty() || self.selected.len() != self.top_k {
            return invalid(format!("{} selected layers for top_k {}", self.selected.len(), self.top_k));
        }
        if self.selected.windows(2).any(|w| w[0] >= w[1]) || self.selected.iter().any(|&s| s >= l) {
            return invalid("selected layers not ascending positions".into());
        }
        if self.stats.len() != self.num_classes * l || self.scores.len() != l {
            return invalid("stats or scores missing".into());
        }
        for s in &self.stats {
            let k = self.layers.iter().find(|x| x.layer_id == s.layer_id).map(|x| x.channels);
            if k != Some(s.bounds.lower.len()) || s.bounds.upper.len() != s.bounds.lower.len() {
                return invalid(format!("class {} layer {}: channel count mismatch", s.class, s.layer_id));
            }
            for (k, (lo, hi)) in s.bounds.lower.iter().zip(&s.bounds.upper).enumerate() {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return invalid(format!(
                        "class {} layer {} channel {k}: bounds [{lo}, {hi}]",
                        s.class, s.layer_id
                    ));
                }
            }
            if !(s.expected_dev.is_finite() && s.expected_dev >= self.expected_dev_floor) {
                return invalid(format!(
                    "class {} layer {}: expected deviation {}",
                    s.class, s.layer_id, s.expected_dev
                ));
            }
        }
        for score in &self.scores {
            if score.per_class.len() != self.num_classes
                || !score.aggregate.is_finite()
                || score.aggregate < 0.0
                || score.per_class.iter().any(|d| !d.is_finite() || *d < 0.0)
            {
                return invalid(format!("layer {}: bad score", score.layer_id));
            }
        }
        Ok(())
    }

    /// Model file layout (little-endian): "GRMM" | version u32 | C u32 |
    /// L u32 | top_k u32 | per layer: id, K, m, n as u32 | selected layer ids
    /// u32 x top_k | delta eps f64 | expected-dev floor f64 | per (class,
    /// layer): K u32, lower f64 x K, upper f64 x K, expected_dev f64 | per
    /// layer: W_d f64 x C, aggregate f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let u32s = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        let f64s = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(&MODEL_MAGIC);
        u32s(&mut out, MODEL_VERSION as usize);
        u32s(&mut out, self.num_classes);
        u32s(&mut out, self.layers.len());
        u32s(&mut out, self.top_k);
        for s in &self.layers {
            for v in [s.layer_id as usize, s.channels, s.height, s.width] {
                u32s(&mut out, v);
            }
        }
        for id in self.selected_layer_ids() {
            u32s(&mut out, id as usize);
        }
        f64s(&mut out, self.delta_eps);
        f64s(&mut out, self.expected_dev_floor);
        for s in &self.stats {
            u32s(&mut out, s.bounds.lower.len());
            for &v in s.bounds.lower.iter().chain(&s.bounds.upper) {
                f64s(&mut out, v);
            }
            f64s(&mut out, s.expected_dev);
        }
        for score in &self.scores {
            for &d in &score.per_class {
                f64s(&mut out, d);
            }
            f64s(&mut out, score.aggregate);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelFileError> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MODEL_MAGIC {
            return Err(ModelFileError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(ModelFileError::Version(version));
        }
        let num_classes = r.u32()? as usize;
        let num_layers = r.u32()? as usize;
        let top_k = r.u32()? as usize;
        let mut layers = Vec::with_capacity(num_layers.min(1 << 16));
        for _ in 0..num_layers {
            layers.push(LayerShape {
                layer_id: r.u32()?,
                channels: r.u32()? as usize,
                height: r.u32()? as usize,
                width: r.u32()? as usize,
            });
        }
        let mut selected = Vec::with_capacity(top_k.min(1 << 16));
        for _ in 0..top_k {
            let id = r.u32()?;
            let pos = layers
                .iter()
                .position(|s| s.layer_id == id)
                .ok_or_else(|| ModelFileError::Invalid(format!("selected layer {id} not in layer table")))?;
            selected.push(pos);
        }
        let delta_eps = r.f64()?;
        let expected_dev_floor = r.f64()?;
        let mut stats = Vec::new();
        for class in 0..num_classes {
            for shape in &layers {
                let k = r.u32()? as usize;
                let lower = r.f64s(k)?;
                let upper = r.f64s(k)?;
                let expected_dev = r.f64()?;
                stats.push(ClassLayerStats {
                    class,
                    layer_id: shape.layer_id,
                    bounds: Bounds { lower, upper },
                    expected_dev,
                });
            }
        }
        let mut scores = Vec::with_capacity(num_layers);
        for shape in &layers {
            let per_class = r.f64s(num_classes)?;
            let aggregate = r.f64()?;
            scores.push(LayerScore {
                layer_id: shape.layer_id,
                per_class,
                aggregate,
            });
        }
        if r.pos != bytes.len() {
            return Err(ModelFileError::Trailing(bytes.len() - r.pos));
        }
        let model = CalibrationModel {
            num_classes,
            layers,
            top_k,
            selected,
            delta_eps,
            expected_dev_floor,
            stats,
            scores,
        };
        model.validate()?;
        Ok(model)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ModelFileError::Truncated {
                offset: self.pos,
                expected: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelFileError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelFileError> {
        let raw = self.take(n.checked_mul(8).ok_or(ModelFileError::Invalid("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save_model(model: &CalibrationModel, path: &Path) -> Result<(), ModelFileError> {
    model.validate()?;
    fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CalibrationModel, ModelFileError> {
    CalibrationModel::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(split: Split, label: usize, layers: Vec<Vec<f64>>) -> SummarizedSample {
        SummarizedSample {
            sample_id: format!("{split}-{label}"),
            split,
            label,
            layers: layers
                .into_iter()
                .enumerate()
                .map(|(l, v)| GramSummary {
                    layer_id: l as u32,
                    raw: v.clone(),
                    normalized: v,
                })
                .collect(),
        }
    }

    #[test]
    fn single_sample_bounds_are_points() {
        let train = vec![
            sample(Split::Train, 0, vec![vec![0.0, 1.0]]),
            sample(Split::Train, 1, vec![vec![1.0, 0.3]]),
        ];
        let t = fit_bounds(&train, 2).unwrap();
        assert_eq!(t.get(0, 0).lower, vec![0.0, 1.0]);
        assert_eq!(t.get(0, 0).upper, vec![0.0, 1.0]);
        assert_eq!(t.get(1, 0).lower, vec![1.0, 0.3]);
    }

    #[test]
    fn elementwise_min_max() {
        let train = vec![
            sample(Split::Train, 0, vec![vec![0.0, 1.0]]),
            sample(Split::Train, 0, vec![vec![0.5, 0.2]]),
        ];
        let t = fit_bounds(&train, 1).unwrap();
        assert_eq!(t.get(0, 0).lower, vec![0.0, 0.2]);
        assert_eq!(t.get(0, 0).upper, vec![0.5, 1.0]);
    }

    #[test]
    fn missing_class_in_train() {
        let train = vec![sample(Split::Train, 0, vec![vec![0.0, 1.0]])];
        assert!(matches!(fit_bounds(&train, 2), Err(CalibrationError::NoTrainSamples(1))));
    }

    #[test]
    fn train_bounds_reject_validation_samples() {
        let train = vec![sample(Split::Validation, 0, vec![vec![0.0, 1.0]])];
        assert!(matches!(fit_bounds(&train, 1), Err(CalibrationError::WrongSplit { .. })));
    }

    #[test]
    fn expected_dev_examples() {
        let train = vec![sample(Split::Train, 0, vec![vec![0.0, 0.5], vec![0.2, 0.5]])];
        let t = fit_bounds(&train, 1).unwrap();
        // inside bounds: floored
        let e = fit_expected_devs(&[sample(Split::Validation, 0, vec![vec![0.0, 0.5], vec![0.2, 0.5]])], &t).unwrap();
        assert_eq!(e[0], vec![EXPECTED_DEV_FLOOR, EXPECTED_DEV_FLOOR]);
        // one channel above 0.5 by 0.1
        let e = fit_expected_devs(&[sample(Split::Validation, 0, vec![vec![0.0, 0.6], vec![0.2, 0.5]])], &t).unwrap();
        assert!((e[0][0] - 0.2).abs() < 1e-12);
        // mean of 0.2 and 0.4
        let val = vec![
            sample(Split::Validation, 0, vec![vec![0.0, 0.6], vec![0.2, 0.5]]),
            sample(Split::Validation, 0, vec![vec![0.0, 0.7], vec![0.2, 0.5]]),
        ];
        let e = fit_expected_devs(&val, &t).unwrap();
        assert!((e[0][0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn expected_dev_needs_every_class() {
        let train = vec![
            sample(Split::Train, 0, vec![vec![0.0, 1.0]]),
            sample(Split::Train, 1, vec![vec![1.0, 0.0]]),
        ];
        let t = fit_bounds(&train, 2).unwrap();
        let val = vec![sample(Split::Validation, 0, vec![vec![0.0, 1.0]])];
        assert!(matches!(
            fit_expected_devs(&val, &t),
            Err(CalibrationError::NoValidationSamples(1))
        ));
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[0.3, 0.1], &[0.1, 0.3]).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), 0.5);
        assert!(matches!(wasserstein_1d(&[], &[1.0]), Err(CalibrationError::EmptyDistribution)));
    }

    #[test]
    fn wasserstein_unequal_sizes() {
        // F_a - F_b: on [0,1) 1 - 1/3, on [1,2) 1 - 2/3
        let w = wasserstein_1d(&[0.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!((w - 1.0).abs() < 1e-15);
    }

    fn scores(values: &[f64]) -> Vec<LayerScore> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| LayerScore {
                layer_id: i as u32,
                per_class: vec![v],
                aggregate: v,
            })
            .collect()
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_layers(&scores(&[0.1, 0.9, 0.5]), 2).unwrap(), vec![1, 2]);
        assert_eq!(select_layers(&scores(&[0.1, 0.9, 0.5]), 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_layers(&scores(&[0.5, 0.5]), 1).unwrap(), vec![0]);
        assert!(matches!(
            select_layers(&scores(&[0.5, 0.5]), 3),
            Err(CalibrationError::TopKOutOfRange { top_k: 3, layers: 2 })
        ));
        assert!(select_layers(&scores(&[0.5]), 0).is_err());
    }

    #[test]
    fn default_top_k_is_half_rounded_up() {
        assert_eq!(default_top_k(1), 1);
        assert_eq!(default_top_k(3), 2);
        assert_eq!(default_top_k(4), 2);
    }

    #[test]
    fn all_zero_deviation_layer_scores_zero() {
        let train = vec![
            sample(Split::Train, 0, vec![vec![0.0, 0.0]]),
            sample(Split::Train, 1, vec![vec![0.0, 0.0]]),
        ];
        let t = fit_bounds(&train, 2).unwrap();
        let val = vec![
            sample(Split::Validation, 0, vec![vec![0.0, 0.0]]),
            sample(Split::Validation, 1, vec![vec![0.0, 0.0]]),
        ];
        let s = score_layers(&val, &t).unwrap();
        assert_eq!(s[0].aggregate, 0.0);
    }

    fn tiny_model() -> CalibrationModel {
        let train = vec![
            sample(Split::Train, 0, vec![vec![0.0, 1.0], vec![1.0, 0.0, 0.5]]),
            sample(Split::Train, 0, vec![vec![0.2, 1.0], vec![1.0, 0.0, 0.4]]),
            sample(Split::Train, 1, vec![vec![1.0, 0.0], vec![0.0, 1.0, 0.5]]),
        ];
        let val = vec![
            sample(Split::Validation, 0, vec![vec![0.3, 1.0], vec![1.0, 0.0, 0.6]]),
            sample(Split::Validation, 1, vec![vec![1.0, 0.1], vec![0.0, 1.0, 0.7]]),
        ];
        let t = fit_bounds(&train, 2).unwrap();
        let e = fit_expected_devs(&val, &t).unwrap();
        let s = score_layers(&val, &t).unwrap();
        let layers = vec![
            LayerShape {
                layer_id: 0,
                channels: 2,
                height: 1,
                width: 1,
            },
            LayerShape {
                layer_id: 1,
                channels: 3,
                height: 1,
                width: 1,
            },
        ];
        CalibrationModel::assemble(layers, t, e, s, 1).unwrap()
    }

    #[test]
    fn model_round_trip() {
        let m = tiny_model();
        assert_eq!(CalibrationModel::from_bytes(&m.to_bytes()).unwrap(), m);
    }

    #[test]
    fn model_version_rejected() {
        let mut bytes = tiny_model().to_bytes();
        bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(
            CalibrationModel::from_bytes(&bytes),
            Err(ModelFileError::Version(999))
        ));
    }

    #[test]
    fn model_truncation_rejected() {
        let bytes = tiny_model().to_bytes();
        assert!(matches!(
            CalibrationModel::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ModelFileError::Truncated { .. })
        ));
    }

    #[test]
    fn tampered_bounds_rejected() {
        let m = tiny_model();
        let mut bytes = m.to_bytes();
        // first stats cell: header is 4*5 + 16*L + 4*top_k + 16, then K u32
        let first_lower = 20 + 16 * m.layers.len() + 4 * m.top_k + 16 + 4;
        bytes[first_lower..first_lower + 8].copy_from_slice(&5.0f64.to_le_bytes());
        match CalibrationModel::from_bytes(&bytes) {
            Err(ModelFileError::Invalid(msg)) => assert!(msg.contains("bounds"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
