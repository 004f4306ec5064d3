//! Gram matrices of feature maps and the per-layer correlation profile.
//!
//! For a layer with `K` feature maps the profile is the vector of Gram row
//! sums, min-max scaled to `[0, 1]`.

use rayon::prelude::*;
use thiserror::Error;

use crate::interchange::{ActivationRecord, SampleActivations};

#[derive(Debug, Error, PartialEq)]
pub enum GramError {
    #[error("non-finite Gram entry in layer {layer} for channels ({i}, {j})")]
    NonFinite { layer: u32, i: usize, j: usize },
    #[error("matrix is not square: {rows} rows for {len} entries")]
    NotSquare { rows: usize, len: usize },
    #[error("non-finite raw correlation at channel {0}")]
    NonFiniteRaw(usize),
}

/// Symmetric `dim x dim` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl GramMatrix {
    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self, GramError> {
        if data.len() != dim * dim {
            return Err(GramError::NotSquare {
                rows: dim,
                len: data.len(),
            });
        }
        Ok(GramMatrix { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `F F^T` over `rows` flattened maps of length `len`, stored back to back.
/// Each upper-triangle entry is a sequential 64-bit dot product mirrored into
/// the lower triangle.
pub fn gram_from_maps(
    layer: u32,
    rows: usize,
    len: usize,
    values: &[f64],
) -> Result<GramMatrix, GramError> {
    let mut data = vec![0.0; rows * rows];
    for i in 0..rows {
        let vi = &values[i * len..(i + 1) * len];
        for j in i..rows {
            let vj = &values[j * len..(j + 1) * len];
            let dot: f64 = vi.iter().zip(vj).map(|(a, b)| a * b).sum();
            if !dot.is_finite() {
                return Err(GramError::NonFinite { layer, i, j });
            }
            data[i * rows + j] = dot;
            data[j * rows + i] = dot;
        }
    }
    Ok(GramMatrix { dim: rows, data })
}

pub fn gram_matrix(record: &ActivationRecord) -> Result<GramMatrix, GramError> {
    let values: Vec<f64> = record.values.iter().map(|&v| v as f64).collect();
    gram_from_maps(record.layer_id, record.channels, record.map_len(), &values)
}

/// Row sums of the Gram matrix: accumulated correlation of each map with
/// every map of the layer.
pub fn accumulate(gram: &GramMatrix) -> Result<Vec<f64>, GramError> {
    (0..gram.dim)
        .map(|k| {
            let s: f64 = gram.row(k).iter().sum();
            if s.is_finite() {
                Ok(s)
            } else {
                Err(GramError::NonFiniteRaw(k))
            }
        })
        .collect()
}

/// Min-max scaling to `[0, 1]`. A constant vector maps to all zeros.
pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if raw.is_empty() || span.is_nan() || span <= 0.0 {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Correlation profile of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSummary {
    pub layer_id: u32,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

pub fn summarize_record(record: &ActivationRecord) -> Result<GramSummary, GramError> {
    let raw = accumulate(&gram_matrix(record)?)?;
    let normalized = normalize(&raw);
    Ok(GramSummary {
        layer_id: record.layer_id,
        raw,
        normalized,
    })
}

/// Summaries for every layer of `sample`, in layer order.
pub fn summarize_sample(sample: &SampleActivations) -> Result<Vec<GramSummary>, GramError> {
    sample.records.par_iter().map(summarize_record).collect()
}
