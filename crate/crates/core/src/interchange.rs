//! Activation files and the dataset manifest.
//!
//! Activation file layout (all integers u32 little-endian):
//!
//! ```text
//! "GRAM" | version = 1 | layer count L
//! per layer: layer_id | K | m | n | K*m*n f32 LE values (channel, row, column)
//! ```
//!
//! One file holds every captured layer of a single sample. The manifest is a
//! JSON document listing samples with their split, class label and file path.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ACTIVATION_MAGIC: [u8; 4] = *b"GRAM";
pub const ACTIVATION_VERSION: u32 = 1;

const LAYER_HEADER_BYTES: usize = 16;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"GRAM\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated {what}: expected {expected} bytes, {available} available")]
    Truncated {
        what: &'static str,
        expected: usize,
        available: usize,
    },
    #[error("non-finite value in layer {layer} at offset {offset}")]
    NonFinite { layer: usize, offset: usize },
    #[error("invalid layer {layer}: {reason}")]
    InvalidLayer { layer: usize, reason: String },
    #[error("sample holds no layers")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One layer's feature maps for one sample: `channels` maps of
/// `height x width`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub layer_id: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ActivationRecord {
    pub fn new(
        layer_id: u32,
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
    ) -> Result<Self, FormatError> {
        let record = ActivationRecord {
            layer_id,
            channels,
            height,
            width,
            values,
        };
        record.validate(layer_id as usize)?;
        Ok(record)
    }

    /// Number of values in one flattened feature map.
    pub fn map_len(&self) -> usize {
        self.height * self.width
    }

    /// Flattened feature map `k`.
    pub fn feature_map(&self, k: usize) -> &[f32] {
        let len = self.map_len();
        &self.values[k * len..(k + 1) * len]
    }

    pub fn shape(&self) -> LayerShape {
        LayerShape {
            layer_id: self.layer_id,
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    fn validate(&self, layer: usize) -> Result<(), FormatError> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(FormatError::InvalidLayer {
                layer,
                reason: format!(
                    "zero dimension in K={} m={} n={}",
                    self.channels, self.height, self.width
                ),
            });
        }
        let expected = self.channels * self.height * self.width;
        if self.values.len() != expected {
            return Err(FormatError::InvalidLayer {
                layer,
                reason: format!("{} values, expected {}", self.values.len(), expected),
            });
        }
        if let Some(offset) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { layer, offset });
        }
        Ok(())
    }
}

/// Shape of one layer without its payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub layer_id: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for LayerShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layer {} (K={}, m={}, n={})",
            self.layer_id, self.channels, self.height, self.width
        )
    }
}

/// Every captured layer of one sample, in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleActivations {
    pub sample_id: String,
    pub records: Vec<ActivationRecord>,
}

impl SampleActivations {
    pub fn new(
        sample_id: impl Into<String>,
        records: Vec<ActivationRecord>,
    ) -> Result<Self, FormatError> {
        let sample = SampleActivations {
            sample_id: sample_id.into(),
            records,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn layout(&self) -> Vec<LayerShape> {
        self.records.iter().map(ActivationRecord::shape).collect()
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.records.is_empty() {
            return Err(FormatError::Empty);
        }
        for (i, record) in self.records.iter().enumerate() {
            record.validate(i)?;
            if i > 0 && record.layer_id <= self.records[i - 1].layer_id {
                return Err(FormatError::InvalidLayer {
                    layer: i,
                    reason: format!(
                        "layer id {} does not increase after {}",
                        record.layer_id,
                        self.records[i - 1].layer_id
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Serializes `sample` into `sink`. The sample is validated before any byte
/// is written. Returns the number of bytes written.
pub fn write_activations<W: Write>(
    sample: &SampleActivations,
    mut sink: W,
) -> Result<usize, FormatError> {
    sample.validate()?;
    let bytes = encode(sample);
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(bytes.len())
}

fn encode(sample: &SampleActivations) -> Vec<u8> {
    let payload: usize = sample
        .records
        .iter()
        .map(|r| LAYER_HEADER_BYTES + 4 * r.values.len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(&ACTIVATION_MAGIC);
    out.extend_from_slice(&ACTIVATION_VERSION.to_le_bytes());
    out.extend_from_slice(&(sample.records.len() as u32).to_le_bytes());
    for r in &sample.records {
        for dim in [
            r.layer_id,
            r.channels as u32,
            r.height as u32,
            r.width as u32,
        ] {
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads exactly `len` bytes, reporting how many were available on a short read.
fn read_block<R: Read>(src: &mut R, len: usize, what: &'static str) -> Result<Vec<u8>, FormatError> {
    let mut buf = Vec::with_capacity(len);
    src.by_ref().take(len as u64).read_to_end(&mut buf)?;
    if buf.len() < len {
        return Err(FormatError::Truncated {
            what,
            expected: len,
            available: buf.len(),
        });
    }
    Ok(buf)
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Reads magic, version and layer count.
fn read_preamble<R: Read>(src: &mut R) -> Result<usize, FormatError> {
    let magic = read_block(src, 4, "magic")?;
    if magic != ACTIVATION_MAGIC {
        return Err(FormatError::BadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let head = read_block(src, 8, "header")?;
    let version = le_u32(&head, 0);
    if version != ACTIVATION_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    Ok(le_u32(&head, 4) as usize)
}

fn read_layer_header<R: Read>(src: &mut R, index: usize) -> Result<LayerShape, FormatError> {
    let head = read_block(src, LAYER_HEADER_BYTES, "layer header")?;
    let shape = LayerShape {
        layer_id: le_u32(&head, 0),
        channels: le_u32(&head, 4) as usize,
        height: le_u32(&head, 8) as usize,
        width: le_u32(&head, 12) as usize,
    };
    if shape.channels == 0 || shape.height == 0 || shape.width == 0 {
        return Err(FormatError::InvalidLayer {
            layer: index,
            reason: format!("zero dimension in {shape}"),
        });
    }
    Ok(shape)
}

/// Parses one activation stream. The file carries no sample id, so the caller
/// supplies it.
pub fn read_activations<R: Read>(
    mut src: R,
    sample_id: impl Into<String>,
) -> Result<SampleActivations, FormatError> {
    let layers = read_preamble(&mut src)?;
    if layers == 0 {
        return Err(FormatError::Empty);
    }
    let mut records = Vec::with_capacity(layers);
    for index in 0..layers {
        let shape = read_layer_header(&mut src, index)?;
        let count = shape
            .channels
            .checked_mul(shape.height)
            .and_then(|v| v.checked_mul(shape.width))
            .ok_or_else(|| FormatError::InvalidLayer {
                layer: index,
                reason: format!("element count overflows for {shape}"),
            })?;
        let payload = read_block(&mut src, count * 4, "payload")?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let record = ActivationRecord {
            layer_id: shape.layer_id,
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            values,
        };
        record.validate(index)?;
        records.push(record);
    }
    let sample = SampleActivations {
        sample_id: sample_id.into(),
        records,
    };
    sample.validate()?;
    Ok(sample)
}

/// Reads only the layer headers of a stream, seeking over payloads.
pub fn read_layout<R: Read + Seek>(mut src: R) -> Result<Vec<LayerShape>, FormatError> {
    let layers = read_preamble(&mut src)?;
    let mut shapes = Vec::with_capacity(layers);
    for index in 0..layers {
        let shape = read_layer_header(&mut src, index)?;
        let skip = (shape.channels * shape.height * shape.width * 4) as i64;
        src.seek(SeekFrom::Current(skip))?;
        shapes.push(shape);
    }
    Ok(shapes)
}

pub fn write_activation_file(path: &Path, sample: &SampleActivations) -> Result<usize, FormatError> {
    sample.validate()?;
    let file = File::create(path)?;
    write_activations(sample, BufWriter::new(file))
}

pub fn read_activation_file(path: &Path, sample_id: &str) -> Result<SampleActivations, FormatError> {
    let file = File::open(path)?;
    read_activations(BufReader::new(file), sample_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub label: usize,
    pub path: PathBuf,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("num_classes must be positive")]
    NoClasses,
    #[error("entry {index}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("entry {index}: duplicate sample id {id:?}")]
    DuplicateId { index: usize, id: String },
    #[error("class {class} has no {split} entries")]
    MissingCoverage { class: usize, split: Split },
    #[error("entry {index} ({id}): {source}")]
    Activation {
        index: usize,
        id: String,
        source: FormatError,
    },
    #[error("entry {index} ({id}): layer layout {found:?} differs from {expected:?}")]
    Heterogeneous {
        index: usize,
        id: String,
        expected: Vec<LayerShape>,
        found: Vec<LayerShape>,
    },
}

/// Sample list with split assignment and class labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative entry paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(num_classes: usize, entries: Vec<ManifestEntry>) -> Result<Self, ManifestError> {
        let manifest = DatasetManifest {
            num_classes,
            entries,
            base_dir: PathBuf::new(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, ManifestError> {
        let mut manifest: DatasetManifest = serde_json::from_str(text)?;
        manifest.base_dir = base_dir.to_path_buf();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.num_classes == 0 {
            return Err(ManifestError::NoClasses);
        }
        let mut seen = HashSet::new();
        let mut coverage: HashMap<(usize, Split), usize> = HashMap::new();
        for (index, entry) in self.entries.iter().enumerate() {
            if entry.label >= self.num_classes {
                return Err(ManifestError::LabelOutOfRange {
                    index,
                    label: entry.label,
                    num_classes: self.num_classes,
                });
            }
            if !seen.insert(entry.id.as_str()) {
                return Err(ManifestError::DuplicateId {
                    index,
                    id: entry.id.clone(),
                });
            }
            *coverage.entry((entry.label, entry.split)).or_default() += 1;
        }
        for split in [Split::Train, Split::Validation] {
            for class in 0..self.num_classes {
                if !coverage.contains_key(&(class, split)) {
                    return Err(ManifestError::MissingCoverage { class, split });
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<SampleActivations, FormatError> {
        read_activation_file(&self.resolve(entry), &entry.id)
    }

    /// Reads every entry's layer headers and checks that all samples share
    /// one layout. Returns that layout.
    pub fn probe_layout(&self) -> Result<Vec<LayerShape>, ManifestError> {
        let mut expected: Option<Vec<LayerShape>> = None;
        for (index, entry) in self.entries.iter().enumerate() {
            let wrap = |source: FormatError| ManifestError::Activation {
                index,
                id: entry.id.clone(),
                source,
            };
            let file = File::open(self.resolve(entry)).map_err(|e| wrap(e.into()))?;
            let found = read_layout(BufReader::new(file)).map_err(wrap)?;
            match &expected {
                None => expected = Some(found),
                Some(layout) if *layout != found => {
                    return Err(ManifestError::Heterogeneous {
                        index,
                        id: entry.id.clone(),
                        expected: layout.clone(),
                        found,
                    })
                }
                Some(_) => {}
            }
        }
        Ok(expected.unwrap_or_default())
    }
}

/// Parses and validates a manifest file. Relative entry paths resolve
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
    DatasetManifest::from_json(&text, &base)
}
