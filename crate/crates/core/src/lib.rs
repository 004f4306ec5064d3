//! Gram-matrix deviation classifier.
//!
//! Layer activations of a CNN are reduced to per-channel accumulated Gram
//! correlations, min-max scaled per layer. Calibration records, for every
//! class and layer, the per-channel range seen on training samples and the
//! mean out-of-range deviation on validation samples. Layers are ranked by
//! how well their deviations separate each class from the rest (1-D
//! Wasserstein distance), and a sample is assigned the class with the
//! smallest normalized total deviation over the selected layers.
//!
//! Modules:
//! - [`interchange`]: activation file format and dataset manifest
//! - [`audio`]: resampling, STFT and log-mel front-end
//! - [`refnet`]: deterministic reference CNN
//! - [`gram`]: Gram matrices and correlation profiles
//! - [`calibration`]: bounds, expected deviations, layer scoring, model file
//! - [`deviation`]: deviation scores, prediction and metrics
//! - [`harness`]: synthetic data and end-to-end runs

pub mod audio;
pub mod calibration;
pub mod deviation;
pub mod gram;
pub mod harness;
pub mod interchange;
pub mod refnet;

pub use calibration::{
    fit_bounds, fit_expected_devs, load_model, save_model, score_layers, select_layers, wasserstein_1d,
    CalibrationModel, SummarizedSample,
};
pub use deviation::{delta, layer_deviation, predict, total_deviation, DeviationVector, Metrics};
pub use gram::{accumulate, gram_matrix, normalize, summarize_sample, GramSummary};
pub use interchange::{
    load_manifest, read_activations, write_activations, ActivationRecord, DatasetManifest, SampleActivations, Split,
};
