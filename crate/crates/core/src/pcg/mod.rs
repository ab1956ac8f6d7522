//! Phonocardiogram preprocessing, folds, noise injection and evaluation.

pub mod filter;
pub mod folds;
pub mod io;
pub mod metrics;
pub mod noise;
pub mod signal;
pub mod synth;

pub use folds::{grouped_kfold, stratified_holdout, stratified_kfold, FoldSplit};
pub use metrics::{compute_metrics, roc_auc, MetricsReport, ReliabilityBins};
pub use noise::inject_noise_snr;
pub use signal::{bandpass, finalize_segment, preprocess_recording, segment, Label, Recording, Rejection, Segment, SEGMENT_LEN};
