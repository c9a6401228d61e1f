//! Label encoding, sample weighting, windowing, augmentation, preprocessing,
//! fold planning and on-disk formats.

mod augment;
mod checkpoint;
mod folds;
mod preprocess;
mod store;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamSpec, CHECKPOINT_SCHEMA};
pub use folds::{load_fold_plan, save_fold_plan, split_folds, split_with_holdout, Fold, FoldPatient, FoldPlan, PatientMeta};
pub use preprocess::{preprocess, PreprocessConfig, Preprocessed};
pub use store::{list_volumes, load_sweep, save_sweep, SweepManifest, SWEEP_SCHEMA};

pub use crate::labels::{encode_consensus, ClassDistribution};

use std::ops::Range;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: truncated payload, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: checksum mismatch, manifest records {expected:08x} but payload hashes to {actual:08x}")]
    Corrupt { path: PathBuf, expected: u32, actual: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class proportion {index} is {value}; every class needs a positive share")]
    ZeroProportion { index: usize, value: f64 },
    #[error("volume has {frames} frames, shorter than the window of {window}")]
    ShortVolume { frames: usize, window: usize },
    #[error("cannot split {patients} patients into {folds} folds")]
    TooFewPatients { patients: usize, folds: usize },
    #[error("image {found} too small for {needed}")]
    ImageTooSmall { needed: String, found: String },
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}

/// Inverse-frequency weights normalised to mean 1.
pub fn class_weights(proportions: [f64; 3]) -> Result<[f64; 3], DataError> {
    if let Some((index, &value)) = proportions.iter().enumerate().find(|(_, p)| !(**p > 0.0)) {
        return Err(DataError::ZeroProportion { index, value });
    }
    let inv = proportions.map(|p| 1.0 / p);
    let mean = inv.iter().sum::<f64>() / 3.0;
    Ok(inv.map(|w| w / mean))
}

/// Number of frames in each sequence sample.
pub const WINDOW: usize = 10;

/// Frame ranges of every stride-1 window of `len` frames; one per frame index
/// `≥ len − 1`.
pub fn make_windows(n_frames: usize, len: usize) -> Result<Vec<Range<usize>>, DataError> {
    if len == 0 || n_frames < len {
        return Err(DataError::ShortVolume {
            frames: n_frames,
            window: len,
        });
    }
    Ok((len - 1..n_frames).map(|end| end + 1 - len..end + 1).collect())
}
