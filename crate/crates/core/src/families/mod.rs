//! Desk-scale model families: synthetic spectra with planted
//! metric-accuracy links, and a small MLP trained on Gaussian blobs whose
//! weights are saved after every epoch.

mod blobs;
mod grid;
mod synth;
mod toy;

use thiserror::Error;

use crate::metrics::MetricsError;
use crate::store::{RunRecord, StoreError};

pub use blobs::{generate_blobs, Dataset};
pub use grid::{grid_family, GridOutcome, GridSpec, MAX_GRID_CELLS};
pub use synth::{planted_effective_rank_aggregate, synth_family, Link, SpectrumFamilySpec, SYNTH_TRAIN_ACCURACY};
pub use toy::{train_toy, Mlp, ToyTrainConfig, INPUT_DIM, N_CLASSES};

#[derive(Debug, Error)]
pub enum FamilyError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training loss became non-finite during epoch {epoch}")]
    DivergenceDetected {
        epoch: u32,
        /// Records of the epochs completed before divergence.
        records: Vec<RunRecord>,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
