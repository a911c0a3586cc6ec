//! Probeable generalization metrics computed from saved layer weights.
//!
//! The crate reads weight tensors from a small binary container, computes
//! per-layer spectral metrics (stable quality, effective rank, Frobenius and
//! spectral norms, optionally after EVBMF low-rank shrinkage), aggregates them
//! per model, and correlates the aggregates with accuracies recorded in a run
//! manifest. Two desk-scale model families generate manifests to test against.
//!
//! Numeric code is generic over [`Real`] (`f32`, `f64`); the aliases below fix
//! the common `f64` instantiations.

pub mod families;
mod linalg;
pub mod lrf;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod spectra;
pub mod stats;
pub mod store;

pub use scalar::{DType, Real};

pub type Matrix = spectra::Matrix<f64>;
pub type Matrix32 = spectra::Matrix<f32>;
pub type Tensor = spectra::WeightTensor<f64>;
pub type Tensor32 = spectra::WeightTensor<f32>;
pub type Spectrum = spectra::SingularSpectrum<f64>;
pub type Spectrum32 = spectra::SingularSpectrum<f32>;
pub type Layer = metrics::LayerMetrics<f64>;
pub type Model = metrics::ModelMetrics<f64>;
pub type Probe = metrics::ModelProbe<f64>;
pub type Evbmf = lrf::EvbmfResult<f64>;

/// Environment variable capping worker threads; `0` or unset means automatic.
pub const THREADS_ENV: &str = "GENPROBE_THREADS";

/// Thread cap from [`THREADS_ENV`]; unparsable values fall back to automatic.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}
