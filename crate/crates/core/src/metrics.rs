//! Layer-level quality metrics and their model-level aggregations.
//!
//! | layer metric      | model aggregate (over `d` layers)             | id     |
//! |-------------------|-----------------------------------------------|--------|
//! | stable quality    | `(prod sq_i)^(1/d)`                            | `SQ_p` |
//! | effective rank    | `ln sqrt(sum er_i^2 / d)`                      | `E_L2` |
//! | Frobenius norm    | `ln sqrt(d (prod fro_i^2)^(1/d))`              | `F_p`  |
//! | spectral norm     | `ln sqrt(d (prod spec_i^2)^(1/d))`             | `S_p`  |
//!
//! Effective rank is the Shannon entropy `-sum p ln p` of the normalized
//! singular values, i.e. non-negative. Logarithms are natural throughout.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::Serialize;
use thiserror::Error;

use crate::lrf::{self, LrfError};
use crate::scalar::Real;
use crate::spectra::{self, SingularSpectrum, SpectraError, WeightTensor};

/// Floor applied to each layer's effective rank before the L2 aggregation.
pub const EFFECTIVE_RANK_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("spectrum has no value above its zero tolerance")]
    DegenerateSpectrum,
    #[error("no non-degenerate layer to aggregate")]
    EmptyModel,
    #[error("layer {0} has a zero norm; log aggregation undefined")]
    DegenerateNorm(String),
    #[error("no tensor passes the layer filter")]
    NoProbeableLayers,
    #[error("unknown metric id {0:?}")]
    UnknownMetric(String),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error(transparent)]
    Lrf(#[from] LrfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricKind {
    StableQuality,
    EffectiveRank,
    Frobenius,
    Spectral,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::StableQuality,
        MetricKind::EffectiveRank,
        MetricKind::Frobenius,
        MetricKind::Spectral,
    ];

    /// Aggregated identifier, e.g. `E_L2`.
    pub fn id(self) -> &'static str {
        match self {
            MetricKind::StableQuality => "SQ_p",
            MetricKind::EffectiveRank => "E_L2",
            MetricKind::Frobenius => "F_p",
            MetricKind::Spectral => "S_p",
        }
    }
}

/// Model-level metric identifier: an aggregate, optionally LRF-preprocessed.
/// Serialized as `E_L2` or `lrf.E_L2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MetricId {
    pub kind: MetricKind,
    pub lrf: bool,
}

impl MetricId {
    pub const fn new(kind: MetricKind, lrf: bool) -> Self {
        Self { kind, lrf }
    }

    pub fn all(lrf: bool) -> Vec<MetricId> {
        MetricKind::ALL.iter().map(|&k| MetricId::new(k, lrf)).collect()
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lrf {
            write!(f, "lrf.{}", self.kind.id())
        } else {
            f.write_str(self.kind.id())
        }
    }
}

impl FromStr for MetricId {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lrf, base) = match s.strip_prefix("lrf.") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        MetricKind::ALL
            .iter()
            .find(|k| k.id() == base)
            .map(|&kind| MetricId { kind, lrf })
            .ok_or_else(|| MetricsError::UnknownMetric(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMetrics<T> {
    pub layer_name: String,
    /// Stable quality, in (0, pi/2).
    pub sq: T,
    /// Effective rank entropy in nats.
    pub er: T,
    pub fro: T,
    pub spec: T,
    pub lrf_applied: bool,
    /// True when no unfolding had a usable spectrum; metric fields are zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelMetrics<T> {
    pub q_sq_p: T,
    pub q_e_l2: T,
    pub q_f_p: T,
    pub q_s_p: T,
    /// Number of layers that entered the aggregation.
    pub depth: usize,
    pub lrf_applied: bool,
}

impl<T: Real> ModelMetrics<T> {
    pub fn value(&self, kind: MetricKind) -> T {
        match kind {
            MetricKind::StableQuality => self.q_sq_p,
            MetricKind::EffectiveRank => self.q_e_l2,
            MetricKind::Frobenius => self.q_f_p,
            MetricKind::Spectral => self.q_s_p,
        }
    }
}

fn require_rank<T: Real>(s: &SingularSpectrum<T>) -> Result<&[T], MetricsError> {
    let nz = s.nonzero();
    if nz.is_empty() {
        Err(MetricsError::DegenerateSpectrum)
    } else {
        Ok(nz)
    }
}

/// `arctan(stable_rank / condition_number)` over the values above the zero
/// tolerance.
pub fn stable_quality<T: Real>(s: &SingularSpectrum<T>) -> Result<T, MetricsError> {
    let nz = require_rank(s)?;
    let top = nz[0];
    let bottom = nz[nz.len() - 1];
    let stable_rank = nz.iter().map(|&v| v * v).sum::<T>() / (top * top);
    let condition = top / bottom;
    Ok((stable_rank / condition).atan())
}

/// Shannon entropy (nats) of the normalized nonzero singular values.
pub fn effective_rank<T: Real>(s: &SingularSpectrum<T>) -> Result<T, MetricsError> {
    let nz = require_rank(s)?;
    let total: T = nz.iter().copied().sum();
    let h = nz
        .iter()
        .map(|&v| v / total)
        .filter(|&p| p > T::zero())
        .fold(T::zero(), |acc, p| acc - p * p.ln());
    Ok(h.max(T::zero()))
}

/// `sqrt(sum sigma_k^2)` over all values.
pub fn frobenius_norm<T: Real>(s: &SingularSpectrum<T>) -> T {
    s.values().iter().map(|&v| v * v).sum::<T>().sqrt()
}

pub fn spectral_norm<T: Real>(s: &SingularSpectrum<T>) -> T {
    s.max()
}

/// Whether a tensor is a weight matrix or convolution kernel with both
/// leading dimensions above one. Biases and normalization parameters fail.
pub fn is_probeable(shape: &[usize]) -> bool {
    matches!(shape.len(), 2 | 4) && shape[0] > 1 && shape[1] > 1
}

/// Per-layer metrics: unfold, take spectra, optionally shrink them with
/// EVBMF, and average the metrics arithmetically across unfoldings.
pub fn probe_layer<T: Real>(t: &WeightTensor<T>, use_lrf: bool) -> Result<LayerMetrics<T>, MetricsError> {
    let mut sums = [T::zero(); 4];
    let mut used = 0usize;
    for m in spectra::unfold(t)? {
        let raw = spectra::singular_values(&m)?;
        let s = if use_lrf {
            match lrf::shrink_spectrum(&raw) {
                Ok(s) => s,
                Err(LrfError::EmptyResult | LrfError::DegenerateSpectrum) => continue,
                Err(e) => return Err(e.into()),
            }
        } else {
            raw
        };
        if s.numerical_rank() == 0 {
            continue;
        }
        sums[0] += stable_quality(&s)?;
        sums[1] += effective_rank(&s)?;
        sums[2] += frobenius_norm(&s);
        sums[3] += spectral_norm(&s);
        used += 1;
    }
    let degenerate = used == 0;
    let [sq, er, fro, spec] = if degenerate {
        [T::zero(); 4]
    } else {
        let n = T::from_usize_lossy(used);
        sums.map(|v| v / n)
    };
    Ok(LayerMetrics {
        layer_name: t.name().to_string(),
        sq,
        er,
        fro,
        spec,
        lrf_applied: use_lrf,
        degenerate,
    })
}

/// Depth-normalized aggregation over the non-degenerate layers.
pub fn aggregate_model<T: Real>(layers: &[LayerMetrics<T>]) -> Result<ModelMetrics<T>, MetricsError> {
    let included: Vec<&LayerMetrics<T>> = layers.iter().filter(|l| !l.degenerate).collect();
    if included.is_empty() {
        return Err(MetricsError::EmptyModel);
    }
    if let Some(l) = included.iter().find(|l| l.fro <= T::zero() || l.spec <= T::zero()) {
        return Err(MetricsError::DegenerateNorm(l.layer_name.clone()));
    }
    let d = T::from_usize_lossy(included.len());
    let half_ln_d = T::lit(0.5) * d.ln();
    let mean_ln = |f: fn(&LayerMetrics<T>) -> T| included.iter().map(|l| f(l).ln()).sum::<T>() / d;
    let floor = T::lit(EFFECTIVE_RANK_FLOOR);
    let er_ms = included.iter().map(|l| l.er.max(floor).powi(2)).sum::<T>() / d;
    Ok(ModelMetrics {
        q_sq_p: mean_ln(|l| l.sq).exp(),
        q_e_l2: er_ms.sqrt().ln(),
        q_f_p: half_ln_d + mean_ln(|l| l.fro),
        q_s_p: half_ln_d + mean_ln(|l| l.spec),
        depth: included.len(),
        lrf_applied: included[0].lrf_applied,
    })
}

/// Layer metrics and model aggregate for one set of weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelProbe<T> {
    pub layers: Vec<LayerMetrics<T>>,
    pub model: ModelMetrics<T>,
}

/// Probes every tensor passing [`is_probeable`] and aggregates.
pub fn probe_model<T: Real>(tensors: &[WeightTensor<T>], use_lrf: bool) -> Result<ModelProbe<T>, MetricsError> {
    let layers = tensors
        .iter()
        .filter(|t| is_probeable(t.shape()))
        .map(|t| probe_layer(t, use_lrf))
        .collect::<Result<Vec<_>, _>>()?;
    if layers.is_empty() {
        return Err(MetricsError::NoProbeableLayers);
    }
    for l in layers.iter().filter(|l| l.degenerate) {
        warn!("layer {} is degenerate (lrf={}); excluded from aggregation", l.layer_name, use_lrf);
    }
    let model = aggregate_model(&layers)?;
    Ok(ModelProbe { layers, model })
}
