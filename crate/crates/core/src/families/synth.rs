//! Synthetic weight families with a planted metric-to-accuracy link.
//!
//! Each model gets a power-law decay exponent `p`; every layer is built as
//! `U diag(sigma) V^T` with `sigma_k = k^-p` and seeded orthonormal factors,
//! so its spectrum (and hence every spectral metric) is known exactly. The
//! test accuracy is a monotone function of the model's effective-rank
//! aggregate; the training accuracy is a constant, which makes the
//! generalization gap an exactly reversed copy of the test accuracy.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::toy::MANIFEST_NAME;
use super::FamilyError;
use crate::linalg::orthonormal_columns;
use crate::metrics::{aggregate_model, effective_rank, LayerMetrics};
use crate::spectra::{Matrix, SingularSpectrum, WeightTensor};
use crate::store::{write_container, write_manifest, RunRecord, StoredTensor};

pub const SYNTH_TRAIN_ACCURACY: f64 = 0.95;
const ACC_FLOOR: f64 = 0.1;
const ACC_SPAN: f64 = 0.8;

/// Map from the normalized planted metric to test accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Link {
    Linear,
    /// Decreasing linear map.
    NegLinear,
    Quadratic,
    /// Linear plus Gaussian noise of the given standard deviation.
    Noisy(f64),
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Link::Linear => f.write_str("linear"),
            Link::NegLinear => f.write_str("neg-linear"),
            Link::Quadratic => f.write_str("quadratic"),
            Link::Noisy(s) => write!(f, "noisy:{s}"),
        }
    }
}

impl FromStr for Link {
    type Err = FamilyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Link::Linear),
            "neg-linear" => Ok(Link::NegLinear),
            "quadratic" => Ok(Link::Quadratic),
            other => other
                .strip_prefix("noisy:")
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite() && *v >= 0.0)
                .map(Link::Noisy)
                .ok_or_else(|| FamilyError::InvalidConfig(format!("unknown link {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumFamilySpec {
    pub n_models: usize,
    pub layer_shapes: Vec<(usize, usize)>,
    /// Range of the per-model decay exponent `p`.
    pub decay_range: (f64, f64),
    pub link: Link,
    pub seed: u64,
}

impl SpectrumFamilySpec {
    fn validate(&self) -> Result<(), FamilyError> {
        let (lo, hi) = self.decay_range;
        if self.n_models < 3 {
            return Err(FamilyError::InvalidConfig("need at least 3 models".into()));
        }
        if self.layer_shapes.is_empty() || self.layer_shapes.iter().any(|&(m, n)| m < 2 || n < 2) {
            return Err(FamilyError::InvalidConfig("layer shapes must be at least 2x2".into()));
        }
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(FamilyError::InvalidConfig("decay range must satisfy 0 < low < high".into()));
        }
        Ok(())
    }
}

fn power_law(k: usize, p: f64) -> Vec<f64> {
    (1..=k).map(|i| (i as f64).powf(-p)).collect()
}

/// Effective-rank aggregate `E_L2` of a model whose layers have power-law
/// spectra with exponent `p`, evaluated directly on the known spectra.
pub fn planted_effective_rank_aggregate(shapes: &[(usize, usize)], p: f64) -> Result<f64, FamilyError> {
    let layers = shapes
        .iter()
        .map(|&(m, n)| {
            let s = SingularSpectrum::from_values(power_law(m.min(n), p), m, n)
                .map_err(|e| FamilyError::InvalidConfig(e.to_string()))?;
            Ok(LayerMetrics {
                layer_name: String::new(),
                sq: 1.0,
                er: effective_rank(&s)?,
                fro: 1.0,
                spec: 1.0,
                lrf_applied: false,
                degenerate: false,
            })
        })
        .collect::<Result<Vec<_>, FamilyError>>()?;
    Ok(aggregate_model(&layers)?.q_e_l2)
}

fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    orthonormal_columns(rows, cols, &mut data);
    data
}

fn layer_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize, sigma: &[f64]) -> Matrix<f64> {
    let k = sigma.len();
    let u = random_orthonormal(rng, m, k);
    let v = random_orthonormal(rng, n, k);
    Matrix::from_fn(m, n, |i, j| (0..k).map(|r| u[i * k + r] * sigma[r] * v[j * k + r]).sum())
}

/// Writes `n_models` containers and a manifest into `out_dir` and returns
/// the manifest path.
pub fn synth_family(spec: &SpectrumFamilySpec, out_dir: &Path) -> Result<PathBuf, FamilyError> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.decay_range;
    let n = spec.n_models;

    let mut decays = Vec::with_capacity(n);
    let mut planted = Vec::with_capacity(n);
    let mut files = Vec::with_capacity(n);
    for i in 0..n {
        // stratified exponents keep neighbouring models at least half a stratum apart
        let jitter: f64 = rng.random_range(0.25..0.75);
        let p = lo + (hi - lo) * (i as f64 + jitter) / n as f64;
        let mut tensors: Vec<StoredTensor> = Vec::new();
        for (j, &(rows, cols)) in spec.layer_shapes.iter().enumerate() {
            let w = layer_matrix(&mut rng, rows, cols, &power_law(rows.min(cols), p));
            tensors.push(
                WeightTensor::from_matrix(format!("layer{j}.weight"), w)
                    .map_err(|e| FamilyError::InvalidConfig(e.to_string()))?
                    .into(),
            );
            tensors.push(
                WeightTensor::new(format!("layer{j}.bias"), vec![rows], vec![0.0f64; rows])
                    .map_err(|e| FamilyError::InvalidConfig(e.to_string()))?
                    .into(),
            );
        }
        let file = format!("synth-{i:03}.gprb");
        write_container(out_dir.join(&file), &tensors)?;
        decays.push(p);
        planted.push(planted_effective_rank_aggregate(&spec.layer_shapes, p)?);
        files.push(file);
    }

    let min = planted.iter().copied().fold(f64::INFINITY, f64::min);
    let max = planted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let records: Vec<RunRecord> = (0..n)
        .map(|i| {
            let z = if max > min { (planted[i] - min) / (max - min) } else { 0.5 };
            let g = match spec.link {
                Link::Linear => z,
                Link::NegLinear => 1.0 - z,
                Link::Quadratic => z * z,
                Link::Noisy(s) => {
                    let eps = if s > 0.0 {
                        Normal::new(0.0, s).expect("valid sigma").sample(&mut noise_rng)
                    } else {
                        0.0
                    };
                    z + eps
                }
            };
            let test = (ACC_FLOOR + ACC_SPAN * g).clamp(0.0, ACC_FLOOR + ACC_SPAN);
            RunRecord {
                model_id: format!("synth-{i:03}"),
                epoch: 0,
                optimizer: "none".into(),
                dataset: "synthetic".into(),
                hyperparams: [
                    ("decay".to_string(), format!("{:.6}", decays[i])),
                    ("link".to_string(), spec.link.to_string()),
                ]
                .into(),
                train_accuracy: SYNTH_TRAIN_ACCURACY,
                test_accuracy: test,
                weights_path: files[i].clone(),
            }
        })
        .collect();
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
