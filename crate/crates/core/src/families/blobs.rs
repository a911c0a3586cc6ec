use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FamilyError;

/// Labeled points, row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Two unit-covariance Gaussian classes with means `-(separation/2) e1`
/// (label 0) and `+(separation/2) e1` (label 1). Labels alternate, so the
/// classes are exactly balanced.
pub fn generate_blobs(seed: u64, n: usize, dim: usize, separation: f64) -> Result<Dataset, FamilyError> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(FamilyError::InvalidConfig(format!("blob count must be even and >= 2, got {n}")));
    }
    if dim == 0 || !separation.is_finite() {
        return Err(FamilyError::InvalidConfig("dim must be positive, separation finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let shift = if label == 1 { separation / 2.0 } else { -separation / 2.0 };
        for d in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(if d == 0 { z + shift } else { z });
        }
        labels.push(label);
    }
    Ok(Dataset { dim, features, labels })
}
