//! Independent oracles shared by the integration tests. Nothing here calls
//! into the crate's numeric code.

#![allow(dead_code)]

pub mod fuzz;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn to_dmatrix(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// Singular values as square roots of the eigenvalues of the smaller Gram
/// matrix, descending.
pub fn gram_singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let a = to_dmatrix(rows, cols, data);
    let g = if rows <= cols { &a * a.transpose() } else { a.transpose() * &a };
    let mut v: Vec<f64> = g.symmetric_eigen().eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Singular values from nalgebra's bidiagonal SVD, descending.
pub fn nalgebra_singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = to_dmatrix(rows, cols, data).singular_values().iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let g = to_dmatrix(n, n, &gaussian(rng, n * n));
    let q = g.qr().q();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(q[(i, j)]);
        }
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p];
            for j in 0..n {
                c[i * n + j] += x * b[p * n + j];
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Mode-out and mode-in unfoldings of a row-major `(o, i, h, w)` tensor by
/// explicit index enumeration.
pub fn reference_unfoldings(shape: [usize; 4], data: &[f64]) -> [(usize, usize, Vec<f64>); 2] {
    let [co, ci, kh, kw] = shape;
    let at = |o: usize, i: usize, h: usize, w: usize| data[((o * ci + i) * kh + h) * kw + w];
    let mut out = Vec::new();
    for o in 0..co {
        for i in 0..ci {
            for h in 0..kh {
                for w in 0..kw {
                    out.push(at(o, i, h, w));
                }
            }
        }
    }
    let mut inn = Vec::new();
    for i in 0..ci {
        for o in 0..co {
            for h in 0..kh {
                for w in 0..kw {
                    inn.push(at(o, i, h, w));
                }
            }
        }
    }
    [(co, ci * kh * kw, out), (ci, co * kh * kw, inn)]
}

/// Per-layer metrics `[sq, er, fro, spec]` of a descending spectrum by the
/// textbook formulas. `tol` separates zero from nonzero values.
pub fn reference_layer_metrics(values: &[f64], tol: f64) -> [f64; 4] {
    let nz: Vec<f64> = values.iter().copied().filter(|&v| v > tol).collect();
    let fro = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let spec = values.iter().copied().fold(0.0, f64::max);
    let stable_rank = nz.iter().map(|v| v * v).sum::<f64>() / (spec * spec);
    let kappa = nz[0] / nz[nz.len() - 1];
    let total: f64 = nz.iter().sum();
    let er = -nz.iter().map(|v| v / total).map(|p| p * p.ln()).sum::<f64>();
    [(stable_rank / kappa).atan(), er, fro, spec]
}

/// Model aggregates `[SQ_p, E_L2, F_p, S_p]` evaluated literally: products,
/// roots and square roots, no log-domain rewriting.
pub fn reference_aggregates(layers: &[[f64; 4]]) -> [f64; 4] {
    let d = layers.len() as f64;
    let prod = |k: usize, pow: i32| layers.iter().map(|l| l[k].powi(pow)).product::<f64>();
    let sq = prod(0, 1).powf(1.0 / d);
    let er = (layers.iter().map(|l| l[1].max(1e-12).powi(2)).sum::<f64>() / d).sqrt().ln();
    let f = (d * prod(2, 2).powf(1.0 / d)).sqrt().ln();
    let s = (d * prod(3, 2).powf(1.0 / d)).sqrt().ln();
    [sq, er, f, s]
}

/// Tie-averaged ranks by counting: `1 + #less + (#equal - 1) / 2`.
pub fn counting_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn reference_spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (counting_ranks(x), counting_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// `rank`-`r` matrix `sum_k s_k u_k v_k^T` plus `noise_std` Gaussian noise,
/// with random orthonormal `u`, `v`.
pub fn planted_low_rank(rng: &mut ChaCha8Rng, m: usize, n: usize, strengths: &[f64], noise_std: f64) -> Vec<f64> {
    let u = random_orthogonal(rng, m);
    let v = random_orthogonal(rng, n);
    let mut a: Vec<f64> = gaussian(rng, m * n).into_iter().map(|z| noise_std * z).collect();
    for (k, &s) in strengths.iter().enumerate() {
        for i in 0..m {
            for j in 0..n {
                a[i * n + j] += s * u[i * m + k] * v[j * n + k];
            }
        }
    }
    a
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}
