//! Dense kernels behind the spectrum computation.
//!
//! Singular values are obtained by reducing the matrix to a square upper
//! triangular factor with Householder reflections and then running one-sided
//! (Hestenes) Jacobi on the columns of that factor. Jacobi converges to high
//! relative accuracy, which matters for the small singular values that feed
//! the condition number.

use crate::scalar::Real;

const MAX_SWEEPS: usize = 80;

/// Column-major `rows x cols` buffer, `rows >= cols`.
struct ColMajor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> ColMajor<T> {
    fn col(&self, j: usize) -> &[T] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn col_mut(&mut self, j: usize) -> &mut [T] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Upper triangular `R` (as `cols x cols`, column-major) of the QR
/// factorization of a tall column-major matrix.
fn householder_r<T: Real>(mut a: ColMajor<T>) -> ColMajor<T> {
    let (m, n) = (a.rows, a.cols);
    for k in 0..n {
        let norm = a.col(k)[k..].iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
        if norm == T::zero() {
            continue;
        }
        let head = a.col(k)[k];
        let alpha = if head > T::zero() { -norm } else { norm };
        // v = x - alpha e1, stored in a scratch vector
        let mut v: Vec<T> = a.col(k)[k..].to_vec();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == T::zero() {
            continue;
        }
        let two = T::lit(2.0);
        {
            let ck = a.col_mut(k);
            ck[k] = alpha;
            for x in &mut ck[k + 1..] {
                *x = T::zero();
            }
        }
        for j in k + 1..n {
            let cj = &mut a.col_mut(j)[k..];
            let f = two * dot(&v, cj) / vnorm2;
            for (x, &vi) in cj.iter_mut().zip(&v) {
                *x -= f * vi;
            }
        }
    }
    let mut r = vec![T::zero(); n * n];
    for j in 0..n {
        let c = a.col(j);
        for i in 0..=j.min(m - 1) {
            r[j * n + i] = c[i];
        }
    }
    ColMajor { rows: n, cols: n, data: r }
}

/// One-sided Jacobi: orthogonalizes the columns in place and returns their
/// norms (unsorted).
fn jacobi_column_norms<T: Real>(mut a: ColMajor<T>) -> Vec<T> {
    let n = a.cols;
    let tol = T::epsilon() * T::from_usize_lossy(a.rows.max(1));
    let mut norms: Vec<T> = (0..n).map(|j| dot(a.col(j), a.col(j))).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha == T::zero() || beta == T::zero() {
                    continue;
                }
                let gamma = dot(a.col(p), a.col(q));
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.data.split_at_mut(q * a.rows);
                let cp = &mut lo[p * a.rows..(p + 1) * a.rows];
                let cq = &mut hi[..a.rows];
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                norms[p] = dot(cp, cp);
                norms[q] = dot(cq, cq);
            }
        }
        if !rotated {
            break;
        }
    }
    (0..n).map(|j| dot(a.col(j), a.col(j)).sqrt()).collect()
}

/// Singular values of a row-major `rows x cols` matrix, sorted descending.
/// The input must be finite.
pub(crate) fn singular_values_desc<T: Real>(rows: usize, cols: usize, data: &[T]) -> Vec<T> {
    debug_assert_eq!(data.len(), rows * cols);
    let scale = data.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    let k = rows.min(cols);
    if scale == T::zero() {
        return vec![T::zero(); k];
    }
    // Tall column-major copy: columns of A if rows >= cols, else columns of A^T.
    let (tall_rows, tall_cols) = (rows.max(cols), k);
    let mut buf = vec![T::zero(); tall_rows * tall_cols];
    if rows >= cols {
        for i in 0..rows {
            for j in 0..cols {
                buf[j * rows + i] = data[i * cols + j] / scale;
            }
        }
    } else {
        for i in 0..rows {
            for j in 0..cols {
                buf[i * cols + j] = data[i * cols + j] / scale;
            }
        }
    }
    let tall = ColMajor {
        rows: tall_rows,
        cols: tall_cols,
        data: buf,
    };
    let r = householder_r(tall);
    let mut values: Vec<T> = jacobi_column_norms(r).into_iter().map(|v| v * scale).collect();
    values.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    values
}

/// Orthonormalizes the columns of a row-major `rows x cols` matrix
/// (`rows >= cols`) with two passes of modified Gram-Schmidt.
pub(crate) fn orthonormal_columns(rows: usize, cols: usize, data: &mut [f64]) {
    assert!(rows >= cols);
    for _pass in 0..2 {
        for j in 0..cols {
            for p in 0..j {
                let proj: f64 = (0..rows).map(|i| data[i * cols + j] * data[i * cols + p]).sum();
                for i in 0..rows {
                    data[i * cols + j] -= proj * data[i * cols + p];
                }
            }
            let norm: f64 = (0..rows).map(|i| data[i * cols + j].powi(2)).sum::<f64>().sqrt();
            for i in 0..rows {
                data[i * cols + j] /= norm;
            }
        }
    }
}
