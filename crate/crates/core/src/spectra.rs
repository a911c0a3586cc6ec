//! Weight tensors, matrix unfoldings and singular value spectra.

use thiserror::Error;

use crate::linalg;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectraError {
    #[error("unsupported tensor shape {0:?}: expected a matrix or a 4-D convolution kernel")]
    UnsupportedShape(Vec<usize>),
    #[error("tensor data contains NaN or infinite values")]
    NonFinite,
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(&'static str),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, SpectraError> {
        if rows == 0 || cols == 0 {
            return Err(SpectraError::UnsupportedShape(vec![rows, cols]));
        }
        if data.len() != rows * cols {
            return Err(SpectraError::LengthMismatch {
                shape: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| T::zero())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, c: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * c).collect(),
        }
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = vec![T::zero(); self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out[i * other.cols..(i + 1) * other.cols].iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Self {
            rows: self.rows,
            cols: other.cols,
            data: out,
        }
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |s, &x| s + x * x)
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

/// A named, shaped, row-major weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor<T> {
    name: String,
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> WeightTensor<T> {
    /// Validates rank (1, 2 or 4), positive dimensions, element count and
    /// finiteness.
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> Result<Self, SpectraError> {
        if !matches!(shape.len(), 1 | 2 | 4) || shape.contains(&0) {
            return Err(SpectraError::UnsupportedShape(shape));
        }
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        if count != Some(data.len()) {
            return Err(SpectraError::LengthMismatch { shape, len: data.len() });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(SpectraError::NonFinite);
        }
        Ok(Self {
            name: name.into(),
            shape,
            data,
        })
    }

    pub fn from_matrix(name: impl Into<String>, m: Matrix<T>) -> Result<Self, SpectraError> {
        let shape = vec![m.rows, m.cols];
        Self::new(name, shape, m.data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn cast<U: Real>(&self) -> WeightTensor<U> {
        WeightTensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

/// Reshapes a weight tensor into the matrices its spectra are taken from.
///
/// A 2-D tensor is returned as is. A 4-D kernel `(c_out, c_in, k_h, k_w)`
/// yields the mode-out unfolding `(c_out, c_in*k_h*k_w)` and the mode-in
/// unfolding `(c_in, c_out*k_h*k_w)`; in both, the grouped axes keep their
/// row-major order.
pub fn unfold<T: Real>(t: &WeightTensor<T>) -> Result<Vec<Matrix<T>>, SpectraError> {
    match *t.shape() {
        [m, n] => Ok(vec![Matrix::new(m, n, t.data().to_vec())?]),
        [c_out, c_in, kh, kw] => {
            let k = kh * kw;
            let mode_out = Matrix::new(c_out, c_in * k, t.data().to_vec())?;
            let mut mode_in = Vec::with_capacity(t.data().len());
            for i in 0..c_in {
                for o in 0..c_out {
                    let start = (o * c_in + i) * k;
                    mode_in.extend_from_slice(&t.data()[start..start + k]);
                }
            }
            let mode_in = Matrix::new(c_in, c_out * k, mode_in)?;
            Ok(vec![mode_out, mode_in])
        }
        _ => Err(SpectraError::UnsupportedShape(t.shape().to_vec())),
    }
}

/// Descending singular values of one matrix plus the tolerance under which
/// values count as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularSpectrum<T> {
    values: Vec<T>,
    rows: usize,
    cols: usize,
    zero_tol: T,
}

impl<T: Real> SingularSpectrum<T> {
    /// Builds a spectrum from precomputed values. The values are sorted
    /// descending; at most `min(rows, cols)` are accepted.
    pub fn from_values(mut values: Vec<T>, rows: usize, cols: usize) -> Result<Self, SpectraError> {
        if rows == 0 || cols == 0 {
            return Err(SpectraError::InvalidSpectrum("empty source matrix"));
        }
        if values.len() > rows.min(cols) {
            return Err(SpectraError::InvalidSpectrum("more values than min(rows, cols)"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SpectraError::NonFinite);
        }
        if values.iter().any(|&v| v < T::zero()) {
            return Err(SpectraError::InvalidSpectrum("negative singular value"));
        }
        values.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        let zero_tol = match values.first() {
            Some(&top) => T::epsilon() * T::from_usize_lossy(rows.max(cols)) * top,
            None => T::zero(),
        };
        Ok(Self {
            values,
            rows,
            cols,
            zero_tol,
        })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn zero_tol(&self) -> T {
        self.zero_tol
    }

    /// Largest singular value, zero for an empty spectrum.
    pub fn max(&self) -> T {
        self.values.first().copied().unwrap_or_else(T::zero)
    }

    /// Values strictly above the zero tolerance.
    pub fn nonzero(&self) -> &[T] {
        &self.values[..self.numerical_rank()]
    }

    pub fn numerical_rank(&self) -> usize {
        self.values.iter().take_while(|&&v| v > self.zero_tol).count()
    }

    /// Same values with rows and columns swapped.
    pub fn transposed(&self) -> Self {
        Self {
            values: self.values.clone(),
            rows: self.cols,
            cols: self.rows,
            zero_tol: self.zero_tol,
        }
    }

    pub fn scaled(&self, c: T) -> Self {
        let c = c.abs();
        Self {
            values: self.values.iter().map(|&v| v * c).collect(),
            rows: self.rows,
            cols: self.cols,
            zero_tol: self.zero_tol * c,
        }
    }
}

pub fn singular_values<T: Real>(a: &Matrix<T>) -> Result<SingularSpectrum<T>, SpectraError> {
    if a.data().iter().any(|x| !x.is_finite()) {
        return Err(SpectraError::NonFinite);
    }
    let values = linalg::singular_values_desc(a.rows(), a.cols(), a.data());
    SingularSpectrum::from_values(values, a.rows(), a.cols())
}

/// Count of singular values strictly greater than the spectrum's zero tolerance.
pub fn numerical_rank<T: Real>(s: &SingularSpectrum<T>) -> usize {
    s.numerical_rank()
}
