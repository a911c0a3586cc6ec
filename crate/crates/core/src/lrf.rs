//! Low-rank factorization of weight spectra with the global analytic
//! empirical variational Bayesian matrix factorization (EVBMF) solution.
//!
//! For an `L x M` matrix (`L <= M`, `alpha = L / M`) observed under i.i.d.
//! noise of variance `sigma2`, the EVB estimator keeps exactly the singular
//! values above
//!
//! ```text
//! gamma_evb = sqrt(M * sigma2 * (1 + tau_bar) * (1 + alpha / tau_bar))
//! ```
//!
//! where `tau_bar = 2.5129 * sqrt(alpha)` is the standard approximation of
//! the analytic solution's truncation constant, and shrinks each retained
//! value `gamma` to
//!
//! ```text
//! gamma / 2 * (1 - (L+M) sigma2 / gamma^2 + sqrt((1 - (L+M) sigma2 / gamma^2)^2 - 4 L M sigma2^2 / gamma^4))
//! ```
//!
//! The noise variance is not known in advance; it is estimated by minimizing
//! the EVB free energy as a function of `sigma2` over a bounded interval.

use thiserror::Error;

use crate::scalar::Real;
use crate::spectra::SingularSpectrum;

/// Root of the EVB solvability condition, scaled by `sqrt(alpha)`.
const TAU_BAR_COEFF: f64 = 2.5129;
const GOLDEN_MAX_ITERS: usize = 100;
const GOLDEN_REL_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LrfError {
    #[error("spectrum has no value above its zero tolerance")]
    DegenerateSpectrum,
    #[error("noise variance search did not converge within {0} iterations")]
    OptimizationFailure(usize),
    #[error("factorization retained no component")]
    EmptyResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvbmfResult<T> {
    pub rank: usize,
    /// Shrunk retained values, descending.
    pub shrunk_values: Vec<T>,
    /// Estimated noise variance.
    pub sigma2: T,
    /// Singular values strictly above this are retained.
    pub threshold: T,
}

struct Geometry<T> {
    l: T,
    m: T,
    alpha: T,
    tau_bar: T,
    /// Largest `x = gamma^2 / (M sigma2)` for which a component is pruned.
    x_bar: T,
}

impl<T: Real> Geometry<T> {
    fn new(rows: usize, cols: usize) -> Self {
        let (l, m) = (rows.min(cols), rows.max(cols));
        let l = T::from_usize_lossy(l);
        let m = T::from_usize_lossy(m);
        let alpha = l / m;
        let tau_bar = T::lit(TAU_BAR_COEFF) * alpha.sqrt();
        let x_bar = (T::one() + tau_bar) * (T::one() + alpha / tau_bar);
        Self {
            l,
            m,
            alpha,
            tau_bar,
            x_bar,
        }
    }

    fn tau(&self, x: T) -> T {
        let b = x - (T::one() + self.alpha);
        let disc = (b * b - T::lit(4.0) * self.alpha).max(T::zero());
        T::lit(0.5) * (b + disc.sqrt())
    }

    fn threshold(&self, sigma2: T) -> T {
        (self.m * sigma2 * (T::one() + self.tau_bar) * (T::one() + self.alpha / self.tau_bar)).sqrt()
    }

    /// EVB free energy up to an additive constant. `g2` holds squared
    /// singular values; exact zeros can never cross into the retained branch,
    /// so their `-ln x` part is replaced by the `sigma2`-dependent
    /// `ln(M sigma2)` alone.
    fn free_energy(&self, g2: &[T], sigma2: T) -> T {
        let mut f = T::zero();
        for &g in g2 {
            if g == T::zero() {
                f += (self.m * sigma2).ln();
                continue;
            }
            let x = g / (self.m * sigma2);
            if x <= self.x_bar {
                f += x - x.ln();
            } else {
                let tau = self.tau(x);
                f += x - tau + ((tau + T::one()) / x).ln() + self.alpha * (tau / self.alpha + T::one()).ln();
            }
        }
        f
    }

    fn shrink(&self, gamma: T, sigma2: T) -> T {
        let g2 = gamma * gamma;
        let a = T::one() - (self.l + self.m) * sigma2 / g2;
        let disc = a * a - T::lit(4.0) * self.l * self.m * sigma2 * sigma2 / (g2 * g2);
        gamma / T::lit(2.0) * (a + disc.max(T::zero()).sqrt())
    }
}

/// Golden-section search for the minimizer of `f` over `[lo, hi]`.
fn golden_section<T: Real>(mut lo: T, mut hi: T, tol: T, f: impl Fn(T) -> T) -> Result<T, LrfError> {
    let ratio = T::lit((5f64.sqrt() - 1.0) / 2.0);
    let mut c = hi - ratio * (hi - lo);
    let mut d = lo + ratio * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_MAX_ITERS {
        if hi - lo <= tol {
            return Ok(T::lit(0.5) * (lo + hi));
        }
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - ratio * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + ratio * (hi - lo);
            fd = f(d);
        }
    }
    if hi - lo <= tol {
        Ok(T::lit(0.5) * (lo + hi))
    } else {
        Err(LrfError::OptimizationFailure(GOLDEN_MAX_ITERS))
    }
}

/// Squared singular values with sub-tolerance entries set to exactly zero,
/// padded with zeros to `min(rows, cols)` entries.
fn squared_values<T: Real>(s: &SingularSpectrum<T>) -> Vec<T> {
    let mut g2: Vec<T> = s
        .values()
        .iter()
        .map(|&v| if v > s.zero_tol() { v * v } else { T::zero() })
        .collect();
    g2.resize(s.rows().min(s.cols()), T::zero());
    g2
}

/// Estimates the noise variance by bounded free-energy minimization.
fn estimate_sigma2<T: Real>(geo: &Geometry<T>, g2: &[T]) -> Result<T, LrfError> {
    let l = g2.len();
    // Candidate count: components beyond this index can never be retained.
    let l_f = geo.l.as_f64();
    let candidates = (((l_f / (1.0 + geo.alpha.as_f64())).ceil() as usize).saturating_sub(1)).min(l);
    let total: T = g2.iter().copied().sum();
    let upper = total / (geo.l * geo.m);
    let trailing = &g2[candidates.min(l - 1)..];
    let trailing_mean = trailing.iter().copied().sum::<T>() / T::from_usize_lossy(trailing.len());
    let mut lower = (g2[candidates.min(l - 1)] / (geo.m * geo.x_bar)).max(trailing_mean / geo.m);
    // negated so that a NaN bound is replaced as well
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(lower > upper * T::epsilon()) {
        lower = upper * T::epsilon();
    }
    if lower >= upper {
        return Ok(upper);
    }
    // Work in units of the lower bound and search over ln(sigma2 / lower).
    let scaled: Vec<T> = g2.iter().map(|&g| g / lower).collect();
    let width = (upper / lower).ln();
    let tol = T::lit(GOLDEN_REL_TOL).max(T::epsilon() * T::lit(64.0) * (T::one() + width));
    let u = golden_section(T::zero(), width, tol, |u| geo.free_energy(&scaled, u.exp()))?;
    Ok(lower * u.exp())
}

/// EVBMF with a known noise variance.
pub fn evbmf_with_sigma2<T: Real>(s: &SingularSpectrum<T>, sigma2: T) -> EvbmfResult<T> {
    let geo = Geometry::new(s.rows(), s.cols());
    let threshold = geo.threshold(sigma2);
    let shrunk_values: Vec<T> = s
        .values()
        .iter()
        .take_while(|&&g| g > threshold)
        .map(|&g| geo.shrink(g, sigma2))
        .take_while(|&v| v > T::zero() && v.is_finite())
        .collect();
    EvbmfResult {
        rank: shrunk_values.len(),
        shrunk_values,
        sigma2,
        threshold,
    }
}

/// Full EVBMF: noise variance estimation, truncation and shrinkage.
///
/// Singular values are symmetric in the matrix orientation, so a spectrum of
/// a wide or a tall matrix is handled with `L = min(rows, cols)`.
pub fn evbmf<T: Real>(s: &SingularSpectrum<T>) -> Result<EvbmfResult<T>, LrfError> {
    if s.numerical_rank() == 0 {
        return Err(LrfError::DegenerateSpectrum);
    }
    let geo = Geometry::new(s.rows(), s.cols());
    let g2 = squared_values(s);
    let sigma2 = estimate_sigma2(&geo, &g2)?;
    Ok(evbmf_with_sigma2(s, sigma2))
}

/// Replaces a spectrum by its EVBMF-shrunk retained values.
///
/// The result holds only the retained values, so its length is the
/// recovered rank rather than `min(rows, cols)`.
pub fn shrink_spectrum<T: Real>(s: &SingularSpectrum<T>) -> Result<SingularSpectrum<T>, LrfError> {
    let oriented = if s.rows() > s.cols() { s.transposed() } else { s.clone() };
    let res = evbmf(&oriented)?;
    if res.rank == 0 {
        return Err(LrfError::EmptyResult);
    }
    SingularSpectrum::from_values(res.shrunk_values, s.rows(), s.cols()).map_err(|_| LrfError::DegenerateSpectrum)
}
