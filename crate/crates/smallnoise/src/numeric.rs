//! Small numerical utilities shared across modules: deterministic summation,
//! Simpson quadrature on uniform grids, Halton points for multistart seeding
//! and central finite differences.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Pairwise (cascade) summation. Associativity is fixed by the recursion, so
/// the total is independent of thread scheduling and accumulates error as
/// O(log n) instead of O(n).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn pairwise_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample standard deviation (n-1 normalization) with pairwise totals.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = pairwise_mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (pairwise_sum(&sq) / (xs.len() - 1) as f64).sqrt()
}

/// Composite Simpson rule on a uniform grid of `values.len() - 1` panels with
/// spacing `h`. The panel count must be even and positive.
pub fn simpson_uniform(values: &[f64], h: f64) -> Result<f64> {
    let n = values.len().saturating_sub(1);
    if n == 0 || n % 2 != 0 {
        return Err(Error::OddSimpsonGrid(n));
    }
    let mut terms = Vec::with_capacity(values.len());
    terms.push(values[0]);
    for (k, v) in values.iter().enumerate().take(n).skip(1) {
        terms.push(if k % 2 == 1 { 4.0 * v } else { 2.0 * v });
    }
    terms.push(values[n]);
    Ok(pairwise_sum(&terms) * h / 3.0)
}

/// Radical-inverse Halton point: digit reversal of `index` in the given base,
/// mapped to (0, 1). `index` should start at 1.
pub fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

pub const HALTON_BASES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Central-difference Jacobian of a vector map, one column per coordinate.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let probe = f(x);
    let mut jac = DMatrix::zeros(probe.len(), n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let col = (f(&xp) - f(&xm)) / (2.0 * step);
        jac.set_column(j, &col);
    }
    jac
}

/// Solve the least-squares system `A x = b` by SVD with relative rank cutoff.
pub fn svd_solve(a: &DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    svd.solve(b, rcond * svd.singular_values.max())
        .map_err(|_| Error::EigenFailure("svd_solve"))
}

/// Numerical rank with a relative singular-value cutoff.
pub fn svd_rank(a: &DMatrix<f64>, rtol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let cutoff = rtol * sv.max();
    sv.iter().filter(|&&s| s > cutoff).count()
}
