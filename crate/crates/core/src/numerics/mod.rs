pub mod quad;
pub mod rng;
pub mod special;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Empirical quantile with linear interpolation between order statistics
/// (Hyndman-Fan type 7). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Least-squares solution of `x b = y` through a thin SVD; fails when the
/// design is rank deficient beyond `rcond`.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Err(Error::Degenerate("zero design matrix".into()));
    }
    let smin = svd.singular_values.min();
    if smin <= 1e-12 * smax {
        return Err(Error::Degenerate(format!(
            "rank-deficient design (condition {:.3e})",
            smax / smin.max(f64::MIN_POSITIVE)
        )));
    }
    svd.solve(y, 0.0).map_err(|e| Error::Degenerate(e.to_string()))
}

/// Solves the symmetric positive (semi)definite system `a x = b`, adding a
/// diagonal ridge of `ridge` when the plain Cholesky factorization fails.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    let mut r = a.clone();
    for i in 0..r.nrows() {
        r[(i, i)] += ridge;
    }
    r.cholesky().map(|ch| ch.solve(b))
}
