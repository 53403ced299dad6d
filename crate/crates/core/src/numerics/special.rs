//! Normal distribution helpers and modified Bessel functions of the first
//! kind for real and complex arguments, evaluated in log space.

use std::f64::consts::{LN_2, PI};

use num_complex::Complex64;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const SERIES_REL_TOL: f64 = 1e-15;
const MAX_SERIES_TERMS: usize = 200_000;

#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `log(1 + x)` for complex `x`, accurate when `|x|` is small.
pub fn clog1p(x: Complex64) -> Complex64 {
    let u = Complex64::new(1.0, 0.0) + x;
    let d = u - 1.0;
    if d == Complex64::new(0.0, 0.0) {
        x
    } else {
        u.ln() * x / d
    }
}

/// `log I_nu(x)` for real `x > 0` and `nu > -1`.
///
/// Sums the ascending series outward from its largest term so that neither
/// overflow nor underflow occurs for large arguments.
pub fn ln_bessel_i(nu: f64, x: f64) -> f64 {
    assert!(nu > -1.0, "order must exceed -1");
    if x <= 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let half = 0.5 * x;
    let q = half * half;
    // Peak of the terms: (j + 1)(nu + j + 1) = q.
    let jp = (0.5 * (-(nu + 2.0) + (nu * nu + 4.0 * q).sqrt())).max(0.0).round();
    let ln_peak = (2.0 * jp + nu) * half.ln() - ln_gamma(jp + 1.0) - ln_gamma(nu + jp + 1.0);
    let mut sum = 1.0;
    // Upward.
    let mut t = 1.0;
    let mut j = jp;
    for _ in 0..MAX_SERIES_TERMS {
        j += 1.0;
        t *= q / (j * (nu + j));
        sum += t;
        if t < SERIES_REL_TOL * sum {
            break;
        }
    }
    // Downward.
    let mut t = 1.0;
    let mut j = jp;
    while j > 0.0 {
        t *= j * (nu + j) / q;
        sum += t;
        j -= 1.0;
        if t < SERIES_REL_TOL * sum {
            break;
        }
    }
    ln_peak + sum.ln()
}

/// `log I_nu(z)` for complex `z`, where the caller supplies `log(z / 2)` on
/// the branch it wants `(z/2)^nu` continued along.
///
/// The returned logarithm is only meaningful modulo `2πi`; exponentiate it
/// (or differences of it) to obtain values.
pub fn ln_bessel_i_complex(nu: f64, ln_half_z: Complex64) -> Result<Complex64> {
    let z = 2.0 * ln_half_z.exp();
    let modulus = z.norm();
    if modulus > 30.0 && modulus > 4.0 * nu * nu + 10.0 && z.re > 0.0 {
        return Ok(hankel_ln_bessel_i(nu, z, ln_half_z));
    }
    series_ln_bessel_i(nu, ln_half_z, modulus)
}

fn series_ln_bessel_i(nu: f64, ln_half_z: Complex64, modulus: f64) -> Result<Complex64> {
    let w = (2.0 * ln_half_z).exp();
    let wn = w.norm();
    let mut sum = Complex64::new(1.0, 0.0);
    let mut term = Complex64::new(1.0, 0.0);
    let mut ln_scale = 0.0;
    let mut converged = false;
    let mut terms = 0;
    for j in 1..MAX_SERIES_TERMS {
        let jf = j as f64;
        term *= w / (jf * (nu + jf));
        sum += term;
        terms = j;
        let tn = term.norm();
        if tn > 1e200 {
            term /= 1e200;
            sum /= 1e200;
            ln_scale += 200.0 * std::f64::consts::LN_10;
        }
        // Terms shrink monotonically once j(nu + j) exceeds |w|.
        if jf * (nu + jf) > wn && tn <= SERIES_REL_TOL * sum.norm().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    if !converged || !sum.norm().is_finite() || sum.norm() == 0.0 {
        return Err(Error::BesselSeries {
            order: nu,
            modulus,
            terms,
        });
    }
    Ok(nu * ln_half_z + sum.ln() + ln_scale - ln_gamma(nu + 1.0))
}

fn hankel_ln_bessel_i(nu: f64, z: Complex64, ln_half_z: Complex64) -> Complex64 {
    let mu = 4.0 * nu * nu;
    let mut sum = Complex64::new(1.0, 0.0);
    let mut term = Complex64::new(1.0, 0.0);
    let mut last = f64::INFINITY;
    for k in 1..60 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        let next = -term * (mu - odd * odd) / (8.0 * kf * z);
        let n = next.norm();
        if n >= last {
            break;
        }
        term = next;
        sum += term;
        last = n;
        if n < 1e-17 {
            break;
        }
    }
    let principal = z - 0.5 * (2.0 * PI).ln() - 0.5 * z.ln() + sum.ln();
    // Move from the principal branch to the caller's branch of (z/2)^nu.
    let principal_half = z.ln() - LN_2;
    principal + nu * (ln_half_z - principal_half)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct ascending series in plain arithmetic, usable for small x.
    fn naive_i(nu: f64, x: f64) -> f64 {
        let mut s = 0.0;
        for j in 0..200 {
            let jf = j as f64;
            s += ((2.0 * jf + nu) * (0.5 * x).ln() - ln_gamma(jf + 1.0) - ln_gamma(nu + jf + 1.0)).exp();
        }
        s
    }

    #[test]
    fn real_matches_naive_series() {
        for &(nu, x) in &[(0.0, 1.0), (0.5, 2.5), (-0.5, 0.3), (2.56, 3.4), (7.0, 20.0)] {
            let got = ln_bessel_i(nu, x).exp();
            let want = naive_i(nu, x);
            assert!((got / want - 1.0).abs() < 1e-13, "nu={nu} x={x}");
        }
    }

    #[test]
    fn real_half_order_closed_form() {
        // I_{1/2}(x) = sqrt(2/(pi x)) sinh x
        for &x in &[0.1, 1.0, 10.0, 300.0] {
            let want = (2.0 / (PI * x)).sqrt().ln() + x + (0.5 * (1.0 - (-2.0 * x).exp())).ln();
            assert!((ln_bessel_i(0.5, x) - want).abs() < 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn complex_agrees_with_real_on_positive_axis() {
        for &(nu, x) in &[(0.3f64, 2.0f64), (2.56, 3.4), (1.5, 45.0), (0.0, 100.0)] {
            let lz = Complex64::new((0.5 * x).ln(), 0.0);
            let c = ln_bessel_i_complex(nu, lz).unwrap();
            assert!((c.re - ln_bessel_i(nu, x)).abs() < 1e-12 * c.re.abs().max(1.0));
            assert!(c.im.abs() < 1e-12);
        }
    }

    #[test]
    fn hankel_and_series_agree_off_axis() {
        let nu = 0.7;
        let z = Complex64::from_polar(40.0, 0.3);
        let lz = (z / 2.0).ln();
        let h = hankel_ln_bessel_i(nu, z, lz);
        let s = series_ln_bessel_i(nu, lz, z.norm()).unwrap();
        let ratio = (h - s).exp();
        assert!((ratio - 1.0).norm() < 1e-12, "{ratio}");
    }

    #[test]
    fn normal_cdf_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((norm_cdf(0.1) - 0.539_827_837_277_029).abs() < 1e-14);
        assert!((norm_cdf(-3.0) / 0.001_349_898_031_630_094_5 - 1.0).abs() < 1e-14);
    }
}
