//! Expected integrated variance conditional on the terminal log-return,
//! `E[∫₀ᵀ V dt | log(S_T / S_0) = lm]`.
//!
//! The production estimator bins Monte-Carlo paths by terminal price. The
//! analytic route composes the conditional normal law of `X_T` given
//! `(Ṽ, V_T)`, the Broadie-Kaya characteristic function of `Ṽ` given the
//! variance endpoints, the noncentral chi-squared transition law of `V_T`
//! and the marginal density of `X_T`; it is slow and serves as a check.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::heston::{logprice_cf, CarryTerms, HestonParams, PathSample};
use crate::numerics::quad::{gauss_legendre_on, integrate, integrate_to_infinity, AdaptiveSettings};
use crate::numerics::special::{ln_bessel_i, ln_bessel_i_complex};
use crate::numerics::{least_squares, quantile_sorted};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondVarCurve {
    pub ttm: f64,
    /// Bin centers in unlevered log-moneyness, strictly increasing.
    pub lm_grid: Vec<f64>,
    /// `None` marks an empty bin.
    pub values: Vec<Option<f64>>,
    pub bin_counts: Vec<usize>,
}

impl CondVarCurve {
    pub fn validate(&self) -> Result<()> {
        let n = self.lm_grid.len();
        if n == 0 || self.values.len() != n || self.bin_counts.len() != n {
            return Err(Error::invalid("curve arrays must be nonempty and of equal length"));
        }
        if self.lm_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("curve grid must be strictly increasing"));
        }
        if self.values.iter().flatten().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("curve values must be nonnegative"));
        }
        Ok(())
    }

    /// `(lm, value, count)` for nonempty bins.
    pub fn nonempty(&self) -> Vec<(f64, f64, usize)> {
        self.lm_grid
            .iter()
            .zip(&self.values)
            .zip(&self.bin_counts)
            .filter_map(|((&x, v), &c)| v.map(|v| (x, v, c)))
            .collect()
    }

    /// Count-weighted mean over nonempty bins.
    pub fn weighted_mean(&self) -> Option<f64> {
        let pts = self.nonempty();
        let n: usize = pts.iter().map(|p| p.2).sum();
        if n == 0 {
            // Smoothed or hand-built curves may carry no counts.
            if pts.is_empty() {
                return None;
            }
            return Some(pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64);
        }
        Some(pts.iter().map(|p| p.1 * p.2 as f64).sum::<f64>() / n as f64)
    }

    /// Flat curve with the given integrated variance everywhere.
    pub fn constant(ttm: f64, integrated_variance: f64, lm_grid: Vec<f64>) -> Self {
        let n = lm_grid.len();
        Self {
            ttm,
            lm_grid,
            values: vec![Some(integrated_variance); n],
            bin_counts: vec![0; n],
        }
    }

    /// Writes `lm,value,count` rows preceded by a `# ttm=` comment. Empty
    /// bins have an empty value field.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# ttm={}", self.ttm)?;
        let mut wtr = crate::market_data::csv_writer(w);
        wtr.write_record(["lm", "value", "count"])?;
        for ((x, v), c) in self.lm_grid.iter().zip(&self.values).zip(&self.bin_counts) {
            wtr.write_record([
                x.to_string(),
                v.map(|v| v.to_string()).unwrap_or_default(),
                c.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut ttm = None;
        let mut body = String::new();
        for line in r.lines() {
            let line = line?;
            let t = line.trim();
            if let Some(c) = t.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("ttm=") {
                    ttm = Some(
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::invalid(format!("bad ttm comment {v:?}")))?,
                    );
                }
                continue;
            }
            body.push_str(&line);
            body.push('\n');
        }
        let ttm = ttm.ok_or_else(|| Error::invalid("curve file lacks a `# ttm=` line"))?;
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let mut curve = CondVarCurve {
            ttm,
            lm_grid: vec![],
            values: vec![],
            bin_counts: vec![],
        };
        for rec in rdr.records() {
            let rec = rec?;
            let bad = |m: &str| Error::invalid(format!("curve row {:?}: {m}", rec.position().map(|p| p.line())));
            let x: f64 = rec.get(0).unwrap_or("").parse().map_err(|_| bad("lm"))?;
            let v = match rec.get(1).unwrap_or("") {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|_| bad("value"))?),
            };
            let c: usize = rec.get(2).unwrap_or("0").parse().map_err(|_| bad("count"))?;
            curve.lm_grid.push(x);
            curve.values.push(v);
            curve.bin_counts.push(c);
        }
        curve.validate()?;
        Ok(curve)
    }
}

/// `n` log-moneyness bin centers whose prices `s0 e^lm` are equally spaced
/// between `s0 e^lm_min` and `s0 e^lm_max`.
pub fn price_equidistant_grid(lm_min: f64, lm_max: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && lm_max > lm_min);
    let (a, b) = (lm_min.exp(), lm_max.exp());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).ln()).collect()
}

/// Grid spanning the central 99% of simulated terminal prices.
pub fn default_grid(paths: &[PathSample], s0: f64, n_bins: usize) -> Vec<f64> {
    let mut st: Vec<f64> = paths.iter().map(|p| p.terminal_price).collect();
    st.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&st, 0.005);
    let hi = quantile_sorted(&st, 0.995);
    price_equidistant_grid((lo / s0).ln(), (hi / s0).ln(), n_bins)
}

/// Bins paths by terminal price and averages integrated variance per bin.
///
/// Bin `k` is the half-open price interval `(c_k - Δ/2, c_k + Δ/2]` around
/// `c_k = s0 e^{lm_grid[k]}`, where `Δ` is the common center spacing. Paths
/// outside all bins are ignored.
pub fn mc_conditional_iv(paths: &[PathSample], s0: f64, ttm: f64, lm_grid: &[f64]) -> Result<CondVarCurve> {
    if paths.is_empty() {
        return Err(Error::invalid("no paths"));
    }
    if lm_grid.len() < 2 {
        return Err(Error::invalid("need at least two bins"));
    }
    let centers: Vec<f64> = lm_grid.iter().map(|x| s0 * x.exp()).collect();
    let n = centers.len();
    let delta = (centers[n - 1] - centers[0]) / (n - 1) as f64;
    for w in centers.windows(2) {
        if !(w[1] > w[0]) || ((w[1] - w[0]) / delta - 1.0).abs() > 1e-8 {
            return Err(Error::invalid("grid must be equidistant in terminal price"));
        }
    }
    let lower = centers[0] - 0.5 * delta;
    let edge = |k: usize| lower + k as f64 * delta;
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for p in paths {
        let s = p.terminal_price;
        if !(s > lower && s <= edge(n)) {
            continue;
        }
        let mut k = (((s - lower) / delta).ceil() as usize).clamp(1, n) - 1;
        // Guard against rounding at the edges.
        while k > 0 && s <= edge(k) {
            k -= 1;
        }
        while k + 1 < n && s > edge(k + 1) {
            k += 1;
        }
        sums[k] += p.integrated_variance;
        counts[k] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() <= 1 {
        log::warn!("all binned paths fall in a single bin");
    }
    Ok(CondVarCurve {
        ttm,
        lm_grid: lm_grid.to_vec(),
        values: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
        bin_counts: counts,
    })
}

#[derive(Debug, Clone)]
pub struct PolyFit {
    /// Ascending powers.
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    /// Residual variance estimate with `n - degree - 1` degrees of freedom.
    pub sigma2: f64,
}

impl PolyFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<PolyFit> {
    let n = x.len();
    if n < degree + 1 || y.len() != n {
        return Err(Error::invalid(format!(
            "polynomial of degree {degree} needs at least {} points",
            degree + 1
        )));
    }
    let design = DMatrix::from_fn(n, degree + 1, |i, j| x[i].powi(j as i32));
    let yv = DVector::from_column_slice(y);
    let beta = least_squares(&design, &yv)?;
    let resid = &yv - &design * &beta;
    let dof = n as f64 - degree as f64 - 1.0;
    let sigma2 = if dof > 0.0 { resid.norm_squared() / dof } else { 0.0 };
    let xtx = design.transpose() * &design;
    let se = match xtx.try_inverse() {
        Some(inv) => (0..=degree).map(|j| (sigma2 * inv[(j, j)]).sqrt()).collect(),
        None => vec![f64::NAN; degree + 1],
    };
    Ok(PolyFit {
        coefficients: beta.iter().copied().collect(),
        standard_errors: se,
        sigma2,
    })
}

/// Replaces nonempty bin values by a least-squares polynomial fit in `lm`,
/// clamped at zero. Empty bins stay empty.
pub fn smooth_curve(curve: &CondVarCurve, degree: usize) -> Result<CondVarCurve> {
    let pts = curve.nonempty();
    if pts.len() < degree + 1 {
        return Err(Error::invalid(format!(
            "smoothing with degree {degree} needs {} nonempty bins, found {}",
            degree + 1,
            pts.len()
        )));
    }
    let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let fit = polyfit(&x, &y, degree)?;
    let mut out = curve.clone();
    for (v, &lm) in out.values.iter_mut().zip(&curve.lm_grid) {
        if v.is_some() {
            *v = Some(fit.eval(lm).max(0.0));
        }
    }
    Ok(out)
}

/// Density of the noncentral chi-squared law with `dof` degrees of freedom
/// and noncentrality `lambda`.
pub fn noncentral_chi2_pdf(x: f64, dof: f64, lambda: f64) -> f64 {
    ln_noncentral_chi2_pdf(x, dof, lambda).exp()
}

pub fn ln_noncentral_chi2_pdf(x: f64, dof: f64, lambda: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    let half_d = 0.5 * dof;
    if lambda == 0.0 {
        return (half_d - 1.0) * x.ln() - 0.5 * x - half_d * std::f64::consts::LN_2 - ln_gamma(half_d);
    }
    0.5f64.ln() - 0.5 * (x + lambda)
        + (0.25 * dof - 0.5) * (x / lambda).ln()
        + ln_bessel_i(half_d - 1.0, (lambda * x).sqrt())
}

/// Order of the Bessel functions in the variance transition law.
fn bessel_order(p: &HestonParams) -> f64 {
    2.0 * p.kappa * p.theta / (p.sigma * p.sigma) - 1.0
}

/// Density of `V_T` given `V_0 = v0` under the square-root dynamics.
pub fn variance_transition_pdf(v_t: f64, v0: f64, p: &HestonParams, ttm: f64) -> f64 {
    ln_variance_transition_pdf(v_t, v0, p, ttm).exp()
}

pub fn ln_variance_transition_pdf(v_t: f64, v0: f64, p: &HestonParams, ttm: f64) -> f64 {
    if !(v_t > 0.0) {
        return f64::NEG_INFINITY;
    }
    let s2 = p.sigma * p.sigma;
    let ekt = (-p.kappa * ttm).exp();
    let cc = 2.0 * p.kappa / (s2 * (1.0 - ekt));
    let nu = bessel_order(p);
    cc.ln() + p.kappa * p.kappa * p.theta * ttm / s2 - 0.5 * p.kappa * ttm - cc * (v_t + ekt * v0)
        + (p.kappa * p.theta / s2 - 0.5) * (v_t / v0).ln()
        + ln_bessel_i(nu, 2.0 * cc * (-0.5 * p.kappa * ttm).exp() * (v0 * v_t).sqrt())
}

/// Scale and noncentral chi-squared parameters `(scale, dof, lambda)` with
/// `V_T = scale · χ²_dof(lambda)`.
pub fn transition_chi2_parameters(v0: f64, p: &HestonParams, ttm: f64) -> (f64, f64, f64) {
    let ekt = (-p.kappa * ttm).exp();
    let scale = p.sigma * p.sigma * (1.0 - ekt) / (4.0 * p.kappa);
    let dof = 4.0 * p.kappa * p.theta / (p.sigma * p.sigma);
    (scale, dof, v0 * ekt / scale)
}

/// Characteristic function of `Ṽ = ∫₀ᵀ V dt` given both variance endpoints.
pub fn integrated_var_cf_given_endpoints(
    omega: f64,
    v0: f64,
    v_t: f64,
    p: &HestonParams,
    ttm: f64,
) -> Result<Complex64> {
    if !(v0 > 0.0 && v_t > 0.0) {
        return Err(Error::invalid("variance endpoints must be positive"));
    }
    if omega == 0.0 {
        return Ok(Complex64::new(1.0, 0.0));
    }
    Ok(ln_integrated_var_cf(omega, v0, v_t, p, ttm, ln_bessel_kappa(v0, v_t, p, ttm))?.exp())
}

fn ln_bessel_kappa(v0: f64, v_t: f64, p: &HestonParams, ttm: f64) -> f64 {
    let s2 = p.sigma * p.sigma;
    let ekt = (-p.kappa * ttm).exp();
    let z = (v_t * v0).sqrt() * 4.0 * p.kappa * (-0.5 * p.kappa * ttm).exp() / (s2 * (1.0 - ekt));
    ln_bessel_i(bessel_order(p), z)
}

fn ln_integrated_var_cf(
    omega: f64,
    v0: f64,
    v_t: f64,
    p: &HestonParams,
    ttm: f64,
    ln_bessel_k: f64,
) -> Result<Complex64> {
    let s2 = p.sigma * p.sigma;
    let k = p.kappa;
    let gamma = Complex64::new(k * k, -2.0 * s2 * omega).sqrt();
    let ekt = (-k * ttm).exp();
    let egt = (-gamma * ttm).exp();
    let one = Complex64::new(1.0, 0.0);
    let ln_one_minus_egt = (one - egt).ln();
    let ln_gamma_c = gamma.ln();
    let head = ln_gamma_c - 0.5 * (gamma - k) * ttm + (1.0 - ekt).ln() - k.ln() - ln_one_minus_egt;
    let coth_k = k * (1.0 + ekt) / (1.0 - ekt);
    let coth_g = gamma * (one + egt) / (one - egt);
    let mid = (v_t + v0) / s2 * (coth_k - coth_g);
    // log(z/2), continued along the path of gamma from the real axis.
    let ln_half_z =
        Complex64::new((2.0 * (v_t * v0).sqrt() / s2).ln(), 0.0) + ln_gamma_c - 0.5 * gamma * ttm - ln_one_minus_egt;
    let ln_b = ln_bessel_i_complex(bessel_order(p), ln_half_z)?;
    Ok(head + mid + ln_b - ln_bessel_k)
}

/// Quadrature settings for [`analytic_conditional_iv`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnalyticSettings {
    /// Trapezoid nodes for each CF inversion.
    pub cf_nodes: usize,
    /// Truncate CF inversions where `|φ|` drops below this.
    pub cf_cutoff: f64,
    /// Gauss-Legendre nodes for the terminal-variance integral.
    pub vt_nodes: usize,
    /// Gauss-Legendre nodes for the integrated-variance integral.
    pub vtilde_nodes: usize,
    /// Upper tail probability cut from the terminal-variance law.
    pub vt_tail: f64,
    pub marginal_abs_tol: f64,
}

impl Default for AnalyticSettings {
    fn default() -> Self {
        Self {
            cf_nodes: 1 << 12,
            cf_cutoff: 1e-10,
            vt_nodes: 64,
            vtilde_nodes: 64,
            vt_tail: 1e-8,
            marginal_abs_tol: 1e-12,
        }
    }
}

impl AnalyticSettings {
    pub fn validate(&self) -> Result<()> {
        if self.cf_nodes < 16 || self.vt_nodes < 4 || self.vtilde_nodes < 4 {
            return Err(Error::invalid("analytic quadrature needs more nodes"));
        }
        if !(self.cf_cutoff > 0.0 && self.vt_tail > 0.0 && self.vt_tail < 0.5 && self.marginal_abs_tol > 0.0) {
            return Err(Error::invalid("analytic quadrature tolerances must be positive"));
        }
        Ok(())
    }
}

/// Density of `Ṽ` given the variance endpoints on Gauss-Legendre nodes.
#[derive(Debug, Clone)]
pub struct EndpointDensity {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub density: Vec<f64>,
}

impl EndpointDensity {
    pub fn mass(&self) -> f64 {
        self.weights.iter().zip(&self.density).map(|(w, f)| w * f).sum()
    }

    pub fn mean(&self) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .zip(&self.density)
            .map(|((x, w), f)| x * w * f)
            .sum::<f64>()
            / self.mass()
    }
}

/// Inverts the endpoint-conditional CF of `Ṽ` by the trapezoid rule and
/// tabulates the density where it carries its mass.
pub fn integrated_var_density_given_endpoints(
    v0: f64,
    v_t: f64,
    p: &HestonParams,
    ttm: f64,
    settings: &AnalyticSettings,
) -> Result<EndpointDensity> {
    let lbk = ln_bessel_kappa(v0, v_t, p, ttm);
    let lcf = |w: f64| ln_integrated_var_cf(w, v0, v_t, p, ttm, lbk);
    // Mean and spread from the cumulant expansion of log φ near 0.
    let h = 1e-2 / (ttm * (v0 + v_t + p.theta));
    let lp = lcf(h)?;
    let lm = lcf(-h)?;
    let mean = (lp.im - lm.im) / (2.0 * h);
    let var = (-(lp.re + lm.re) / (h * h)).max(0.0);
    let sd = var.sqrt().max(1e-6 * mean.abs());
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::Quadrature {
            integral: "integrated-variance CF inversion".into(),
            achieved: f64::NAN,
            target: settings.cf_cutoff,
        });
    }
    let lo = (mean - 12.0 * sd).max(0.0);
    let hi = mean + 14.0 * sd;

    // Truncation point where |φ| falls below the cutoff.
    let ln_cut = settings.cf_cutoff.ln();
    let mut w_max = 1.0 / sd;
    let mut found = false;
    for _ in 0..80 {
        if lcf(w_max)?.re < ln_cut {
            found = true;
            break;
        }
        w_max *= 1.5;
    }
    if !found {
        return Err(Error::Quadrature {
            integral: "integrated-variance CF inversion (truncation)".into(),
            achieved: lcf(w_max)?.re.exp(),
            target: settings.cf_cutoff,
        });
    }
    let n = settings.cf_nodes;
    let dw = w_max / (n - 1) as f64;
    let mut phis = Vec::with_capacity(n);
    for j in 0..n {
        let w = j as f64 * dw;
        let v = if j == 0 {
            Complex64::new(1.0, 0.0)
        } else {
            lcf(w)?.exp()
        };
        phis.push(if j == 0 || j == n - 1 { 0.5 * v } else { v });
    }
    let nodes = gauss_legendre_on(settings.vtilde_nodes, lo, hi);
    let density: Vec<f64> = nodes
        .iter()
        .map(|&(x, _)| {
            // Σ Re(e^{-i x w_j} φ_j) by a rotating phasor.
            let step = Complex64::from_polar(1.0, -x * dw);
            let mut rot = Complex64::new(1.0, 0.0);
            let mut acc = 0.0;
            for phi in &phis {
                acc += (rot * phi).re;
                rot *= step;
            }
            (acc * dw / PI).max(0.0)
        })
        .collect();
    Ok(EndpointDensity {
        nodes: nodes.iter().map(|n| n.0).collect(),
        weights: nodes.iter().map(|n| n.1).collect(),
        density,
    })
}

/// Upper `tail` quantile of the variance transition law.
pub fn transition_upper_quantile(v0: f64, p: &HestonParams, ttm: f64, tail: f64) -> Result<f64> {
    let (scale, dof, lambda) = transition_chi2_parameters(v0, p, ttm);
    let mean = scale * (dof + lambda);
    let sd = scale * (2.0 * (dof + 2.0 * lambda)).sqrt();
    let settings = AdaptiveSettings {
        abs_tol: tail * 1e-3,
        rel_tol: 0.0,
        max_intervals: 2000,
    };
    let upper = |v: f64| -> Result<f64> {
        integrate_to_infinity(
            |x| variance_transition_pdf(x, v0, p, ttm),
            v,
            4.0 * sd,
            settings,
            tail * 1e-4,
            "terminal-variance tail",
        )
        .map(|r| r.value)
    };
    let mut lo = mean;
    let mut hi = mean + 4.0 * sd;
    while upper(hi)? > tail {
        lo = hi;
        hi += 4.0 * sd;
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if upper(mid)? > tail {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Marginal density of `X_T = log S_T` by adaptive Fourier inversion.
pub fn logprice_density(x: f64, p: &HestonParams, carry: &CarryTerms, s0: f64, ttm: f64, abs_tol: f64) -> Result<f64> {
    let settings = AdaptiveSettings {
        abs_tol,
        rel_tol: 0.0,
        max_intervals: 4000,
    };
    let r = integrate_to_infinity(
        |w| (logprice_cf(Complex64::new(w, 0.0), p, carry, s0, ttm) * Complex64::from_polar(1.0, -w * x)).re,
        0.0,
        50.0 / (p.theta.max(p.v0) * ttm).sqrt(),
        settings,
        abs_tol,
        "marginal log-price CF inversion",
    )?;
    Ok(r.value / PI)
}

/// Deterministic integrated variance when the variance has no noise.
pub fn deterministic_integrated_variance(p: &HestonParams, ttm: f64) -> f64 {
    p.theta * ttm + (p.v0 - p.theta) * (1.0 - (-p.kappa * ttm).exp()) / p.kappa
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnalyticResult {
    /// Conditional expected integrated variance.
    pub value: f64,
    /// `∫ f(ṽ | x) dṽ`, which should be close to 1.
    pub normalization: f64,
    /// Marginal density of `X_T` at the conditioning point.
    pub marginal_density: f64,
}

/// Conditional expected integrated variance at `lm = log(S_T / S_0)` by
/// direct integration of the joint density.
pub fn analytic_conditional_iv(
    lm: f64,
    p: &HestonParams,
    carry: &CarryTerms,
    s0: f64,
    ttm: f64,
    settings: &AnalyticSettings,
) -> Result<AnalyticResult> {
    p.validate()?;
    settings.validate()?;
    if bessel_order(p) > 1e6 || p.sigma == 0.0 {
        return Ok(AnalyticResult {
            value: deterministic_integrated_variance(p, ttm),
            normalization: 1.0,
            marginal_density: f64::NAN,
        });
    }
    let x_t = s0.ln() + lm;
    let v_bar = transition_upper_quantile(p.v0, p, ttm, settings.vt_tail)?;
    let vt_nodes = gauss_legendre_on(settings.vt_nodes, 0.0, v_bar);
    let rho = p.rho;
    let one_m_r2 = 1.0 - rho * rho;
    let slope = -0.5 + p.kappa * rho / p.sigma;
    let base = s0.ln() + (carry.r - carry.c) * ttm;

    let parts: Vec<Result<(f64, f64)>> = vt_nodes
        .par_iter()
        .map(|&(v_t, w_t)| {
            let f_vt = variance_transition_pdf(v_t, p.v0, p, ttm);
            if f_vt == 0.0 || !f_vt.is_finite() {
                return Ok((0.0, 0.0));
            }
            let dens = integrated_var_density_given_endpoints(p.v0, v_t, p, ttm, settings)?;
            let shift = rho / p.sigma * (v_t - p.v0 - p.kappa * p.theta * ttm);
            let (mut num, mut den) = (0.0, 0.0);
            for ((&vt, &w), &f) in dens.nodes.iter().zip(&dens.weights).zip(&dens.density) {
                if vt <= 0.0 || f == 0.0 {
                    continue;
                }
                let var = one_m_r2 * vt;
                let z = x_t - (base + slope * vt + shift);
                let fx = (-0.5 * z * z / var).exp() / (2.0 * PI * var).sqrt();
                let m = w * f * fx;
                num += vt * m;
                den += m;
            }
            Ok((w_t * f_vt * num, w_t * f_vt * den))
        })
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for part in parts {
        let (n, d) = part?;
        num += n;
        den += d;
    }
    let f_x = logprice_density(x_t, p, carry, s0, ttm, settings.marginal_abs_tol)?;
    if !(f_x > 0.0) {
        return Err(Error::Quadrature {
            integral: "marginal log-price CF inversion".into(),
            achieved: f_x,
            target: settings.marginal_abs_tol,
        });
    }
    Ok(AnalyticResult {
        value: num / f_x,
        normalization: den / f_x,
        marginal_density: f_x,
    })
}

/// Total mass of the variance transition law on `(0, upper)` by adaptive
/// quadrature; exposed for diagnostics.
pub fn transition_mass(v0: f64, p: &HestonParams, ttm: f64, upper: f64) -> Result<f64> {
    integrate(
        |v| variance_transition_pdf(v, v0, p, ttm),
        0.0,
        upper,
        AdaptiveSettings {
            abs_tol: 1e-12,
            rel_tol: 0.0,
            max_intervals: 4000,
        },
        "terminal-variance integral",
    )
    .map(|r| r.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(s: f64, iv: f64) -> PathSample {
        PathSample {
            terminal_price: s,
            integrated_variance: iv,
            terminal_variance: 0.04,
        }
    }

    #[test]
    fn two_path_binning() {
        let paths = [sample(90.0, 0.03), sample(110.0, 0.05)];
        let grid = [0.9f64.ln(), 1.1f64.ln()];
        let c = mc_conditional_iv(&paths, 100.0, 1.0, &grid).unwrap();
        assert_eq!(c.values, vec![Some(0.03), Some(0.05)]);
        assert_eq!(c.bin_counts, vec![1, 1]);
    }

    #[test]
    fn bins_are_half_open() {
        let grid = [0.9f64.ln(), 1.1f64.ln()];
        // Edges at 80, 100, 120.
        let paths = [sample(80.0, 1.0), sample(100.0, 0.2), sample(120.0, 0.4)];
        let c = mc_conditional_iv(&paths, 100.0, 1.0, &grid).unwrap();
        assert_eq!(c.bin_counts, vec![1, 1]);
        assert_eq!(c.values, vec![Some(0.2), Some(0.4)]);
    }

    #[test]
    fn rejects_uneven_grid() {
        let paths = [sample(100.0, 0.04)];
        assert!(mc_conditional_iv(&paths, 100.0, 1.0, &[-0.1, 0.0, 0.3]).is_err());
    }

    #[test]
    fn empty_bins_are_flagged() {
        let grid = price_equidistant_grid(-0.2, 0.2, 5);
        let c = mc_conditional_iv(&[sample(100.0, 0.04)], 100.0, 1.0, &grid).unwrap();
        assert_eq!(c.values.iter().filter(|v| v.is_some()).count(), 1);
        assert_eq!(c.values[2], Some(0.04));
    }

    #[test]
    fn chi2_central_reduction() {
        assert!((noncentral_chi2_pdf(1.0, 2.0, 0.0) - 0.5 * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn smoothing_reproduces_quadratic() {
        let grid = price_equidistant_grid(-0.3, 0.3, 9);
        let mut c = CondVarCurve::constant(1.0, 0.0, grid.clone());
        for (v, x) in c.values.iter_mut().zip(&grid) {
            *v = Some(0.04 + 0.01 * x + 0.2 * x * x);
        }
        let s = smooth_curve(&c, 2).unwrap();
        for (a, b) in s.values.iter().zip(&c.values) {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-10);
        }
        assert!(smooth_curve(&c, 9).is_err());
    }

    #[test]
    fn curve_csv_round_trip() {
        let grid = price_equidistant_grid(-0.2, 0.2, 4);
        let mut c = CondVarCurve::constant(0.6, 0.024, grid);
        c.values[1] = None;
        c.bin_counts = vec![3, 0, 5, 7];
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = CondVarCurve::read_csv(buf.as_slice()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn endpoint_cf_basics() {
        let p = HestonParams::new(2.0, 0.04, 0.3, 0.04, -0.5);
        let one = integrated_var_cf_given_endpoints(0.0, 0.04, 0.05, &p, 0.5).unwrap();
        assert_eq!(one, Complex64::new(1.0, 0.0));
        let a = integrated_var_cf_given_endpoints(1.0, 0.04, 0.05, &p, 0.5).unwrap();
        let b = integrated_var_cf_given_endpoints(-1.0, 0.04, 0.05, &p, 0.5).unwrap();
        assert!((a - b.conj()).norm() < 1e-13);
        assert!(a.norm() <= 1.0);
        // Tiny frequency: φ(ω) ≈ 1 + i ω E[Ṽ | endpoints].
        let w = 1e-6;
        let c = integrated_var_cf_given_endpoints(w, 0.04, 0.04, &p, 0.5).unwrap();
        let m = c.im / w;
        assert!(m > 0.015 && m < 0.025, "{m}");
    }
}
