//! Heston stochastic-volatility model: characteristic function, European
//! call pricing, least-squares calibration and Euler path simulation.
//!
//! Under the pricing measure the fund price follows
//!
//! ```text
//! dS = (r - c) S dt + sqrt(V) S dW_S
//! dV = kappa (theta - V) dt + sigma sqrt(V) dW_V,   d<W_S, W_V> = rho dt
//! ```

use std::f64::consts::PI;

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::OptionQuote;
use crate::numerics::quad::{integrate_to_infinity, AdaptiveSettings};
use crate::numerics::rng::substream;
use crate::numerics::special::{clog1p, norm_cdf, norm_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub kappa: f64,
    pub theta: f64,
    pub sigma: f64,
    pub v0: f64,
    pub rho: f64,
}

impl HestonParams {
    pub fn new(kappa: f64, theta: f64, sigma: f64, v0: f64, rho: f64) -> Self {
        Self {
            kappa,
            theta,
            sigma,
            v0,
            rho,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kappa > 0.0
            && self.theta > 0.0
            && self.sigma >= 0.0
            && self.v0 >= 0.0
            && self.rho > -1.0
            && self.rho < 1.0
            && self.to_array().iter().all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Heston parameters {self:?}")))
        }
    }

    /// `2 kappa theta >= sigma^2`.
    pub fn feller_satisfied(&self) -> bool {
        2.0 * self.kappa * self.theta >= self.sigma * self.sigma
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.kappa, self.theta, self.sigma, self.v0, self.rho]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CarryTerms {
    pub r: f64,
    pub c: f64,
}

impl CarryTerms {
    pub fn new(r: f64, c: f64) -> Self {
        Self { r, c }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub terminal_price: f64,
    pub integrated_variance: f64,
    pub terminal_variance: f64,
}

/// Characteristic function of `X_T = log S_T`, `E[exp(i omega X_T)]`.
///
/// Accepts complex `omega` so that the share-measure transform
/// `phi(omega - i)` can be formed. Uses the rotation-free form whose
/// logarithm never crosses the principal branch cut, rewritten so that
/// every term stays finite as `sigma -> 0`.
pub fn logprice_cf(omega: Complex64, p: &HestonParams, carry: &CarryTerms, s0: f64, ttm: f64) -> Complex64 {
    log_cf(omega, p, carry, ttm, s0.ln()).exp()
}

fn log_cf(omega: Complex64, p: &HestonParams, carry: &CarryTerms, ttm: f64, ln_s0: f64) -> Complex64 {
    let i = Complex64::i();
    let iw = i * omega;
    let s2 = p.sigma * p.sigma;
    let b = p.kappa - p.rho * p.sigma * iw;
    let q = -(iw + omega * omega);
    let d = (b * b - s2 * q).sqrt();
    let bd = b + d;
    let h = q / (bd * bd);
    let e = (-d * ttm).exp();
    let g = s2 * h;
    let one = Complex64::new(1.0, 0.0);
    let big_d = q / bd * (one - e) / (one - g * e);
    // log((1 - g e) / (1 - g)) / sigma^2
    let log_ratio = if s2 > 0.0 {
        clog1p(g * (one - e) / (one - g)) / s2
    } else {
        h * (one - e)
    };
    let big_c = (carry.r - carry.c) * iw * ttm + p.kappa * p.theta * (q * ttm / bd - 2.0 * log_ratio);
    big_c + big_d * p.v0 + iw * ln_s0
}

/// No-arbitrage bounds `(max(0, S e^{-cT} - K e^{-rT}), S e^{-cT})`.
pub fn call_bounds(s0: f64, strike: f64, ttm: f64, carry: &CarryTerms) -> (f64, f64) {
    let fwd_s = s0 * (-carry.c * ttm).exp();
    let pv_k = strike * (-carry.r * ttm).exp();
    ((fwd_s - pv_k).max(0.0), fwd_s)
}

fn pricing_quad() -> AdaptiveSettings {
    AdaptiveSettings {
        abs_tol: 1e-10,
        rel_tol: 0.0,
        max_intervals: 4000,
    }
}

/// European call price by Fourier inversion of the two exercise
/// probabilities. The result is clamped into the no-arbitrage bounds.
pub fn price_call(p: &HestonParams, carry: &CarryTerms, s0: f64, strike: f64, ttm: f64) -> Result<f64> {
    if !(strike > 0.0 && ttm > 0.0 && s0 > 0.0) {
        return Err(Error::invalid("price_call needs positive strike, spot and maturity"));
    }
    let ln_s0 = s0.ln();
    let ln_k = strike.ln();
    let i = Complex64::i();
    // phi(-i) = E[S_T]
    let ln_fwd = ln_s0 + (carry.r - carry.c) * ttm;
    let p1_integrand = |w: f64| {
        let z = Complex64::new(w, -1.0);
        let v = (log_cf(z, p, carry, ttm, ln_s0) - ln_fwd - i * w * ln_k).exp() / (i * w);
        v.re
    };
    let p2_integrand = |w: f64| {
        let z = Complex64::new(w, 0.0);
        let v = (log_cf(z, p, carry, ttm, ln_s0) - i * w * ln_k).exp() / (i * w);
        v.re
    };
    let settings = pricing_quad();
    let i1 = integrate_to_infinity(p1_integrand, 0.0, 200.0, settings, 1e-12, "P1 probability integral")?;
    let i2 = integrate_to_infinity(p2_integrand, 0.0, 200.0, settings, 1e-12, "P2 probability integral")?;
    let p1 = 0.5 + i1.value / PI;
    let p2 = 0.5 + i2.value / PI;
    let raw = s0 * (-carry.c * ttm).exp() * p1 - strike * (-carry.r * ttm).exp() * p2;
    let (lo, hi) = call_bounds(s0, strike, ttm, carry);
    Ok(raw.clamp(lo, hi))
}

/// Black-Scholes call with continuous carry `c`.
pub fn bs_call(s0: f64, strike: f64, ttm: f64, carry: &CarryTerms, vol: f64) -> f64 {
    let (lo, _) = call_bounds(s0, strike, ttm, carry);
    if vol <= 0.0 {
        return lo;
    }
    let sd = vol * ttm.sqrt();
    let d1 = ((s0 / strike).ln() + (carry.r - carry.c) * ttm) / sd + 0.5 * sd;
    let d2 = d1 - sd;
    s0 * (-carry.c * ttm).exp() * norm_cdf(d1) - strike * (-carry.r * ttm).exp() * norm_cdf(d2)
}

/// Black-Scholes vega with carry.
pub fn bs_vega(s0: f64, strike: f64, ttm: f64, carry: &CarryTerms, vol: f64) -> f64 {
    let sd = vol * ttm.sqrt();
    let d1 = ((s0 / strike).ln() + (carry.r - carry.c) * ttm) / sd + 0.5 * sd;
    s0 * (-carry.c * ttm).exp() * norm_pdf(d1) * ttm.sqrt()
}

/// Black-Scholes implied volatility by safeguarded Newton iteration.
pub fn implied_vol_from_price(price: f64, s0: f64, strike: f64, ttm: f64, carry: &CarryTerms) -> Result<f64> {
    let (lo_px, hi_px) = call_bounds(s0, strike, ttm, carry);
    if !price.is_finite() || price < lo_px || price >= hi_px {
        return Err(Error::invalid(format!(
            "call price {price} outside no-arbitrage bounds ({lo_px}, {hi_px})"
        )));
    }
    if price == lo_px {
        return Ok(0.0);
    }
    let f = |v: f64| bs_call(s0, strike, ttm, carry, v) - price;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::invalid("implied volatility above 1000"));
        }
    }
    let mut v = 0.5 * (lo + hi);
    for _ in 0..300 {
        let fv = f(v);
        if fv.abs() <= 1e-12 * price.max(1.0) {
            return Ok(v);
        }
        if fv > 0.0 {
            hi = v;
        } else {
            lo = v;
        }
        let vega = bs_vega(s0, strike, ttm, carry, v);
        let newton = v - fv / vega;
        v = if vega > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-16 {
            break;
        }
    }
    Ok(v)
}

pub const LOWER_BOUNDS: [f64; 5] = [0.01, 1e-4, 0.01, 1e-4, -0.99];
pub const UPPER_BOUNDS: [f64; 5] = [20.0, 1.0, 3.0, 1.0, 0.99];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuoteResidual {
    pub strike: f64,
    pub ttm: f64,
    pub underlying: f64,
    pub market: f64,
    pub model: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub params: HestonParams,
    pub carry: CarryTerms,
    pub initial_objective: f64,
    /// Sum of squared price residuals.
    pub objective: f64,
    /// Accepted objective values, one per accepted step.
    pub objective_history: Vec<f64>,
    pub residuals: Vec<QuoteResidual>,
    /// Root mean squared price residual.
    pub rmse: f64,
    pub iterations: usize,
    pub starts_used: usize,
    pub converged: bool,
    pub feller_satisfied: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrationSettings {
    pub max_iter: usize,
    /// Stop once an accepted step improves the objective by less than this
    /// relative amount.
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_starts: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-12,
            abs_tol: 1e-24,
            max_starts: 3,
        }
    }
}

fn project(x: [f64; 5]) -> [f64; 5] {
    let mut out = x;
    for j in 0..5 {
        out[j] = x[j].clamp(LOWER_BOUNDS[j], UPPER_BOUNDS[j]);
    }
    out
}

struct Target {
    s0: f64,
    strike: f64,
    ttm: f64,
    market: f64,
}

fn residuals(x: &[f64; 5], targets: &[Target], carry: &CarryTerms) -> Result<Vec<f64>> {
    let p = HestonParams::from_array(*x);
    targets
        .par_iter()
        .map(|t| price_call(&p, carry, t.s0, t.strike, t.ttm).map(|m| m - t.market))
        .collect()
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

struct LmOutcome {
    x: [f64; 5],
    f: f64,
    history: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Projected Levenberg-Marquardt with central-difference Jacobian. Only
/// steps that strictly reduce the objective are accepted.
fn levenberg_marquardt(
    x0: [f64; 5],
    targets: &[Target],
    carry: &CarryTerms,
    settings: &CalibrationSettings,
) -> Result<LmOutcome> {
    let mut x = project(x0);
    let mut r = residuals(&x, targets, carry)?;
    let mut f = sum_sq(&r);
    let mut history = vec![f];
    let mut lambda = 1e-3;
    let mut converged = f <= settings.abs_tol;
    let mut it = 0;
    let n = targets.len();
    while !converged && it < settings.max_iter {
        it += 1;
        // Jacobian, one column per parameter.
        let mut jac = nalgebra::DMatrix::<f64>::zeros(n, 5);
        for j in 0..5 {
            let step = 1e-5 * (UPPER_BOUNDS[j] - LOWER_BOUNDS[j]).min(x[j].abs().max(1e-2));
            let mut xp = x;
            let mut xm = x;
            xp[j] = (x[j] + step).min(UPPER_BOUNDS[j]);
            xm[j] = (x[j] - step).max(LOWER_BOUNDS[j]);
            let rp = residuals(&xp, targets, carry)?;
            let rm = residuals(&xm, targets, carry)?;
            let span = xp[j] - xm[j];
            for i in 0..n {
                jac[(i, j)] = (rp[i] - rm[i]) / span;
            }
        }
        let rv = nalgebra::DVector::from_vec(r.clone());
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * rv;
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for k in 0..5 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.clone().lu().solve(&(-&g)) else {
                lambda *= 4.0;
                continue;
            };
            let mut cand = x;
            for k in 0..5 {
                cand[k] += step[k];
            }
            let cand = project(cand);
            let rc = match residuals(&cand, targets, carry) {
                Ok(rc) => rc,
                Err(_) => {
                    lambda *= 4.0;
                    continue;
                }
            };
            let fc = sum_sq(&rc);
            if fc < f {
                let rel = (f - fc) / f.max(f64::MIN_POSITIVE);
                x = cand;
                r = rc;
                f = fc;
                history.push(f);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel < settings.rel_tol || f <= settings.abs_tol {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !accepted {
            // No descent direction left at machine precision: a stationary point.
            converged = true;
        }
    }
    Ok(LmOutcome {
        x,
        f,
        history,
        iterations: it,
        converged,
    })
}

/// Alternative deterministic starting points tried after a failed start.
fn restart_points(init: [f64; 5]) -> Vec<[f64; 5]> {
    vec![
        init,
        project([
            init[0] * 0.5,
            init[1] * 1.5,
            init[2] * 0.7,
            init[3] * 1.2,
            init[4] * 0.5,
        ]),
        [2.0, 0.04, 0.4, 0.04, -0.5],
    ]
}

/// Least-squares fit of Heston parameters to observed call mid prices.
pub fn calibrate(
    quotes: &[OptionQuote],
    carry: &CarryTerms,
    init: &HestonParams,
    settings: &CalibrationSettings,
) -> Result<CalibrationReport> {
    if quotes.len() < 5 {
        return Err(Error::invalid("calibration needs at least 5 quotes"));
    }
    let mut ttms: Vec<f64> = quotes.iter().map(|q| q.ttm).collect();
    ttms.sort_by(f64::total_cmp);
    ttms.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
    if ttms.len() < 2 {
        return Err(Error::invalid("calibration needs quotes at two or more maturities"));
    }
    init.validate()?;
    let targets: Vec<Target> = quotes
        .iter()
        .map(|q| Target {
            s0: q.underlying,
            strike: q.strike,
            ttm: q.ttm,
            market: q.mid_price,
        })
        .collect();
    let x_init = project(init.to_array());
    let initial_objective = residuals(&x_init, &targets, carry)
        .map(|r| sum_sq(&r))
        .unwrap_or(f64::INFINITY);

    let mut best: Option<(LmOutcome, usize)> = None;
    let mut last_err = None;
    for (k, start) in restart_points(x_init)
        .into_iter()
        .enumerate()
        .take(settings.max_starts.max(1))
    {
        match levenberg_marquardt(start, &targets, carry, settings) {
            Ok(out) => {
                let done = out.converged;
                let better = best.as_ref().map(|(b, _)| out.f < b.f).unwrap_or(true);
                if better {
                    best = Some((out, k + 1));
                }
                if done {
                    break;
                }
                log::warn!("calibration start {} did not converge, restarting", k + 1);
            }
            Err(e) => {
                log::warn!("calibration start {} failed: {e}", k + 1);
                last_err = Some(e);
            }
        }
    }
    let Some((out, starts_used)) = best else {
        return Err(Error::Optimizer {
            reason: last_err.map(|e| e.to_string()).unwrap_or_default(),
            best_params: x_init,
            best_objective: initial_objective,
        });
    };
    // The first start begins at init, so its objective can only have dropped.
    if out.f > initial_objective {
        return Err(Error::Optimizer {
            reason: "no start improved on the initial objective".into(),
            best_params: out.x,
            best_objective: out.f,
        });
    }
    let params = HestonParams::from_array(out.x);
    let r = residuals(&out.x, &targets, carry)?;
    let residuals: Vec<QuoteResidual> = targets
        .iter()
        .zip(&r)
        .map(|(t, &res)| QuoteResidual {
            strike: t.strike,
            ttm: t.ttm,
            underlying: t.s0,
            market: t.market,
            model: t.market + res,
            residual: res,
        })
        .collect();
    let feller = params.feller_satisfied();
    if !feller {
        log::warn!("calibrated parameters violate the Feller condition 2*kappa*theta >= sigma^2");
    }
    Ok(CalibrationReport {
        params,
        carry: *carry,
        initial_objective,
        objective: out.f,
        objective_history: out.history,
        rmse: (sum_sq(&r) / r.len() as f64).sqrt(),
        residuals,
        iterations: out.iterations,
        starts_used,
        converged: out.converged,
        feller_satisfied: feller,
    })
}

/// Paths per RNG substream; fixes the work partition independently of the
/// thread pool.
pub const PATH_BLOCK: usize = 1024;

/// Full-truncation Euler scheme on `(log S, V)` with `n_steps` equal steps.
pub fn simulate_euler(
    p: &HestonParams,
    carry: &CarryTerms,
    s0: f64,
    ttm: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathSample>> {
    p.validate()?;
    if n_steps == 0 || n_paths == 0 || !(ttm > 0.0) || !(s0 > 0.0) {
        return Err(Error::invalid("simulate_euler needs n_steps, n_paths, ttm, s0 > 0"));
    }
    let n_blocks = n_paths.div_ceil(PATH_BLOCK);
    let blocks: Vec<Vec<PathSample>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let count = PATH_BLOCK.min(n_paths - b * PATH_BLOCK);
            simulate_block(p, carry, s0, ttm, n_steps, count, seed, b as u64)
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

#[allow(clippy::too_many_arguments)]
fn simulate_block(
    p: &HestonParams,
    carry: &CarryTerms,
    s0: f64,
    ttm: f64,
    n_steps: usize,
    count: usize,
    seed: u64,
    block: u64,
) -> Vec<PathSample> {
    let mut rng = substream(seed, block);
    let h = ttm / n_steps as f64;
    let sqrt_h = h.sqrt();
    let rho_c = (1.0 - p.rho * p.rho).sqrt();
    let drift = (carry.r - carry.c) * h;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut x = 0.0;
        let mut v = p.v0;
        let mut acc = 0.0;
        for _ in 0..n_steps {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let vp = v.max(0.0);
            let sv = (vp).sqrt() * sqrt_h;
            acc += vp;
            x += drift - 0.5 * vp * h + sv * z1;
            v += p.kappa * (p.theta - vp) * h + p.sigma * sv * (p.rho * z1 + rho_c * z2);
        }
        out.push(PathSample {
            terminal_price: s0 * x.exp(),
            integrated_variance: h * acc,
            terminal_variance: v.max(0.0),
        });
    }
    out
}
