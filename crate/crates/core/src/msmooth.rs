//! Local linear M-smoothing with Huber loss and bootstrap uniform
//! confidence bands.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::substream;
use crate::numerics::{median, quantile_sorted};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Gaussian,
    /// Biweight, `15/16 (1 − u²)²` on `|u| ≤ 1`.
    Quartic,
}

impl Kernel {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            Kernel::Quartic => {
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    let a = 1.0 - u * u;
                    0.9375 * a * a
                }
            }
        }
    }

    /// `K_h(d) = K(d/h)/h`.
    pub fn scaled(self, d: f64, h: f64) -> f64 {
        self.eval(d / h) / h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmootherConfig {
    pub kernel: Kernel,
    pub h: f64,
    pub huber_c: f64,
    pub eval_grid: Vec<f64>,
    /// Fraction of the design trimmed from each end to form the band support.
    pub support_trim: f64,
}

impl SmootherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !(self.huber_c > 0.0) {
            return Err(Error::invalid("bandwidth and Huber constant must be positive"));
        }
        if !(0.0..0.5).contains(&self.support_trim) {
            return Err(Error::invalid("support_trim must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

const IRLS_MAX_ITER: usize = 100;
const GRAD_TOL: f64 = 1e-10;

#[inline]
pub fn huber_rho(u: f64, c: f64) -> f64 {
    if u.abs() <= c {
        0.5 * u * u
    } else {
        c * u.abs() - 0.5 * c * c
    }
}

#[inline]
pub fn huber_psi(u: f64, c: f64) -> f64 {
    u.clamp(-c, c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFit {
    pub value: f64,
    pub slope: f64,
    pub iterations: usize,
    pub converged: bool,
    /// No data point carries kernel weight.
    pub empty: bool,
}

/// Kernel weights around one evaluation point, normalized to sum one and
/// restricted to the points that carry weight.
#[derive(Debug, Clone)]
pub struct LocalDesign {
    idx: Vec<usize>,
    w: Vec<f64>,
    d: Vec<f64>,
}

impl LocalDesign {
    pub fn new(x: &[f64], x0: f64, kernel: Kernel, h: f64, skip: Option<usize>) -> Self {
        let mut idx = Vec::new();
        let mut w = Vec::new();
        let mut d = Vec::new();
        for (i, &xi) in x.iter().enumerate() {
            if Some(i) == skip {
                continue;
            }
            let k = kernel.scaled(xi - x0, h);
            if k > 0.0 {
                idx.push(i);
                w.push(k);
                d.push(xi - x0);
            }
        }
        let total: f64 = w.iter().sum();
        for wi in w.iter_mut() {
            *wi /= total;
        }
        Self { idx, w, d }
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    fn objective(&self, y: &[f64], a: f64, b: f64, c: f64) -> f64 {
        let mut s = 0.0;
        for k in 0..self.idx.len() {
            s += self.w[k] * huber_rho(y[self.idx[k]] - a - b * self.d[k], c);
        }
        s
    }

    fn gradient_norm(&self, y: &[f64], a: f64, b: f64, c: f64) -> f64 {
        let (mut g0, mut g1) = (0.0, 0.0);
        for k in 0..self.idx.len() {
            let p = self.w[k] * huber_psi(y[self.idx[k]] - a - b * self.d[k], c);
            g0 += p;
            g1 += p * self.d[k];
        }
        (g0 * g0 + g1 * g1).sqrt()
    }

    /// Weighted LS with extra weights `omega(a, b)` from the current fit.
    fn wls(&self, y: &[f64], a: f64, b: f64, c: f64) -> (f64, f64) {
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..self.idx.len() {
            let yi = y[self.idx[k]];
            let d = self.d[k];
            let u = (yi - a - b * d).abs();
            let wi = if u <= c { self.w[k] } else { self.w[k] * c / u };
            s0 += wi;
            s1 += wi * d;
            s2 += wi * d * d;
            t0 += wi * yi;
            t1 += wi * d * yi;
        }
        let det = s0 * s2 - s1 * s1;
        if det.abs() <= 1e-14 * s0 * s2.max(f64::MIN_POSITIVE) {
            // One effective design point: local constant.
            return (t0 / s0, 0.0);
        }
        ((s2 * t0 - s1 * t1) / det, (s0 * t1 - s1 * t0) / det)
    }

    /// Hat-matrix diagonal of the local linear least-squares fit for data
    /// point `i`, when this design is centered at that point.
    pub fn leverage(&self, i: usize) -> f64 {
        let Some(k) = self.idx.iter().position(|&j| j == i) else {
            return 0.0;
        };
        let (mut s1, mut s2) = (0.0, 0.0);
        for (w, d) in self.w.iter().zip(&self.d) {
            s1 += w * d;
            s2 += w * d * d;
        }
        let det = s2 - s1 * s1;
        if det.abs() <= 1e-14 * s2.max(f64::MIN_POSITIVE) {
            return self.w[k];
        }
        self.w[k] * (s2 - s1 * self.d[k]) / det
    }

    /// Local linear Huber fit by iteratively reweighted least squares,
    /// started from the least-squares fit.
    pub fn fit(&self, y: &[f64], c: f64) -> LocalFit {
        if self.is_empty() {
            return LocalFit {
                value: f64::NAN,
                slope: f64::NAN,
                iterations: 0,
                converged: false,
                empty: true,
            };
        }
        let (mut a, mut b) = self.wls(y, 0.0, 0.0, f64::INFINITY);
        let mut f = self.objective(y, a, b, c);
        let mut converged = false;
        let mut it = 0;
        while it < IRLS_MAX_ITER {
            if self.gradient_norm(y, a, b, c) < GRAD_TOL {
                converged = true;
                break;
            }
            it += 1;
            let (na, nb) = self.wls(y, a, b, c);
            let (mut ta, mut tb) = (na, nb);
            let mut nf = self.objective(y, ta, tb, c);
            let mut step = 1.0;
            // Damp oscillating steps.
            while nf > f && step > 1e-6 {
                step *= 0.5;
                ta = a + step * (na - a);
                tb = b + step * (nb - b);
                nf = self.objective(y, ta, tb, c);
            }
            if nf > f || (ta == a && tb == b) {
                converged = self.gradient_norm(y, a, b, c) < GRAD_TOL;
                break;
            }
            a = ta;
            b = tb;
            f = nf;
        }
        LocalFit {
            value: a,
            slope: b,
            iterations: it,
            converged,
            empty: false,
        }
    }
}

/// Local linear Huber fit at `x0`; `skip` leaves one observation out.
pub fn local_fit(x: &[f64], y: &[f64], x0: f64, kernel: Kernel, h: f64, c: f64, skip: Option<usize>) -> LocalFit {
    LocalDesign::new(x, x0, kernel, h, skip).fit(y, c)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmFit {
    pub grid: Vec<f64>,
    /// `NaN` where the neighborhood is empty.
    pub values: Vec<f64>,
    pub empty: Vec<bool>,
    /// `y − m̂(x)` at the data points.
    pub residuals: Vec<f64>,
    pub all_converged: bool,
}

fn check_xy(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid("x and y lengths differ"));
    }
    if x.len() < 10 {
        return Err(Error::invalid("the smoother needs at least 10 points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite data"));
    }
    Ok(())
}

fn fit_points(x: &[f64], y: &[f64], pts: &[f64], kernel: Kernel, h: f64, c: f64) -> Vec<LocalFit> {
    pts.iter().map(|&p| local_fit(x, y, p, kernel, h, c, None)).collect()
}

pub fn fit_llm(x: &[f64], y: &[f64], cfg: &SmootherConfig) -> Result<LlmFit> {
    check_xy(x, y)?;
    cfg.validate()?;
    let grid_fits = fit_points(x, y, &cfg.eval_grid, cfg.kernel, cfg.h, cfg.huber_c);
    let data_fits = fit_points(x, y, x, cfg.kernel, cfg.h, cfg.huber_c);
    let all_converged = grid_fits.iter().chain(&data_fits).all(|f| f.empty || f.converged);
    if !all_converged {
        log::warn!("IRLS hit the iteration cap at some points");
    }
    Ok(LlmFit {
        grid: cfg.eval_grid.clone(),
        values: grid_fits.iter().map(|f| f.value).collect(),
        empty: grid_fits.iter().map(|f| f.empty).collect(),
        residuals: y.iter().zip(&data_fits).map(|(yi, f)| yi - f.value).collect(),
        all_converged,
    })
}

/// Median absolute deviation about the median.
pub fn mad(v: &[f64]) -> f64 {
    let m = median(v);
    let dev: Vec<f64> = v.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

/// `1.345 × 1.4826 × MAD` of the residuals of a local linear least-squares
/// pilot fit with bandwidth `h`.
pub fn huber_constant(x: &[f64], y: &[f64], kernel: Kernel, h: f64) -> Result<f64> {
    check_xy(x, y)?;
    let resid: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(&xi, yi)| yi - local_fit(x, y, xi, kernel, h, f64::INFINITY, None).value)
        .collect();
    let scale = 1.4826 * mad(&resid);
    let floor = f64::EPSILON * y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    Ok((1.345 * scale).max(floor))
}

/// Oversmoothing bandwidth `g = h · n^{1/5 − 1/9}`.
pub fn oversmoothing_bandwidth(h: f64, n: usize) -> f64 {
    h * (n as f64).powf(0.2 - 1.0 / 9.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    pub h: f64,
    pub h_grid: Vec<f64>,
    /// Mean leave-one-out Huber loss per candidate; infinite when some
    /// held-out point has no neighbors.
    pub scores: Vec<f64>,
}

/// Leave-one-out cross-validated bandwidth. Ties go to the smallest `h`.
pub fn cv_bandwidth(x: &[f64], y: &[f64], kernel: Kernel, huber_c: f64, h_grid: &[f64]) -> Result<CvResult> {
    check_xy(x, y)?;
    if h_grid.is_empty() || h_grid.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::invalid("bandwidth grid must be nonempty and positive"));
    }
    let scores: Vec<f64> = h_grid
        .par_iter()
        .map(|&h| {
            let mut s = 0.0;
            for i in 0..x.len() {
                let f = local_fit(x, y, x[i], kernel, h, huber_c, Some(i));
                if f.empty {
                    return f64::INFINITY;
                }
                s += huber_rho(y[i] - f.value, huber_c);
            }
            s / x.len() as f64
        })
        .collect();
    let mut order: Vec<usize> = (0..h_grid.len()).collect();
    order.sort_by(|&a, &b| h_grid[a].total_cmp(&h_grid[b]));
    let mut best = order[0];
    for &k in &order[1..] {
        let (s, sb) = (scores[k], scores[best]);
        let tie = (s - sb).abs() <= 1e-12 * sb.abs().max(s.abs()) || (s - sb).abs() <= 1e-24;
        if s < sb && !tie {
            best = k;
        }
    }
    Ok(CvResult {
        h: h_grid[best],
        h_grid: h_grid.to_vec(),
        scores,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformBand {
    pub grid: Vec<f64>,
    pub fit: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub d_star: f64,
    /// Pointwise scale `q(x)`; the half-width is `q(x) · d_star`.
    pub scale: Vec<f64>,
    pub degenerate: bool,
}

/// Residual resampler for the kernel-weighted conditional edf, centered
/// at each design point.
pub struct ConditionalResampler {
    /// Cumulative normalized weights per design point.
    cdf: Vec<Vec<f64>>,
    /// Kernel-weighted residual mean per design point.
    pub centers: Vec<f64>,
    residuals: Vec<f64>,
}

impl ConditionalResampler {
    pub fn new(x: &[f64], residuals: &[f64], kernel: Kernel, h: f64) -> Self {
        let n = x.len();
        let mut cdf = Vec::with_capacity(n);
        let mut centers = Vec::with_capacity(n);
        for t in 0..n {
            let w: Vec<f64> = x.iter().map(|&xs| kernel.scaled(x[t] - xs, h)).collect();
            let total: f64 = w.iter().sum();
            let mut acc = 0.0;
            let mut c = Vec::with_capacity(n);
            let mut mean = 0.0;
            for (wi, e) in w.iter().zip(residuals) {
                acc += wi / total;
                mean += wi / total * e;
                c.push(acc);
            }
            cdf.push(c);
            centers.push(mean);
        }
        Self {
            cdf,
            centers,
            residuals: residuals.to_vec(),
        }
    }

    /// Normalized weights of design point `t` over the residual pool.
    pub fn weights(&self, t: usize) -> Vec<f64> {
        let c = &self.cdf[t];
        (0..c.len())
            .map(|s| if s == 0 { c[0] } else { c[s] - c[s - 1] })
            .collect()
    }

    /// Index of the residual drawn for design point `t` given `u ∈ [0, 1)`.
    pub fn pick(&self, t: usize, u: f64) -> usize {
        let c = &self.cdf[t];
        let target = u * c[c.len() - 1];
        c.partition_point(|&v| v <= target).min(c.len() - 1)
    }

    /// Centered residual for design point `t`.
    pub fn draw<R: Rng>(&self, t: usize, rng: &mut R) -> f64 {
        let s = self.pick(t, rng.random::<f64>());
        self.residuals[s] - self.centers[t]
    }
}

/// Empirical `[trim, 1 − trim]` quantile range of the design.
pub fn trimmed_support(x: &[f64], trim: f64) -> (f64, f64) {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile_sorted(&s, trim), quantile_sorted(&s, 1.0 - trim))
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Pointwise scale `sqrt(Ê ψ²(ε)) / (sqrt(f̂_X(x)) f̂_ε(0))`. The ψ-moment
/// and the design density are local; the residual density at zero is
/// pooled over the design.
fn band_scale(x: &[f64], resid: &[f64], pts: &[f64], kernel: Kernel, h: f64, c: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let b = (1.06 * std_dev(resid) * n.powf(-0.2)).max(f64::MIN_POSITIVE);
    let f_eps0 = resid.iter().map(|e| Kernel::Gaussian.scaled(*e, b)).sum::<f64>() / n;
    pts.iter()
        .map(|&p| {
            let (mut wsum, mut psi2) = (0.0, 0.0);
            for (xi, e) in x.iter().zip(resid) {
                let w = kernel.scaled(p - xi, h);
                wsum += w;
                psi2 += w * huber_psi(*e, c).powi(2);
            }
            (psi2 / wsum).sqrt() / ((wsum / n).sqrt() * f_eps0)
        })
        .collect()
}

/// Bootstrap uniform confidence band over the trimmed support.
///
/// Residuals from the `h`-fit are resampled from the centered conditional
/// edf around the `g`-fit, each replicate is refit with bandwidth `h`, and
/// the `(1 − α)` quantile of the scaled sup-deviation sets the width.
pub fn uniform_band(
    x: &[f64],
    y: &[f64],
    cfg: &SmootherConfig,
    g: f64,
    n_boot: usize,
    alpha: f64,
    seed: u64,
) -> Result<UniformBand> {
    check_xy(x, y)?;
    cfg.validate()?;
    if !(g > cfg.h) {
        return Err(Error::invalid("oversmoothing bandwidth g must exceed h"));
    }
    if n_boot < 100 {
        return Err(Error::invalid("at least 100 bootstrap replicates are required"));
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::invalid("alpha must lie in (0, 0.5)"));
    }
    let (j_lo, j_hi) = trimmed_support(x, cfg.support_trim);
    let grid: Vec<f64> = cfg
        .eval_grid
        .iter()
        .copied()
        .filter(|g| *g >= j_lo && *g <= j_hi)
        .collect();
    if grid.is_empty() {
        return Err(Error::invalid("no evaluation points inside the trimmed support"));
    }
    let (kernel, h, c) = (cfg.kernel, cfg.h, cfg.huber_c);
    let fit_h: Vec<f64> = fit_points(x, y, &grid, kernel, h, c).iter().map(|f| f.value).collect();
    let data_designs: Vec<LocalDesign> = x.iter().map(|&xi| LocalDesign::new(x, xi, kernel, h, None)).collect();
    let resid: Vec<f64> = data_designs
        .iter()
        .zip(y)
        .map(|(dsg, yi)| yi - dsg.fit(y, c).value)
        .collect();
    let scale_y = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if resid.iter().all(|e| e.abs() <= 1e-12 * scale_y) {
        log::warn!("residuals are numerically zero; returning a zero-width band");
        return Ok(UniformBand {
            lower: fit_h.clone(),
            upper: fit_h.clone(),
            fit: fit_h,
            scale: vec![0.0; grid.len()],
            grid,
            alpha,
            d_star: 0.0,
            degenerate: true,
        });
    }
    let q = band_scale(x, &resid, &grid, kernel, h, c);
    let m_g_data: Vec<f64> = fit_points(x, y, x, kernel, g, c).iter().map(|f| f.value).collect();
    let m_g_grid: Vec<f64> = fit_points(x, y, &grid, kernel, g, c).iter().map(|f| f.value).collect();
    // Smoother residuals are shrunk by the fit's own weight on each point.
    let pool: Vec<f64> = resid
        .iter()
        .zip(&data_designs)
        .enumerate()
        .map(|(t, (e, dsg))| e / (1.0 - dsg.leverage(t)).max(1e-3).sqrt())
        .collect();
    let sampler = ConditionalResampler::new(x, &pool, kernel, h);
    let designs: Vec<LocalDesign> = grid.iter().map(|&p| LocalDesign::new(x, p, kernel, h, None)).collect();

    let mut d: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, b as u64);
            let eps: Vec<f64> = (0..x.len()).map(|t| sampler.draw(t, &mut rng)).collect();
            let y_star: Vec<f64> = eps.iter().zip(&m_g_data).map(|(e, m)| m + e).collect();

            designs
                .iter()
                .enumerate()
                .map(|(k, dsg)| (dsg.fit(&y_star, c).value - m_g_grid[k]).abs() / q[k])
                .fold(0.0, f64::max)
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let k = ((1.0 - alpha) * n_boot as f64).ceil() as usize;
    let d_star = d[k.clamp(1, n_boot) - 1];
    let half: Vec<f64> = q.iter().map(|qk| qk * d_star).collect();
    Ok(UniformBand {
        lower: fit_h.iter().zip(&half).map(|(f, w)| f - w).collect(),
        upper: fit_h.iter().zip(&half).map(|(f, w)| f + w).collect(),
        fit: fit_h,
        scale: q,
        grid,
        alpha,
        d_star,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandComparison {
    pub disjoint: bool,
    /// Length of the intersection of the two intervals per grid point.
    pub overlap: Vec<f64>,
}

/// Whether two bands on a shared grid are disjoint at every grid point.
pub fn bands_disjoint(a: &UniformBand, b: &UniformBand) -> Result<BandComparison> {
    if a.grid.len() != b.grid.len() || a.grid.iter().zip(&b.grid).any(|(x, y)| (x - y).abs() > 1e-12) {
        return Err(Error::invalid("bands are on different grids"));
    }
    let mut disjoint = true;
    let overlap = (0..a.grid.len())
        .map(|k| {
            if !(a.upper[k] < b.lower[k] || b.upper[k] < a.lower[k]) {
                disjoint = false;
            }
            (a.upper[k].min(b.upper[k]) - a.lower[k].max(b.lower[k])).max(0.0)
        })
        .collect();
    Ok(BandComparison { disjoint, overlap })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let y = x.iter().map(|x| 0.3 - 0.2 * x).collect();
        (x, y)
    }

    #[test]
    fn reproduces_lines() {
        let (x, y) = line(40);
        let cfg = SmootherConfig {
            kernel: Kernel::Gaussian,
            h: 0.1,
            huber_c: 1e6,
            eval_grid: vec![0.2, 0.5, 0.8],
            support_trim: 0.05,
        };
        let f = fit_llm(&x, &y, &cfg).unwrap();
        for (g, v) in f.grid.iter().zip(&f.values) {
            assert!((v - (0.3 - 0.2 * g)).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_neighborhood_is_flagged() {
        let (x, y) = line(20);
        let cfg = SmootherConfig {
            kernel: Kernel::Quartic,
            h: 0.05,
            huber_c: 1.0,
            eval_grid: vec![0.5, 3.0],
            support_trim: 0.05,
        };
        let f = fit_llm(&x, &y, &cfg).unwrap();
        assert_eq!(f.empty, vec![false, true]);
        assert!(f.values[1].is_nan());
    }

    #[test]
    fn kernels_integrate_to_one() {
        for k in [Kernel::Gaussian, Kernel::Quartic] {
            let s: f64 = (-8000..=8000).map(|i| k.eval(i as f64 * 1e-3) * 1e-3).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn huber_pieces() {
        assert_eq!(huber_rho(0.5, 1.0), 0.125);
        assert_eq!(huber_rho(3.0, 1.0), 2.5);
        assert_eq!(huber_psi(-3.0, 1.0), -1.0);
    }

    #[test]
    fn hand_built_overlap() {
        let mk = |lo: Vec<f64>, hi: Vec<f64>| UniformBand {
            grid: vec![0.0, 1.0, 2.0, 3.0],
            fit: lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect(),
            lower: lo,
            upper: hi,
            alpha: 0.05,
            d_star: 1.0,
            scale: vec![1.0; 4],
            degenerate: false,
        };
        let a = mk(vec![0.0; 4], vec![1.0; 4]);
        let b = mk(vec![0.5, 0.8, 2.0, 3.0], vec![1.5, 1.8, 3.0, 4.0]);
        let r = bands_disjoint(&a, &b).unwrap();
        assert!(!r.disjoint);
        assert_eq!(r.overlap, vec![0.5, 0.19999999999999996, 0.0, 0.0]);
        let same = bands_disjoint(&a, &a).unwrap();
        assert!(!same.disjoint);
        assert_eq!(same.overlap, vec![1.0; 4]);
        let far = mk(vec![2.0; 4], vec![3.0; 4]);
        assert!(bands_disjoint(&a, &far).unwrap().disjoint);
    }
}
