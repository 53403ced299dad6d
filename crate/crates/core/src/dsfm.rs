//! Dynamic semiparametric factor model on a tensor B-spline basis.
//!
//! `Y_{t,j} = Σ_l Z_{t,l} m_l(X_{t,j}) + ε`, `m_l = Σ_k A_{l,k} ψ_k`, with
//! `Z_{t,0} = 1`. Fitted by alternating least squares, then normalized so
//! that `m_1..m_L` are orthonormal, orthogonal to `m_0`, and ordered by the
//! variance of their loadings.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::quantile_sorted;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub order_m: usize,
    pub order_t: usize,
    pub knots_m: Vec<f64>,
    pub knots_t: Vec<f64>,
}

fn check_knots(knots: &[f64], order: usize, name: &str) -> Result<()> {
    if order < 1 {
        return Err(Error::invalid(format!("{name}: spline order must be at least 1")));
    }
    if knots.len() < 2 * order {
        return Err(Error::invalid(format!("{name}: need at least {} knots", 2 * order)));
    }
    if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid(format!(
            "{name}: knots must be finite and nondecreasing"
        )));
    }
    let n = knots.len();
    if knots[..order].iter().any(|k| *k != knots[0]) || knots[n - order..].iter().any(|k| *k != knots[n - 1]) {
        return Err(Error::invalid(format!("{name}: end knots need multiplicity {order}")));
    }
    if knots[0] == knots[n - 1] {
        return Err(Error::invalid(format!("{name}: empty knot span")));
    }
    Ok(())
}

impl BasisSpec {
    pub fn new(order_m: usize, order_t: usize, knots_m: Vec<f64>, knots_t: Vec<f64>) -> Result<Self> {
        let b = Self {
            order_m,
            order_t,
            knots_m,
            knots_t,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        check_knots(&self.knots_m, self.order_m, "moneyness knots")?;
        check_knots(&self.knots_t, self.order_t, "maturity knots")
    }

    pub fn u(&self) -> usize {
        self.knots_m.len() - self.order_m
    }

    pub fn v(&self) -> usize {
        self.knots_t.len() - self.order_t
    }

    pub fn k(&self) -> usize {
        self.u() * self.v()
    }

    /// Knots on `[0, 1]` with full end multiplicity and interior knots at
    /// equidistant quantiles of the pooled coordinates.
    pub fn quantile_knots(order_m: usize, order_t: usize, m: usize, n: usize, xm: &[f64], xt: &[f64]) -> Result<Self> {
        Self::new(
            order_m,
            order_t,
            quantile_knot_vector(order_m, m, xm)?,
            quantile_knot_vector(order_t, n, xt)?,
        )
    }

    /// Knots on `[0, 1]` with equally spaced interior knots.
    pub fn uniform(order_m: usize, order_t: usize, m: usize, n: usize) -> Result<Self> {
        let lin = |order: usize, len: usize| -> Vec<f64> {
            let inner = len.saturating_sub(2 * order);
            let mut k = vec![0.0; order];
            k.extend((1..=inner).map(|i| i as f64 / (inner + 1) as f64));
            k.extend(vec![1.0; order]);
            k
        };
        Self::new(order_m, order_t, lin(order_m, m), lin(order_t, n))
    }
}

fn quantile_knot_vector(order: usize, len: usize, x: &[f64]) -> Result<Vec<f64>> {
    if len < 2 * order {
        return Err(Error::invalid("too few knots for the spline order"));
    }
    let inner = len - 2 * order;
    let mut s: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    if s.is_empty() && inner > 0 {
        return Err(Error::invalid("no coordinates for knot placement"));
    }
    s.sort_by(f64::total_cmp);
    let mut k = vec![0.0; order];
    k.extend((1..=inner).map(|i| quantile_sorted(&s, i as f64 / (inner + 1) as f64).clamp(0.0, 1.0)));
    k.extend(vec![1.0; order]);
    Ok(k)
}

/// All `len(knots) − order` B-spline values at `x` (Cox-de Boor). The last
/// knot belongs to the last nonempty interval.
pub fn bspline_values(knots: &[f64], order: usize, x: f64) -> Result<Vec<f64>> {
    let m = knots.len();
    let (lo, hi) = (knots[0], knots[m - 1]);
    if !(x >= lo && x <= hi) {
        return Err(Error::invalid(format!(
            "coordinate {x} outside the knot span [{lo}, {hi}]"
        )));
    }
    let span = if x == hi {
        (0..m - 1).rev().find(|&i| knots[i] < knots[i + 1]).unwrap()
    } else {
        (0..m - 1).find(|&i| knots[i] <= x && x < knots[i + 1]).unwrap()
    };
    let mut n: Vec<f64> = (0..m - 1).map(|j| if j == span { 1.0 } else { 0.0 }).collect();
    for r in 2..=order {
        let mut next = vec![0.0; m - r];
        for (j, slot) in next.iter_mut().enumerate() {
            let d1 = knots[j + r - 1] - knots[j];
            let d2 = knots[j + r] - knots[j + 1];
            let a = if d1 > 0.0 { (x - knots[j]) / d1 * n[j] } else { 0.0 };
            let b = if d2 > 0.0 {
                (knots[j + r] - x) / d2 * n[j + 1]
            } else {
                0.0
            };
            *slot = a + b;
        }
        n = next;
    }
    Ok(n)
}

/// Tensor basis row; column `i·V + j` holds `B_i(x_m) B_j(x_t)`.
pub fn tensor_row(x_m: f64, x_t: f64, basis: &BasisSpec) -> Result<Vec<f64>> {
    let bm = bspline_values(&basis.knots_m, basis.order_m, x_m)?;
    let bt = bspline_values(&basis.knots_t, basis.order_t, x_t)?;
    let mut row = Vec::with_capacity(bm.len() * bt.len());
    for a in &bm {
        for b in &bt {
            row.push(a * b);
        }
    }
    Ok(row)
}

pub fn tensor_design(points: &[(f64, f64)], basis: &BasisSpec) -> Result<DMatrix<f64>> {
    let k = basis.k();
    let mut d = DMatrix::zeros(points.len(), k);
    for (p, &(xm, xt)) in points.iter().enumerate() {
        for (c, v) in tensor_row(xm, xt, basis)?.into_iter().enumerate() {
            d[(p, c)] = v;
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelPoint {
    pub x_m: f64,
    pub x_t: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayPanel {
    pub t: i64,
    pub points: Vec<PanelPoint>,
}

impl DayPanel {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid(format!("day {} has no points", self.t)));
        }
        for p in &self.points {
            if !(0.0..=1.0).contains(&p.x_m) || !(0.0..=1.0).contains(&p.x_t) || !p.y.is_finite() {
                return Err(Error::invalid(format!(
                    "day {}: point ({}, {}, {}) outside the unit square or not finite",
                    self.t, p.x_m, p.x_t, p.y
                )));
            }
        }
        Ok(())
    }
}

pub const PANEL_HEADER: [&str; 4] = ["t", "x_m", "x_t", "y"];

pub fn write_panels<W: Write>(w: W, panels: &[DayPanel]) -> Result<()> {
    let mut wr = crate::market_data::csv_writer(w);
    wr.write_record(PANEL_HEADER)?;
    for d in panels {
        for p in &d.points {
            wr.write_record([d.t.to_string(), p.x_m.to_string(), p.x_t.to_string(), p.y.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Reads `t,x_m,x_t,y` rows into day panels ordered by `t`.
pub fn read_panels<R: Read>(r: R) -> Result<Vec<DayPanel>> {
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut days: BTreeMap<i64, Vec<PanelPoint>> = BTreeMap::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        let field = |k: usize| -> Result<&str> {
            rec.get(k).ok_or_else(|| Error::MalformedRow {
                path: "panels".into(),
                row,
                message: format!("missing column {}", PANEL_HEADER[k]),
            })
        };
        let num = |k: usize| -> Result<f64> {
            field(k)?.parse::<f64>().map_err(|e| Error::MalformedRow {
                path: "panels".into(),
                row,
                message: format!("{}: {e}", PANEL_HEADER[k]),
            })
        };
        let t: i64 = field(0)?.parse().map_err(|e| Error::MalformedRow {
            path: "panels".into(),
            row,
            message: format!("t: {e}"),
        })?;
        days.entry(t).or_default().push(PanelPoint {
            x_m: num(1)?,
            x_t: num(2)?,
            y: num(3)?,
        });
    }
    Ok(days.into_iter().map(|(t, points)| DayPanel { t, points }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    /// Relative change of the objective that ends the iteration.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub converged: bool,
    /// Sum of squared residuals after each full iteration, starting with
    /// the initial value.
    pub objective_history: Vec<f64>,
    /// Linear solves that needed the ridge fallback.
    pub ridge_solves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsfmModel {
    pub basis: BasisSpec,
    pub l: usize,
    /// `(L + 1) × K` coefficients, one row per factor function.
    pub a: Vec<Vec<f64>>,
    /// `T × (L + 1)` loadings with a leading column of ones.
    pub z: Vec<Vec<f64>>,
    /// Day index of each loading row.
    pub days: Vec<i64>,
    pub report: ConvergenceReport,
}

impl DsfmModel {
    pub fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.l + 1, self.basis.k(), |r, c| self.a[r][c])
    }

    pub fn z_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.z.len(), self.l + 1, |r, c| self.z[r][c])
    }

    /// Fitted value at one coordinate for loadings `z_row`.
    pub fn predict(&self, z_row: &[f64], x_m: f64, x_t: f64) -> Result<f64> {
        if z_row.len() != self.l + 1 {
            return Err(Error::invalid("loading vector has the wrong length"));
        }
        let psi = tensor_row(x_m, x_t, &self.basis)?;
        Ok(z_row
            .iter()
            .zip(&self.a)
            .map(|(z, a)| z * a.iter().zip(&psi).map(|(c, p)| c * p).sum::<f64>())
            .sum())
    }

    fn row_of_day(&self, t: i64) -> Result<usize> {
        self.days
            .iter()
            .position(|d| *d == t)
            .ok_or_else(|| Error::invalid(format!("day {t} is not in the model")))
    }
}

struct Day {
    psi: DMatrix<f64>,
    y: DVector<f64>,
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
}

fn prepare(panels: &[DayPanel], basis: &BasisSpec) -> Result<Vec<Day>> {
    panels
        .par_iter()
        .map(|d| {
            d.validate()?;
            let pts: Vec<(f64, f64)> = d.points.iter().map(|p| (p.x_m, p.x_t)).collect();
            let psi = tensor_design(&pts, basis)?;
            let y = DVector::from_iterator(d.points.len(), d.points.iter().map(|p| p.y));
            let gram = psi.tr_mul(&psi);
            let rhs = psi.tr_mul(&y);
            Ok(Day { psi, y, gram, rhs })
        })
        .collect()
}

/// Cholesky solve with a `1e-8 · trace / n` ridge when the system is
/// singular or badly conditioned. Returns whether the ridge was used.
fn solve_with_fallback(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let n = a.nrows();
    let trace = a.trace();
    if let Some(ch) = a.clone().cholesky() {
        let d = ch.l_dirty().diagonal();
        let (dmin, dmax) = (d.min(), d.max());
        if dmin > 0.0 && (dmin / dmax).powi(2) > 1e-13 {
            return (ch.solve(b), false);
        }
    }
    let ridge = if trace > 0.0 { 1e-8 * trace / n as f64 } else { 1e-12 };
    let mut r = a.clone();
    for i in 0..n {
        r[(i, i)] += ridge;
    }
    match r.clone().cholesky() {
        Some(ch) => (ch.solve(b), true),
        None => (
            r.pseudo_inverse(1e-14)
                .map(|p| p * b)
                .unwrap_or_else(|_| DVector::zeros(n)),
            true,
        ),
    }
}

fn objective(days: &[Day], a: &DMatrix<f64>, z: &DMatrix<f64>) -> f64 {
    days.iter()
        .enumerate()
        .map(|(t, d)| {
            let coef = a.tr_mul(&z.row(t).transpose());
            (&d.y - &d.psi * coef).norm_squared()
        })
        .sum()
}

/// Loadings `Z_{t,1..L}` given `A`, solved day by day.
fn z_step(days: &[Day], a: &DMatrix<f64>, l: usize) -> (DMatrix<f64>, usize) {
    let t = days.len();
    let mut z = DMatrix::from_element(t, l + 1, 0.0);
    z.column_mut(0).fill(1.0);
    if l == 0 {
        return (z, 0);
    }
    let a0 = a.row(0).transpose();
    let a1 = a.rows(1, l).into_owned();
    let sols: Vec<(DVector<f64>, bool)> = days
        .par_iter()
        .map(|d| {
            let lhs = &a1 * &d.gram * a1.transpose();
            let rhs = &a1 * (&d.rhs - &d.gram * &a0);
            solve_with_fallback(&lhs, &rhs)
        })
        .collect();
    let mut ridged = 0;
    for (i, (s, r)) in sols.into_iter().enumerate() {
        ridged += r as usize;
        for c in 0..l {
            z[(i, c + 1)] = s[c];
        }
    }
    (z, ridged)
}

/// Coefficients `A` given the loadings, from the Kronecker-structured normal
/// equations `Σ_t (z_t z_tᵀ ⊗ Ψ_tᵀΨ_t) vec A = Σ_t z_t ⊗ Ψ_tᵀ y_t`.
fn a_step(days: &[Day], z: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, bool) {
    let p = z.ncols();
    let dim = p * k;
    let mut lhs = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for (t, d) in days.iter().enumerate() {
        for l1 in 0..p {
            let z1 = z[(t, l1)];
            if z1 == 0.0 {
                continue;
            }
            for i in 0..k {
                rhs[l1 * k + i] += z1 * d.rhs[i];
            }
            for l2 in 0..p {
                let zz = z1 * z[(t, l2)];
                if zz == 0.0 {
                    continue;
                }
                let mut blk = lhs.view_mut((l1 * k, l2 * k), (k, k));
                blk += &d.gram * zz;
            }
        }
    }
    let (sol, ridged) = solve_with_fallback(&lhs, &rhs);
    (DMatrix::from_fn(p, k, |l, i| sol[l * k + i]), ridged)
}

/// Per-day ridge projections onto the basis.
fn day_coefficients(days: &[Day], k: usize) -> Vec<DVector<f64>> {
    days.par_iter()
        .map(|d| {
            let mut g = d.gram.clone();
            let ridge = 1e-8 * g.trace().max(1e-300) / k as f64;
            for i in 0..k {
                g[(i, i)] += ridge;
            }
            g.cholesky()
                .map(|ch| ch.solve(&d.rhs))
                .unwrap_or_else(|| DVector::zeros(k))
        })
        .collect()
}

/// Top `n` principal directions of the rows `c_t`, descending.
fn principal_directions(c: &[DVector<f64>], mean: &DVector<f64>, n: usize) -> Vec<DVector<f64>> {
    let k = mean.len();
    let mut cov = DMatrix::zeros(k, k);
    for ct in c {
        let d = ct - mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    idx.iter()
        .take(n)
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect()
}

fn check_fit_input(panels: &[DayPanel], l: usize, basis: &BasisSpec) -> Result<()> {
    basis.validate()?;
    if panels.len() < l + 2 {
        return Err(Error::invalid(format!(
            "need at least L + 2 = {} days, got {}",
            l + 2,
            panels.len()
        )));
    }
    let total: usize = panels.iter().map(|d| d.points.len()).sum();
    if total < 5 * basis.k() {
        return Err(Error::invalid(format!(
            "need at least 5K = {} points, got {total}",
            5 * basis.k()
        )));
    }
    Ok(())
}

pub fn fit(panels: &[DayPanel], l: usize, basis: &BasisSpec, settings: &FitSettings) -> Result<DsfmModel> {
    check_fit_input(panels, l, basis)?;
    let k = basis.k();
    let days = prepare(panels, basis)?;
    let coefs = day_coefficients(&days, k);
    let mean = coefs.iter().fold(DVector::zeros(k), |acc, c| acc + c) / coefs.len() as f64;
    let dirs = principal_directions(&coefs, &mean, l);
    let mut a = DMatrix::zeros(l + 1, k);
    a.row_mut(0).copy_from(&mean.transpose());
    for (i, d) in dirs.iter().enumerate() {
        a.row_mut(i + 1).copy_from(&d.transpose());
    }
    run_als(panels, &days, l, basis, settings, a)
}

/// Fits `l` factors starting from a smaller model's solution. The added
/// factors start with zero loadings, so the first update cannot raise the
/// objective above the smaller model's.
pub fn fit_from(
    panels: &[DayPanel],
    l: usize,
    basis: &BasisSpec,
    settings: &FitSettings,
    prev: &DsfmModel,
) -> Result<DsfmModel> {
    check_fit_input(panels, l, basis)?;
    if prev.l > l || prev.basis != *basis || prev.z.len() != panels.len() {
        return Err(Error::invalid("previous model does not nest in the requested one"));
    }
    let k = basis.k();
    let days = prepare(panels, basis)?;
    let pa = prev.a_matrix();
    let pz = prev.z_matrix();
    // Directions for the new factors from what the smaller model leaves.
    let coefs = day_coefficients(&days, k);
    let resid: Vec<DVector<f64>> = coefs
        .iter()
        .enumerate()
        .map(|(t, c)| c - pa.tr_mul(&pz.row(t).transpose()))
        .collect();
    let rmean = resid.iter().fold(DVector::zeros(k), |acc, c| acc + c) / resid.len() as f64;
    let dirs = principal_directions(&resid, &rmean, l - prev.l);
    let mut a = DMatrix::zeros(l + 1, k);
    a.rows_mut(0, prev.l + 1).copy_from(&pa);
    for (i, d) in dirs.iter().enumerate() {
        a.row_mut(prev.l + 1 + i).copy_from(&d.transpose());
    }
    let mut z0 = DMatrix::zeros(panels.len(), l + 1);
    z0.columns_mut(0, prev.l + 1).copy_from(&pz);
    let f0 = objective(&days, &a, &z0);
    let mut model = run_als(panels, &days, l, basis, settings, a)?;
    model.report.objective_history.insert(0, f0);
    Ok(model)
}

fn run_als(
    panels: &[DayPanel],
    days: &[Day],
    l: usize,
    basis: &BasisSpec,
    settings: &FitSettings,
    mut a: DMatrix<f64>,
) -> Result<DsfmModel> {
    let k = basis.k();
    let yy: f64 = days.iter().map(|d| d.y.norm_squared()).sum();
    let (mut z, mut ridged) = z_step(days, &a, l);
    let mut f = objective(days, &a, &z);
    let mut history = vec![f];
    let mut converged = false;
    let mut it = 0;
    while it < settings.max_iter {
        it += 1;
        let (na, ra) = a_step(days, &z, k);
        a = na;
        ridged += ra as usize;
        let (nz, rz) = z_step(days, &a, l);
        z = nz;
        ridged += rz;
        let nf = objective(days, &a, &z);
        history.push(nf);
        let change = (f - nf).abs() / f.max(f64::MIN_POSITIVE);
        f = nf;
        if change < settings.tol || nf <= 1e-28 * yy {
            converged = true;
            break;
        }
    }
    if ridged > 0 {
        log::warn!("{ridged} ALS solves needed the ridge fallback");
    }
    if !converged {
        log::warn!("ALS stopped at max_iter = {} before reaching tol", settings.max_iter);
    }
    let (a, z) = orthonormalize(&a, &z, basis)?;
    Ok(DsfmModel {
        basis: basis.clone(),
        l,
        a: (0..a.nrows()).map(|r| a.row(r).iter().copied().collect()).collect(),
        z: (0..z.nrows()).map(|r| z.row(r).iter().copied().collect()).collect(),
        days: panels.iter().map(|d| d.t).collect(),
        report: ConvergenceReport {
            iterations: it,
            converged,
            objective_history: history,
            ridge_solves: ridged,
        },
    })
}

/// Points and trapezoid weights of the `n`-point rule on `[0, 1]`.
pub fn unit_trapezoid(n: usize) -> Vec<(f64, f64)> {
    let h = 1.0 / (n - 1) as f64;
    (0..n)
        .map(|i| (i as f64 * h, if i == 0 || i == n - 1 { 0.5 * h } else { h }))
        .collect()
}

pub const GRAM_NODES: usize = 101;

/// Basis inner products and integrals on the unit square by the
/// `101 × 101` trapezoid rule.
pub fn basis_gram(basis: &BasisSpec) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let one_d = |knots: &[f64], order: usize| -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = knots.len() - order;
        let mut g = DMatrix::zeros(n, n);
        let mut mu = DVector::zeros(n);
        for (x, w) in unit_trapezoid(GRAM_NODES) {
            let b = DVector::from_vec(bspline_values(knots, order, x)?);
            g.ger(w, &b, &b, 1.0);
            mu.axpy(w, &b, 1.0);
        }
        Ok((g, mu))
    };
    let (gm, mm) = one_d(&basis.knots_m, basis.order_m)?;
    let (gt, mt) = one_d(&basis.knots_t, basis.order_t)?;
    Ok((gm.kronecker(&gt), mm.kronecker(&mt)))
}

/// Normalizes `(A, Z)` without changing fitted values: `m_0 ⟂ m_l`,
/// `⟨m_l, m_k⟩ = δ_lk`, loadings decorrelated and ordered by decreasing
/// variance, each `m_l` with a positive mean.
pub fn orthonormalize(a: &DMatrix<f64>, z: &DMatrix<f64>, basis: &BasisSpec) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let l = a.nrows() - 1;
    if l == 0 {
        return Ok((a.clone(), z.clone()));
    }
    let (g, mu) = basis_gram(basis)?;
    let mut a0 = a.row(0).transpose();
    let mut m = a.rows(1, l).into_owned();
    let mut zl = z.columns(1, l).into_owned();

    let gamma = &m * &g * m.transpose();
    let cross = &m * &g * &a0;
    let beta = gamma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Degenerate("factor functions are linearly dependent".into()))?
        .solve(&cross);
    a0 -= m.tr_mul(&beta);
    for mut row in zl.row_iter_mut() {
        row += beta.transpose();
    }

    let eig = SymmetricEigen::new(gamma);
    let lmax = eig.eigenvalues.max();
    if eig.eigenvalues.min() <= 1e-14 * lmax {
        return Err(Error::Degenerate("factor Gram matrix is singular".into()));
    }
    let q = &eig.eigenvectors;
    let inv_sqrt = q * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt())) * q.transpose();
    let sqrt = q * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * q.transpose();
    m = &inv_sqrt * m;
    zl = zl * sqrt;

    let t = zl.nrows() as f64;
    let means = zl.row_mean();
    let mut cov = DMatrix::zeros(l, l);
    for row in zl.row_iter() {
        let d = (row - &means).transpose();
        cov.ger(1.0 / t, &d, &d, 1.0);
    }
    let ce = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..l).collect();
    idx.sort_by(|&x, &y| ce.eigenvalues[y].total_cmp(&ce.eigenvalues[x]));
    let p = DMatrix::from_fn(l, l, |r, c| ce.eigenvectors[(r, idx[c])]);
    m = p.transpose() * m;
    zl = zl * &p;

    for i in 0..l {
        if m.row(i).dot(&mu.transpose()) < 0.0 {
            m.row_mut(i).neg_mut();
            zl.column_mut(i).neg_mut();
        }
    }
    let mut na = DMatrix::zeros(l + 1, a.ncols());
    na.row_mut(0).copy_from(&a0.transpose());
    na.rows_mut(1, l).copy_from(&m);
    let mut nz = z.clone();
    nz.columns_mut(1, l).copy_from(&zl);
    Ok((na, nz))
}

fn check_grid(v: &[f64]) -> Result<()> {
    if v.is_empty() || v.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::invalid("surface grid must be nonempty and inside [0, 1]"));
    }
    Ok(())
}

/// `m̂_l` on the grid; rows follow `grid_m`, columns `grid_t`.
pub fn factor_surface(model: &DsfmModel, l: usize, grid_m: &[f64], grid_t: &[f64]) -> Result<DMatrix<f64>> {
    if l > model.l {
        return Err(Error::invalid(format!("factor {l} exceeds L = {}", model.l)));
    }
    let mut z = vec![0.0; model.l + 1];
    z[l] = 1.0;
    surface_with(model, &z, grid_m, grid_t)
}

fn surface_with(model: &DsfmModel, z: &[f64], grid_m: &[f64], grid_t: &[f64]) -> Result<DMatrix<f64>> {
    check_grid(grid_m)?;
    check_grid(grid_t)?;
    let (u, v) = (model.basis.u(), model.basis.v());
    // Reshape Σ_l z_l A_l into a U × V slab and contract with both bases.
    let mut slab = DMatrix::zeros(u, v);
    for (zl, row) in z.iter().zip(&model.a) {
        for i in 0..u {
            for j in 0..v {
                slab[(i, j)] += zl * row[i * v + j];
            }
        }
    }
    let bm = DMatrix::from_row_iterator(
        grid_m.len(),
        u,
        grid_m
            .iter()
            .map(|x| bspline_values(&model.basis.knots_m, model.basis.order_m, *x))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten(),
    );
    let bt = DMatrix::from_row_iterator(
        grid_t.len(),
        v,
        grid_t
            .iter()
            .map(|x| bspline_values(&model.basis.knots_t, model.basis.order_t, *x))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten(),
    );
    Ok(bm * slab * bt.transpose())
}

/// `m̂_0 + Σ_l z_l m̂_l` on the grid.
pub fn surface_at(model: &DsfmModel, z_row: &[f64], grid_m: &[f64], grid_t: &[f64]) -> Result<DMatrix<f64>> {
    if z_row.len() != model.l + 1 || z_row[0] != 1.0 {
        return Err(Error::invalid("loading row must have length L + 1 and start with 1"));
    }
    surface_with(model, z_row, grid_m, grid_t)
}

fn sse_and_count(model: &DsfmModel, panels: &[DayPanel]) -> Result<(f64, usize)> {
    let mut sse = 0.0;
    let mut n = 0;
    for d in panels {
        let z = &model.z[model.row_of_day(d.t)?];
        for p in &d.points {
            let r = p.y - model.predict(z, p.x_m, p.x_t)?;
            sse += r * r;
            n += 1;
        }
    }
    Ok((sse, n))
}

pub fn explained_variance(model: &DsfmModel, panels: &[DayPanel]) -> Result<f64> {
    let ys: Vec<f64> = panels.iter().flat_map(|d| d.points.iter().map(|p| p.y)).collect();
    if ys.is_empty() {
        return Err(Error::invalid("no observations"));
    }
    let ybar = ys.iter().sum::<f64>() / ys.len() as f64;
    let tss: f64 = ys.iter().map(|y| (y - ybar) * (y - ybar)).sum();
    if tss == 0.0 {
        return Err(Error::invalid("observations have zero total variance"));
    }
    let (sse, _) = sse_and_count(model, panels)?;
    Ok(1.0 - sse / tss)
}

pub fn rmse(model: &DsfmModel, panels: &[DayPanel]) -> Result<f64> {
    let (sse, n) = sse_and_count(model, panels)?;
    if n == 0 {
        return Err(Error::invalid("no observations"));
    }
    Ok((sse / n as f64).sqrt())
}

/// Root mean squared error of forecast loadings on the next day's data.
pub fn rmspe(model: &DsfmModel, z_forecast: &[f64], next: &DayPanel) -> Result<f64> {
    if next.points.is_empty() {
        return Err(Error::invalid("next-day panel is empty"));
    }
    let mut sse = 0.0;
    for p in &next.points {
        let r = p.y - model.predict(z_forecast, p.x_m, p.x_t)?;
        sse += r * r;
    }
    Ok((sse / next.points.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knot_checks() {
        assert!(BasisSpec::new(
            3,
            3,
            vec![0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0],
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        )
        .is_ok());
        assert!(BasisSpec::new(
            3,
            3,
            vec![0.0, 0.0, 0.5, 1.0, 1.0, 1.0],
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        )
        .is_err());
        assert!(BasisSpec::new(2, 2, vec![0.0, 0.0, 0.7, 0.3, 1.0, 1.0], vec![0.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn linear_splines_are_hats() {
        let k = [0.0, 0.0, 0.5, 1.0, 1.0];
        let v = bspline_values(&k, 2, 0.25).unwrap();
        assert_eq!(v, vec![0.5, 0.5, 0.0]);
        let v = bspline_values(&k, 2, 1.0).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 1.0]);
        assert!(bspline_values(&k, 2, 1.2).is_err());
    }

    #[test]
    fn quadratic_partition_of_unity() {
        let k = [0.0, 0.0, 0.0, 0.3, 0.6, 1.0, 1.0, 1.0];
        for i in 0..=100 {
            let s: f64 = bspline_values(&k, 3, i as f64 / 100.0).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn trapezoid_weights_sum_to_one() {
        let s: f64 = unit_trapezoid(GRAM_NODES).iter().map(|p| p.1).sum();
        assert!((s - 1.0).abs() < 1e-14);
    }
}
