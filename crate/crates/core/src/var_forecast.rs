//! Vector autoregressions for factor loadings.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarModel {
    pub p: usize,
    pub intercept: Vec<f64>,
    /// `coefficients[i]` is the `L × L` matrix of lag `i + 1`, row major.
    pub coefficients: Vec<Vec<Vec<f64>>>,
    /// `(T − p) × L`.
    pub residuals: Vec<Vec<f64>>,
    /// Residual cross-moment divided by `T − p`.
    pub sigma: Vec<Vec<f64>>,
    /// Standard errors laid out like `coefficients`, from the
    /// degrees-of-freedom-adjusted covariance.
    pub coefficient_se: Vec<Vec<Vec<f64>>>,
    pub intercept_se: Vec<f64>,
}

impl VarModel {
    pub fn dim(&self) -> usize {
        self.intercept.len()
    }

    pub fn lag_matrix(&self, i: usize) -> DMatrix<f64> {
        let l = self.dim();
        DMatrix::from_fn(l, l, |r, c| self.coefficients[i][r][c])
    }

    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        let l = self.dim();
        DMatrix::from_fn(l, l, |r, c| self.sigma[r][c])
    }
}

fn rows(z: &DMatrix<f64>) -> Vec<Vec<f64>> {
    z.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Regressor matrix `[1, z_{t−1}, …, z_{t−p}]` and targets `z_t` for
/// `t = start..T`, with `start ≥ p`.
fn design(z: &DMatrix<f64>, p: usize, start: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (t, l) = z.shape();
    let n = t - start;
    let x = DMatrix::from_fn(n, 1 + l * p, |r, c| {
        if c == 0 {
            1.0
        } else {
            let lag = (c - 1) / l + 1;
            z[(start + r - lag, (c - 1) % l)]
        }
    });
    let y = z.rows(start, n).into_owned();
    (x, y)
}

struct LsFit {
    beta: DMatrix<f64>,
    resid: DMatrix<f64>,
    xtx_inv: DMatrix<f64>,
}

fn ls(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<LsFit> {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= 1e-10 * smax {
        return Err(Error::Degenerate(
            "VAR regressors are collinear (constant or duplicated series?)".into(),
        ));
    }
    let beta = svd.solve(y, 0.0).map_err(|e| Error::Degenerate(e.to_string()))?;
    let resid = y - x * &beta;
    let v = svd.v_t.as_ref().unwrap().transpose();
    let d = DMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / (s * s)));
    let xtx_inv = &v * d * v.transpose();
    Ok(LsFit { beta, resid, xtx_inv })
}

/// Equation-wise least squares with intercept.
pub fn fit_var(z: &DMatrix<f64>, p: usize) -> Result<VarModel> {
    let (t, l) = z.shape();
    if p == 0 || l == 0 {
        return Err(Error::invalid("VAR order and dimension must be positive"));
    }
    if t <= l * p + p + 1 {
        return Err(Error::invalid(format!(
            "VAR({p}) in {l} dimensions needs T > {}, got {t}",
            l * p + p + 1
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite loadings"));
    }
    let (x, y) = design(z, p, p);
    let f = ls(&x, &y)?;
    let n = (t - p) as f64;
    let sigma = f.resid.tr_mul(&f.resid) / n;
    let dof = n - (1 + l * p) as f64;
    let sigma_adj = &sigma * (n / dof);
    // beta is (1 + Lp) × L; column j holds equation j.
    let se = |row: usize, eq: usize| (sigma_adj[(eq, eq)] * f.xtx_inv[(row, row)]).max(0.0).sqrt();
    let coefficients = (0..p)
        .map(|i| {
            (0..l)
                .map(|r| (0..l).map(|c| f.beta[(1 + i * l + c, r)]).collect())
                .collect()
        })
        .collect();
    let coefficient_se = (0..p)
        .map(|i| (0..l).map(|r| (0..l).map(|c| se(1 + i * l + c, r)).collect()).collect())
        .collect();
    Ok(VarModel {
        p,
        intercept: (0..l).map(|r| f.beta[(0, r)]).collect(),
        intercept_se: (0..l).map(|r| se(0, r)).collect(),
        coefficients,
        coefficient_se,
        residuals: rows(&f.resid),
        sigma: rows(&sigma),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionRow {
    pub p: usize,
    pub aic: f64,
    pub hq: f64,
    pub sc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSelection {
    pub p_aic: usize,
    pub p_hq: usize,
    pub p_sc: usize,
    pub table: Vec<CriterionRow>,
}

/// AIC, HQ and SC for `p = 1..=p_max`, all on the common sample that
/// drops the first `p_max` observations.
pub fn select_order(z: &DMatrix<f64>, p_max: usize) -> Result<OrderSelection> {
    if p_max == 0 {
        return Err(Error::invalid("p_max must be at least 1"));
    }
    let (t, l) = z.shape();
    if t <= l * p_max + p_max + 1 {
        return Err(Error::invalid(format!("too few observations for p_max = {p_max}")));
    }
    let n = (t - p_max) as f64;
    let mut table = Vec::with_capacity(p_max);
    for p in 1..=p_max {
        let (x, y) = design(z, p, p_max);
        let f = ls(&x, &y)?;
        let sigma = f.resid.tr_mul(&f.resid) / n;
        let logdet = sigma
            .cholesky()
            .map(|c| 2.0 * c.l().diagonal().map(f64::ln).sum())
            .ok_or_else(|| Error::Degenerate("singular residual covariance".into()))?;
        let k = (p * l * l) as f64;
        table.push(CriterionRow {
            p,
            aic: logdet + 2.0 * k / n,
            hq: logdet + 2.0 * n.ln().ln() * k / n,
            sc: logdet + n.ln() * k / n,
        });
    }
    // First minimum wins ties.
    let argmin = |f: fn(&CriterionRow) -> f64| {
        table
            .iter()
            .fold(None::<&CriterionRow>, |best, r| match best {
                Some(b) if f(b) <= f(r) => Some(b),
                _ => Some(r),
            })
            .unwrap()
            .p
    };
    Ok(OrderSelection {
        p_aic: argmin(|r| r.aic),
        p_hq: argmin(|r| r.hq),
        p_sc: argmin(|r| r.sc),
        table,
    })
}

/// `pL × pL` companion matrix.
pub fn companion(model: &VarModel) -> DMatrix<f64> {
    let l = model.dim();
    let p = model.p;
    let mut c = DMatrix::zeros(l * p, l * p);
    for i in 0..p {
        c.view_mut((0, i * l), (l, l)).copy_from(&model.lag_matrix(i));
    }
    for i in 0..l * (p - 1) {
        c[(l + i, i)] = 1.0;
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub stable: bool,
    /// Companion eigenvalue moduli, descending.
    pub moduli: Vec<f64>,
}

pub fn is_stable(model: &VarModel) -> Stability {
    let mut moduli: Vec<f64> = companion(model)
        .complex_eigenvalues()
        .iter()
        .map(|e| e.norm())
        .collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    Stability {
        stable: moduli.iter().all(|m| *m < 1.0),
        moduli,
    }
}

/// One-step forecast from the last `p` observations, oldest first.
pub fn forecast(model: &VarModel, recent: &[Vec<f64>]) -> Result<Vec<f64>> {
    let l = model.dim();
    if recent.len() != model.p || recent.iter().any(|r| r.len() != l) {
        return Err(Error::invalid(format!(
            "forecast needs the last {} observations of dimension {l}",
            model.p
        )));
    }
    let mut out = DVector::from_vec(model.intercept.clone());
    for i in 0..model.p {
        let lagged = DVector::from_vec(recent[recent.len() - 1 - i].clone());
        out += model.lag_matrix(i) * lagged;
    }
    Ok(out.iter().copied().collect())
}

/// Iterated forecasts for `steps` periods.
pub fn forecast_path(model: &VarModel, recent: &[Vec<f64>], steps: usize) -> Result<Vec<Vec<f64>>> {
    let mut hist = recent.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = forecast(model, &hist[hist.len() - model.p..])?;
        hist.push(next.clone());
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Portmanteau {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Multivariate portmanteau (Hosking) statistic on the residual
/// autocovariances up to `lags`.
pub fn portmanteau(model: &VarModel, lags: usize) -> Result<Portmanteau> {
    if lags <= model.p {
        return Err(Error::invalid("portmanteau lags must exceed the VAR order"));
    }
    let l = model.dim();
    let n = model.residuals.len();
    if lags >= n {
        return Err(Error::invalid("more lags than residuals"));
    }
    let u = DMatrix::from_fn(n, l, |r, c| model.residuals[r][c]);
    let cov = |j: usize| -> DMatrix<f64> {
        let a = u.rows(j, n - j);
        let b = u.rows(0, n - j);
        a.tr_mul(&b) / n as f64
    };
    let c0_inv = cov(0)
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("singular residual covariance".into()))?;
    let nf = n as f64;
    let mut q = 0.0;
    for j in 1..=lags {
        let cj = cov(j);
        q += (cj.transpose() * &c0_inv * &cj * &c0_inv).trace() / (nf - j as f64);
    }
    q *= nf * nf;
    let dof = l * l * (lags - model.p);
    let p_value = ChiSquared::new(dof as f64)
        .map(|d| d.sf(q))
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(Portmanteau {
        statistic: q,
        dof,
        p_value,
    })
}

/// Loadings CSV: `t,z1,…,zL`, one row per day.
pub fn write_loadings<W: Write>(w: W, days: &[i64], z: &DMatrix<f64>) -> Result<()> {
    let mut wr = crate::market_data::csv_writer(w);
    let mut head = vec!["t".to_string()];
    head.extend((1..=z.ncols()).map(|i| format!("z{i}")));
    wr.write_record(&head)?;
    for (t, row) in days.iter().zip(z.row_iter()) {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_loadings<R: Read>(r: R) -> Result<(Vec<i64>, DMatrix<f64>)> {
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r);
    let width = rd.headers()?.len();
    if width < 2 {
        return Err(Error::invalid("loadings need a t column and at least one z column"));
    }
    let mut days = Vec::new();
    let mut vals = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        let bad = |m: String| Error::MalformedRow {
            path: "loadings".into(),
            row,
            message: m,
        };
        if rec.len() != width {
            return Err(bad(format!("expected {width} columns")));
        }
        days.push(rec[0].parse::<i64>().map_err(|e| bad(format!("t: {e}")))?);
        for k in 1..width {
            vals.push(rec[k].parse::<f64>().map_err(|e| bad(format!("z{k}: {e}")))?);
        }
    }
    Ok((days.clone(), DMatrix::from_row_slice(days.len(), width - 1, &vals)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(a: &[f64], l: usize) -> VarModel {
        VarModel {
            p: 1,
            intercept: vec![0.0; l],
            coefficients: vec![(0..l).map(|r| a[r * l..(r + 1) * l].to_vec()).collect()],
            residuals: vec![],
            sigma: vec![vec![0.0; l]; l],
            coefficient_se: vec![],
            intercept_se: vec![],
        }
    }

    #[test]
    fn hand_computed_stability() {
        let s = is_stable(&model(&[0.5, 0.0, 0.0, 0.5], 2));
        assert!(s.stable);
        assert!(s.moduli.iter().all(|m| (m - 0.5).abs() < 1e-14));
        assert!(!is_stable(&model(&[1.0, 0.0, 0.0, 1.0], 2)).stable);
        let s = is_stable(&model(&[0.5, 0.4, 0.4, 0.5], 2));
        assert!(s.stable);
        assert!((s.moduli[0] - 0.9).abs() < 1e-14 && (s.moduli[1] - 0.1).abs() < 1e-14);
    }

    #[test]
    fn forecast_arithmetic() {
        let m = model(&[0.5, 0.0, 0.0, 0.5], 2);
        assert_eq!(forecast(&m, &[vec![2.0, -2.0]]).unwrap(), vec![1.0, -1.0]);
        assert!(forecast(&m, &[vec![2.0, -2.0], vec![0.0, 0.0]]).is_err());
        let mut zero = model(&[0.0; 4], 2);
        zero.intercept = vec![0.3, -0.1];
        assert_eq!(forecast(&zero, &[vec![5.0, 7.0]]).unwrap(), vec![0.3, -0.1]);
    }
}
