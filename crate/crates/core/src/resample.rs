//! Overlapping block bootstrap and percentile envelopes of re-run strategies.

use std::io::Write;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures::reprice;
use crate::market_data::{FundSpec, OptionQuote};
use crate::numerics::quantile_sorted;
use crate::numerics::rng::{derive_seed, substream};
use crate::strategy::{bs_delta, run_backtest, CondVarProvider, MarketDay, StrategyConfig, TradeLedger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockBootstrapConfig {
    pub block_size: usize,
    pub n_iterations: usize,
    pub seed: u64,
}

impl BlockBootstrapConfig {
    /// Block size 5 and 500 iterations.
    pub fn paper_defaults(seed: u64) -> Self {
        BlockBootstrapConfig {
            block_size: 5,
            n_iterations: 500,
            seed,
        }
    }

    /// Checks the configuration against a series of `len` rows.
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.block_size == 0 || self.block_size > len {
            return Err(Error::invalid(format!(
                "block size {} must lie in 1..={len}",
                self.block_size
            )));
        }
        if self.n_iterations == 0 {
            return Err(Error::invalid("at least one bootstrap iteration is required"));
        }
        Ok(())
    }
}

/// Number of overlapping blocks of length `b` in a series of length `len`.
pub fn block_count(len: usize, b: usize) -> usize {
    len + 1 - b
}

/// Block start positions for one resample, drawn uniformly with replacement
/// from `0..=len - b`. Enough blocks to cover `len` rows.
pub fn block_starts<R: Rng>(len: usize, b: usize, rng: &mut R) -> Vec<usize> {
    let n_blocks = len.div_ceil(b);
    let k = block_count(len, b);
    (0..n_blocks).map(|_| rng.random_range(0..k)).collect()
}

/// Row indices of resample `iteration`: concatenated blocks truncated to `len`.
pub fn block_indices(len: usize, cfg: &BlockBootstrapConfig, iteration: u64) -> Result<Vec<usize>> {
    cfg.validate(len)?;
    let b = cfg.block_size;
    if b == len {
        return Ok((0..len).collect());
    }
    let mut rng = substream(derive_seed(cfg.seed, "resample", iteration), 0);
    let mut rows: Vec<usize> = block_starts(len, b, &mut rng)
        .into_iter()
        .flat_map(|s| s..s + b)
        .collect();
    rows.truncate(len);
    Ok(rows)
}

/// Jointly resamples the rows of `series`, keeping each row's columns together.
pub fn block_resample(series: &DMatrix<f64>, cfg: &BlockBootstrapConfig, iteration: u64) -> Result<DMatrix<f64>> {
    let rows = block_indices(series.nrows(), cfg, iteration)?;
    Ok(series.select_rows(&rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub probs: Vec<f64>,
    /// `bands[j][s]`: percentile `probs[j]` at step `s`.
    pub bands: Vec<Vec<f64>>,
    pub median: Vec<f64>,
}

/// Pointwise empirical percentiles (linear interpolation between order
/// statistics) and the median across iterations.
pub fn strategy_envelope(rows: &[Vec<f64>], probs: &[f64]) -> Result<Envelope> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::invalid("envelope needs at least one iteration"));
    }
    let steps = rows[0].len();
    if rows.iter().any(|r| r.len() != steps) {
        return Err(Error::invalid("iterations have different lengths"));
    }
    for &p in probs {
        if !(0.0 < p && p < 1.0) {
            return Err(Error::invalid(format!("percentile level {p} outside (0, 1)")));
        }
        // Below this the tail percentile is pure extrapolation of one draw.
        if (n as f64) * p.min(1.0 - p) < 1.0 {
            return Err(Error::invalid(format!(
                "{n} iterations are too few for the {p} percentile"
            )));
        }
    }
    let mut bands = vec![Vec::with_capacity(steps); probs.len()];
    let mut median = Vec::with_capacity(steps);
    let mut col = vec![0.0; n];
    for s in 0..steps {
        for (c, r) in col.iter_mut().zip(rows) {
            *c = r[s];
        }
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at step {s}")));
        }
        col.sort_by(f64::total_cmp);
        for (band, &p) in bands.iter_mut().zip(probs) {
            band.push(quantile_sorted(&col, p));
        }
        median.push(quantile_sorted(&col, 0.5));
    }
    Ok(Envelope {
        probs: probs.to_vec(),
        bands,
        median,
    })
}

fn day_price(quotes: &[OptionQuote], date: NaiveDate, what: &str) -> Result<f64> {
    quotes
        .first()
        .map(|q| q.underlying)
        .ok_or_else(|| Error::invalid(format!("{date}: no {what} quotes to read the underlying from")))
}

/// Log-price increments of the (source, target) underlyings, one row per
/// consecutive pair of days.
pub fn log_increments(days: &[MarketDay]) -> Result<(DMatrix<f64>, [f64; 2])> {
    if days.len() < 2 {
        return Err(Error::invalid("need at least two days to form increments"));
    }
    let mut levels = Vec::with_capacity(days.len());
    for d in days {
        levels.push([
            day_price(&d.source, d.date, "source")?,
            day_price(&d.target, d.date, "target")?,
        ]);
    }
    let inc = DMatrix::from_fn(days.len() - 1, 2, |i, j| (levels[i + 1][j] / levels[i][j]).ln());
    Ok((inc, levels[0]))
}

/// Linear interpolation in log-moneyness within one expiry, flat outside.
fn smile_iv(smile: &[(f64, f64)], lm: f64) -> f64 {
    let (first, last) = (smile[0], smile[smile.len() - 1]);
    if lm <= first.0 {
        return first.1;
    }
    if lm >= last.0 {
        return last.1;
    }
    let j = smile.partition_point(|p| p.0 <= lm);
    let (a, b) = (smile[j - 1], smile[j]);
    a.1 + (b.1 - a.1) * (lm - a.0) / (b.0 - a.0)
}

/// Moves one day's quotes to a new underlying level. Strikes stay listed;
/// each quote takes the IV the day's own smile shows at its new
/// log-moneyness, and is repriced.
fn reanchor(quotes: &[OptionQuote], level: f64, fund: &FundSpec, r: f64) -> Vec<OptionQuote> {
    let mut smiles: std::collections::BTreeMap<NaiveDate, Vec<(f64, f64)>> = Default::default();
    for q in quotes {
        smiles
            .entry(q.expiry)
            .or_default()
            .push((q.log_moneyness(), q.implied_vol));
    }
    for s in smiles.values_mut() {
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
        s.dedup_by(|a, b| a.0 == b.0);
    }
    quotes
        .iter()
        .map(|q| {
            let mut n = q.clone();
            n.underlying = level;
            let iv = smile_iv(&smiles[&q.expiry], n.log_moneyness());
            reprice(&mut n, fund, r, iv);
            n.bid = None;
            n.ask = None;
            if n.delta.is_some() {
                n.delta = Some(bs_delta(level, n.strike, n.ttm, r, iv));
            }
            n
        })
        .collect()
}

/// Market days of bootstrap world `iteration`: joint block resample of the
/// underlying log increments, levels rebuilt from the observed first day,
/// option quotes re-read from each day's smile at the new moneyness.
pub fn bootstrap_world(
    days: &[MarketDay],
    source: &FundSpec,
    target: &FundSpec,
    r: f64,
    cfg: &BlockBootstrapConfig,
    iteration: u64,
) -> Result<Vec<MarketDay>> {
    let (inc, start) = log_increments(days)?;
    let inc = block_resample(&inc, cfg, iteration)?;
    let mut level = start;
    let mut out = Vec::with_capacity(days.len());
    for (i, d) in days.iter().enumerate() {
        if i > 0 {
            level[0] *= inc[(i - 1, 0)].exp();
            level[1] *= inc[(i - 1, 1)].exp();
        }
        out.push(MarketDay {
            date: d.date,
            source: reanchor(&d.source, level[0], source, r),
            target: reanchor(&d.target, level[1], target, r),
        });
    }
    Ok(out)
}

/// Percentile levels of the robustness envelope.
pub const ENVELOPE_PROBS: [f64; 2] = [0.025, 0.975];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub dates: Vec<NaiveDate>,
    /// Cumulative P&L of the strategy on the observed data.
    pub original: Vec<f64>,
    pub envelope: Envelope,
    /// Final cumulative P&L of every iteration, by iteration index.
    pub finals: Vec<f64>,
}

fn curve_values(ledger: &TradeLedger) -> Vec<f64> {
    ledger.curve.iter().map(|c| c.1).collect()
}

/// Re-runs the backtest on `cfg.n_iterations` bootstrap worlds. Each
/// iteration starts from a clone of the provider as the observed run left
/// it, so cached curves are shared; results are gathered by iteration
/// index, so the thread count does not matter.
pub fn robustness<P>(
    days: &[MarketDay],
    source: &FundSpec,
    target: &FundSpec,
    provider: &P,
    strategy: &StrategyConfig,
    cfg: &BlockBootstrapConfig,
) -> Result<RobustnessReport>
where
    P: CondVarProvider + Clone + Send + Sync,
{
    cfg.validate(days.len().saturating_sub(1))?;
    let mut warm = provider.clone();
    let base = run_backtest(days, source, target, &mut warm, strategy)?;
    let curves: Vec<Vec<f64>> = (0..cfg.n_iterations as u64)
        .into_par_iter()
        .map(|it| {
            let world = bootstrap_world(days, source, target, strategy.r, cfg, it)?;
            let ledger = run_backtest(&world, source, target, &mut warm.clone(), strategy)?;
            Ok(curve_values(&ledger))
        })
        .collect::<Result<_>>()?;
    let envelope = strategy_envelope(&curves, &ENVELOPE_PROBS)?;
    Ok(RobustnessReport {
        dates: base.curve.iter().map(|c| c.0).collect(),
        original: curve_values(&base),
        finals: curves.iter().map(|c| c.last().copied().unwrap_or(0.0)).collect(),
        envelope,
    })
}

pub const ENVELOPE_HEADER: &str = "date,original,p2_5,median,p97_5";

/// Envelope CSV, one row per candidate period.
pub fn write_envelope<W: Write>(w: W, report: &RobustnessReport) -> Result<()> {
    let mut out = crate::market_data::csv_writer(w);
    out.write_record(ENVELOPE_HEADER.split(','))?;
    let env = &report.envelope;
    for (s, date) in report.dates.iter().enumerate() {
        out.write_record([
            date.to_string(),
            report.original[s].to_string(),
            env.bands[0][s].to_string(),
            env.median[s].to_string(),
            env.bands[1][s].to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
