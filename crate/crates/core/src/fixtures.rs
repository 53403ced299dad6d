//! Synthetic option markets for tests, the demo and the acceptance suite.
//!
//! The source fund lists calls on a rolling monthly expiry cycle with
//! strikes at fixed log-moneyness offsets. Its implied vols follow a
//! three-factor surface (level, skew, term slope) whose loadings are AR(1).
//! The target fund tracks `β` times the index's daily return less its
//! fees, lists daily expiries around `τ*` on a fixed strike ladder, and
//! quotes the source surface read at the unlevered coordinate plus a
//! persistent discrepancy. Prices are Black-Scholes with the fund's carry.

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heston::{bs_call, CarryTerms};
use crate::market_data::{FundSpec, OptionQuote};
use crate::numerics::rng::{derive_seed, substream};
use crate::strategy::{forecast_period, market_days, FlatVariance, StrategyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub start: NaiveDate,
    pub n_days: usize,
    /// Calendar days between observations; 1 means weekdays only.
    pub day_step: i64,
    pub seed: u64,
    pub source: FundSpec,
    pub target: FundSpec,
    pub r: f64,
    pub source_price: f64,
    pub target_price: f64,
    /// Annualized index volatility of the price path.
    pub index_vol: f64,
    /// Target maturity the daily target expiries are centred on.
    pub tau_star: f64,
    /// Source strikes as log-moneyness offsets.
    pub source_lm: Vec<f64>,
    /// Integrated variance rate used to place target quotes.
    pub variance_rate: f64,
    /// Hold the target fund's price fixed.
    pub frozen_target: bool,
}

impl MarketSpec {
    /// SPY as source and SSO as target with the built-in fund table.
    pub fn standard(n_days: usize, seed: u64) -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2014, 11, 3).expect("static date"),
            n_days,
            day_step: 1,
            seed,
            source: FundSpec::new("SPY", 1.0, 0.000_90, 0.018_67),
            target: FundSpec::new("SSO", 2.0, 0.009_00, 0.004_40),
            r: 0.0,
            source_price: 200.0,
            target_price: 65.0,
            index_vol: 0.15,
            tau_star: 0.6,
            source_lm: (0..9).map(|i| -0.25 + 0.05 * i as f64).collect(),
            variance_rate: 0.18 * 0.18,
            frozen_target: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        if self.n_days < 2 || self.day_step < 1 {
            return Err(Error::invalid("need at least two days and a positive day step"));
        }
        if !(self.source_price > 0.0 && self.target_price > 0.0 && self.index_vol >= 0.0) {
            return Err(Error::invalid("prices must be positive and the volatility nonnegative"));
        }
        if !(self.tau_star > 0.05) || self.source_lm.is_empty() {
            return Err(Error::invalid(
                "tau_star must exceed 0.05 and source strikes are required",
            ));
        }
        Ok(())
    }

    fn dates(&self) -> Vec<NaiveDate> {
        let mut out = Vec::with_capacity(self.n_days);
        let mut d = self.start;
        while out.len() < self.n_days {
            let weekend = matches!(d.weekday(), Weekday::Sat | Weekday::Sun);
            if self.day_step > 1 || !weekend {
                out.push(d);
            }
            d += Duration::days(self.day_step);
        }
        out
    }
}

/// Level, skew and term-slope loadings of the source surface.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Loadings {
    level: f64,
    skew: f64,
    term: f64,
}

const MEAN: Loadings = Loadings {
    level: 0.18,
    skew: -0.06,
    term: 0.02,
};

fn surface_iv(z: &Loadings, lm1: f64, ttm: f64) -> f64 {
    (z.level + z.skew * lm1 / ttm.sqrt() + z.term * (ttm - 0.5) + 0.2 * lm1 * lm1).max(0.05)
}

struct Paths {
    dates: Vec<NaiveDate>,
    source: Vec<f64>,
    target: Vec<f64>,
    loadings: Vec<Loadings>,
}

fn paths(spec: &MarketSpec) -> Paths {
    let dates = spec.dates();
    let mut rng = substream(derive_seed(spec.seed, "fixtures", 0), 0);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut source = vec![spec.source_price];
    let mut target = vec![spec.target_price];
    let mut z = MEAN;
    let mut loadings = vec![z];
    for w in dates.windows(2) {
        let dt = (w[1] - w[0]).num_days() as f64 / 365.0;
        let ret = (spec.r - 0.5 * spec.index_vol.powi(2)) * dt + spec.index_vol * dt.sqrt() * unit.sample(&mut rng);
        let simple = ret.exp() - 1.0;
        let s = source.last().unwrap() * (1.0 + simple - spec.source.carry_cost() * dt);
        let beta = spec.target.beta;
        let l = if spec.frozen_target {
            spec.target_price
        } else {
            target.last().unwrap() * (1.0 + beta * simple - (spec.r * (beta - 1.0) + spec.target.carry_cost()) * dt)
        };
        source.push(s);
        target.push(l.max(1e-3));
        z = Loadings {
            level: MEAN.level + 0.9 * (z.level - MEAN.level) + 0.006 * unit.sample(&mut rng),
            skew: MEAN.skew + 0.9 * (z.skew - MEAN.skew) + 0.004 * unit.sample(&mut rng),
            term: MEAN.term + 0.9 * (z.term - MEAN.term) + 0.003 * unit.sample(&mut rng),
        };
        loadings.push(z);
    }
    Paths {
        dates,
        source,
        target,
        loadings,
    }
}

fn quote(
    fund: &FundSpec,
    r: f64,
    date: NaiveDate,
    expiry: NaiveDate,
    strike: f64,
    underlying: f64,
    iv: f64,
) -> OptionQuote {
    let ttm = (expiry - date).num_days() as f64 / 365.0;
    OptionQuote {
        obs_date: date,
        ticker: fund.ticker.clone(),
        strike,
        expiry,
        ttm,
        mid_price: bs_call(underlying, strike, ttm, &CarryTerms::new(r, fund.carry_cost()), iv),
        implied_vol: iv,
        underlying,
        bid: None,
        ask: None,
        volume: None,
        delta: None,
    }
}

/// Re-prices a quote at a new implied vol.
pub fn reprice(q: &mut OptionQuote, fund: &FundSpec, r: f64, iv: f64) {
    q.implied_vol = iv;
    q.mid_price = bs_call(
        q.underlying,
        q.strike,
        q.ttm,
        &CarryTerms::new(r, fund.carry_cost()),
        iv,
    );
}

fn source_quotes(spec: &MarketSpec, p: &Paths, i: usize) -> Vec<OptionQuote> {
    let date = p.dates[i];
    let first = spec.start + Duration::days(14);
    let mut out = Vec::new();
    for k in 0.. {
        let expiry = first + Duration::days(28 * k);
        let ttm = (expiry - date).num_days() as f64 / 365.0;
        if ttm > 1.0 {
            break;
        }
        if ttm < 0.05 {
            continue;
        }
        for lm in &spec.source_lm {
            let strike = p.source[i] * lm.exp();
            out.push(quote(
                &spec.source,
                spec.r,
                date,
                expiry,
                strike,
                p.source[i],
                surface_iv(&p.loadings[i], *lm, ttm),
            ));
        }
    }
    out
}

fn unlevered(spec: &MarketSpec, lm: f64, ttm: f64) -> f64 {
    let b = spec.target.beta;
    (lm + (spec.r * (b - 1.0) + spec.target.carry_cost()) * ttm + 0.5 * b * (b - 1.0) * spec.variance_rate * ttm) / b
}

fn strike_ladder(spec: &MarketSpec) -> Vec<f64> {
    (0..=24)
        .map(|j| (spec.target_price * (-0.7 + 0.05 * j as f64).exp() * 2.0).round() / 2.0)
        .collect()
}

/// Target calls at every listed expiry in `offsets` (days to expiry) and
/// every ladder strike within the moneyness range.
fn target_quotes(
    spec: &MarketSpec,
    p: &Paths,
    i: usize,
    offsets: &[i64],
    discrepancy: f64,
    rng: &mut impl Rng,
) -> Vec<OptionQuote> {
    let date = p.dates[i];
    let l = p.target[i];
    let mut out = Vec::new();
    for &days in offsets {
        let expiry = date + Duration::days(days);
        let ttm = days as f64 / 365.0;
        for &k in &strike_ladder(spec) {
            let lm = (k / l).ln();
            if !(-0.45..=0.3).contains(&lm) {
                continue;
            }
            let iv = surface_iv(&p.loadings[i], unlevered(spec, lm, ttm), ttm)
                + discrepancy
                + 0.005 * (rng.random::<f64>() - 0.5);
            out.push(quote(&spec.target, spec.r, date, expiry, k, l, iv.max(0.05)));
        }
    }
    out
}

/// Quotes for both funds over the whole sample, sorted by date.
pub fn synthetic_market(spec: &MarketSpec) -> Result<Vec<OptionQuote>> {
    spec.validate()?;
    let p = paths(spec);
    let mut rng = substream(derive_seed(spec.seed, "fixtures", 1), 0);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centre = (spec.tau_star * 365.0).round() as i64;
    let offsets: Vec<i64> = (centre - 7..=centre + 3).collect();
    let mut gap = 0.0;
    let mut out = Vec::new();
    for i in 0..p.dates.len() {
        gap = 0.8 * gap + 0.01 * unit.sample(&mut rng);
        out.extend(source_quotes(spec, &p, i));
        out.extend(target_quotes(spec, &p, i, &offsets, gap, &mut rng));
    }
    Ok(out)
}

/// A world where each day's target quotes at `τ*` sit a random 2 to 4 vol
/// points off the strategy's own forecast, and the next day reprices the
/// same contracts exactly at that forecast. The target price is frozen
/// and days are a week apart, so held contracts leave the `τ*` slice by
/// the exit day and theta stays small against the vol move.
/// Returns the adjusted spec with the quotes.
pub fn oracle_world(spec: &MarketSpec, cfg: &StrategyConfig) -> Result<(MarketSpec, Vec<OptionQuote>)> {
    let mut spec = spec.clone();
    spec.frozen_target = true;
    spec.r = 0.0;
    spec.target = FundSpec::new(&spec.target.ticker, spec.target.beta, 0.0, 0.0);
    if spec.day_step < 7 {
        spec.day_step = 7;
    }
    spec.tau_star = cfg.tau_star;
    spec.validate()?;
    let p = paths(&spec);
    let mut rng = substream(derive_seed(spec.seed, "fixtures", 2), 0);
    let centre = (cfg.tau_star * 365.0).round() as i64;
    let mut quotes = Vec::new();
    for i in 0..p.dates.len() {
        quotes.extend(source_quotes(&spec, &p, i));
        quotes.extend(target_quotes(&spec, &p, i, &[centre], 0.0, &mut rng));
        if i > 0 {
            // Yesterday's listings, one step closer to expiry.
            let mut held = target_quotes(&spec, &p, i - 1, &[centre], 0.0, &mut rng);
            for q in &mut held {
                q.obs_date = p.dates[i];
                q.ttm = (q.expiry - q.obs_date).num_days() as f64 / 365.0;
            }
            quotes.extend(held);
        }
    }
    let mut days = market_days(&quotes, &spec.source.ticker, &spec.target.ticker);
    let mut provider = FlatVariance {
        rate: spec.variance_rate,
    };
    for t in cfg.window_w - 1..days.len() - 1 {
        let fc = forecast_period(&days[..=t], &spec.source, &spec.target, &mut provider, cfg)?;
        for s in &fc.slice {
            let gap = (0.02 + 0.02 * rng.random::<f64>()) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let key = s.quote.contract();
            if let Some(q) = days[t].target.iter_mut().find(|q| q.contract() == key) {
                reprice(q, &spec.target, 0.0, s.model_iv - gap);
            }
            if let Some(q) = days[t + 1].target.iter_mut().find(|q| q.contract() == key) {
                reprice(q, &spec.target, 0.0, s.model_iv);
            }
        }
    }
    let quotes = days
        .into_iter()
        .flat_map(|d| d.source.into_iter().chain(d.target))
        .collect();
    Ok((spec, quotes))
}

/// Fund table matching a spec.
pub fn funds(spec: &MarketSpec) -> Vec<FundSpec> {
    vec![spec.source.clone(), spec.target.clone()]
}
