//! Trade-with-the-smile backtest on a pair of funds tracking one index.
//!
//! Each rolling step moves the source fund's quotes to target-fund
//! moneyness, maps both coordinates to the unit square through their
//! empirical marginals, fits a DSFM on the window, forecasts tomorrow's
//! surface with a VAR on the loadings and compares it with today's target
//! quotes at one maturity. The largest positive and negative gaps are
//! traded, delta hedged with the target fund, and unwound the next day.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cond_var::{default_grid, mc_conditional_iv, CondVarCurve};
use crate::dsfm::{self, BasisSpec, DayPanel, FitSettings, PanelPoint};
use crate::error::{Error, Result};
use crate::heston::{calibrate, simulate_euler, CalibrationSettings, CarryTerms, HestonParams};
use crate::market_data::{ContractKey, FundSpec, OptionQuote};
use crate::moneyness::{scale_log_moneyness, ConditionalVariance, ScalingContext};
use crate::numerics::rng::derive_seed;
use crate::numerics::special::norm_cdf;
use crate::var_forecast::{fit_var, forecast};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HedgeModel {
    /// Black-Scholes delta at each option's own implied vol.
    BlackScholesDelta,
    /// Deltas carried by the quote file.
    ExternalDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    /// Rolling window width in trading days.
    pub window_w: usize,
    /// Traded maturity in years.
    pub tau_star: f64,
    /// Number of dynamic factors.
    pub l: usize,
    pub basis: BasisSpec,
    pub r: f64,
    pub hedge_model: HedgeModel,
    pub var_order: usize,
    /// Points per axis of the forecast surface grid.
    pub grid_n: usize,
    /// Half-width of the maturity slice around `tau_star`, in years.
    pub slice_tol: f64,
    pub fit: FitSettings,
}

impl StrategyConfig {
    /// `w = 100`, `τ* = 0.6`, three factors on a 6 × 4 quadratic basis.
    pub fn paper_defaults() -> Self {
        Self {
            window_w: 100,
            tau_star: 0.6,
            l: 3,
            basis: BasisSpec::uniform(3, 3, 9, 7).expect("static basis"),
            r: 0.0,
            hedge_model: HedgeModel::BlackScholesDelta,
            var_order: 1,
            grid_n: 51,
            slice_tol: 2.0 / 365.0,
            fit: FitSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_w < 30 {
            return Err(Error::invalid("window_w must be at least 30"));
        }
        if !(self.tau_star > 0.0 && self.tau_star.is_finite()) {
            return Err(Error::invalid("tau_star must be positive"));
        }
        if self.l == 0 || self.var_order == 0 {
            return Err(Error::invalid("L and the VAR order must be at least 1"));
        }
        if self.window_w <= self.var_order + self.l + 1 {
            return Err(Error::invalid("window too short for the VAR order"));
        }
        if self.grid_n < 2 {
            return Err(Error::invalid("grid_n must be at least 2"));
        }
        if !(self.slice_tol >= 0.0) {
            return Err(Error::invalid("slice_tol must be nonnegative"));
        }
        if !self.r.is_finite() {
            return Err(Error::invalid("r must be finite"));
        }
        self.basis.validate()
    }
}

/// Empirical CDF of a reference sample with midrank ties, linear between
/// distinct values and rescaled so the sample extremes map to 0 and 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalMap {
    support: Vec<f64>,
    levels: Vec<f64>,
}

impl MarginalMap {
    pub fn new(reference: &[f64]) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::invalid("marginal transform needs a nonempty reference"));
        }
        if reference.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("marginal reference values must be finite"));
        }
        let mut s = reference.to_vec();
        s.sort_by(f64::total_cmp);
        let mut support = Vec::new();
        let mut mid = Vec::new();
        let mut i = 0;
        while i < s.len() {
            let mut j = i;
            while j + 1 < s.len() && s[j + 1] == s[i] {
                j += 1;
            }
            support.push(s[i]);
            mid.push(0.5 * (i + j) as f64);
            i = j + 1;
        }
        let levels = if support.len() == 1 {
            vec![0.5]
        } else {
            let (lo, hi) = (mid[0], mid[mid.len() - 1]);
            mid.iter().map(|m| (m - lo) / (hi - lo)).collect()
        };
        Ok(Self { support, levels })
    }

    /// Value in `[0, 1]` and whether `x` fell outside the reference range.
    pub fn apply(&self, x: f64) -> (f64, bool) {
        let n = self.support.len();
        if x < self.support[0] {
            return (0.0, true);
        }
        if x > self.support[n - 1] {
            return (1.0, true);
        }
        if n == 1 {
            return (0.5, false);
        }
        let k = self.support.partition_point(|s| *s <= x);
        if k == n {
            return (self.levels[n - 1], false);
        }
        let (a, b) = (self.support[k - 1], self.support[k]);
        let w = (x - a) / (b - a);
        (self.levels[k - 1] + w * (self.levels[k] - self.levels[k - 1]), false)
    }
}

/// Maps `values` through the empirical marginal of `reference`; values
/// beyond the reference range clamp to 0 or 1.
pub fn marginal_transform(values: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    let m = MarginalMap::new(reference)?;
    Ok(values.iter().map(|x| m.apply(*x).0).collect())
}

/// Black-Scholes call delta `Φ(d1)` without carry.
pub fn bs_delta(s: f64, k: f64, ttm: f64, r: f64, iv: f64) -> f64 {
    let sd = iv * ttm.sqrt();
    let log_fwd = (s / k).ln() + r * ttm;
    if sd < 1e-12 {
        return if log_fwd > 0.0 {
            1.0
        } else if log_fwd < 0.0 {
            0.0
        } else {
            0.5
        };
    }
    norm_cdf(log_fwd / sd + 0.5 * sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    LongOnly,
    ShortOnly,
    Mixed,
    #[serde(rename = "none")]
    NoTrade,
}

impl Classification {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::LongOnly => "long_only",
            Classification::ShortOnly => "short_only",
            Classification::Mixed => "mixed",
            Classification::NoTrade => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leg {
    pub id: String,
    /// Position of the quote in the compared lists.
    pub index: usize,
    /// Absolute implied-vol gap, always positive.
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeDecision {
    pub long_leg: Option<Leg>,
    pub short_leg: Option<Leg>,
    pub hedge_delta: f64,
    pub classification: Classification,
}

/// Long the largest forecast rise, short the largest forecast fall.
/// Points where forecast and market agree exactly vote for neither side;
/// ties go to the lowest index. `hedge_delta` is left at zero.
pub fn decide(iv_model_next: &[f64], iv_market_now: &[f64], quote_ids: &[String]) -> Result<TradeDecision> {
    let n = iv_model_next.len();
    if n == 0 || iv_market_now.len() != n || quote_ids.len() != n {
        return Err(Error::invalid("decide needs equal-length, nonempty lists"));
    }
    let mut long: Option<(usize, f64)> = None;
    let mut short: Option<(usize, f64)> = None;
    for i in 0..n {
        let d = iv_model_next[i] - iv_market_now[i];
        if d > 0.0 && long.is_none_or(|(_, best)| d > best) {
            long = Some((i, d));
        } else if d < 0.0 && short.is_none_or(|(_, best)| -d > best) {
            short = Some((i, -d));
        }
    }
    let leg = |p: Option<(usize, f64)>| {
        p.map(|(index, d)| Leg {
            id: quote_ids[index].clone(),
            index,
            d,
        })
    };
    let classification = match (long.is_some(), short.is_some()) {
        (true, true) => Classification::Mixed,
        (true, false) => Classification::LongOnly,
        (false, true) => Classification::ShortOnly,
        (false, false) => Classification::NoTrade,
    };
    Ok(TradeDecision {
        long_leg: leg(long),
        short_leg: leg(short),
        hedge_delta: 0.0,
        classification,
    })
}

/// `C_long − C_short − Δ·L`; an absent leg contributes nothing.
pub fn portfolio_value(c_long: Option<f64>, c_short: Option<f64>, hedge_delta: f64, underlying: f64) -> f64 {
    c_long.unwrap_or(0.0) - c_short.unwrap_or(0.0) - hedge_delta * underlying
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegPosition {
    pub contract: ContractKey,
    pub id: String,
    pub price: f64,
    pub iv: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub date: NaiveDate,
    pub long: Option<LegPosition>,
    pub short: Option<LegPosition>,
    pub hedge_delta: f64,
    pub underlying: f64,
    pub entry_value: f64,
}

impl Position {
    pub fn new(date: NaiveDate, long: Option<LegPosition>, short: Option<LegPosition>, underlying: f64) -> Self {
        let hedge_delta = long.as_ref().map_or(0.0, |l| l.delta) - short.as_ref().map_or(0.0, |s| s.delta);
        Self::with_hedge(date, long, short, hedge_delta, underlying)
    }

    pub fn with_hedge(
        date: NaiveDate,
        long: Option<LegPosition>,
        short: Option<LegPosition>,
        hedge_delta: f64,
        underlying: f64,
    ) -> Self {
        let entry_value = portfolio_value(
            long.as_ref().map(|l| l.price),
            short.as_ref().map(|s| s.price),
            hedge_delta,
            underlying,
        );
        Self {
            date,
            long,
            short,
            hedge_delta,
            underlying,
            entry_value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitQuote {
    pub price: f64,
    pub iv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitPrices {
    pub date: NaiveDate,
    pub long: Option<ExitQuote>,
    pub short: Option<ExitQuote>,
    pub underlying: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnlRecord {
    /// Entry date.
    pub date: NaiveDate,
    pub entry_value: f64,
    pub exit_value: f64,
    pub pnl: f64,
    pub cumulative: f64,
}

/// Unwinds a position with the hedge frozen at its entry ratio.
pub fn settle(pos: &Position, exit: &ExitPrices, prior_cumulative: f64) -> Result<PnlRecord> {
    if pos.long.is_some() && exit.long.is_none() {
        return Err(Error::invalid("missing exit quote for the long leg"));
    }
    if pos.short.is_some() && exit.short.is_none() {
        return Err(Error::invalid("missing exit quote for the short leg"));
    }
    let exit_value = portfolio_value(
        pos.long.as_ref().and(exit.long.map(|q| q.price)),
        pos.short.as_ref().and(exit.short.map(|q| q.price)),
        pos.hedge_delta,
        exit.underlying,
    );
    let pnl = exit_value - pos.entry_value;
    Ok(PnlRecord {
        date: pos.date,
        entry_value: pos.entry_value,
        exit_value,
        pnl,
        cumulative: prior_cumulative + pnl,
    })
}

/// Source of conditional expected integrated variance for the scaling step.
pub trait CondVarProvider {
    /// Called once per rolling step with the source quotes of the window's
    /// last day.
    fn refresh(&mut self, _as_of: &[OptionQuote]) -> Result<()> {
        Ok(())
    }

    fn at(&mut self, ttm: f64) -> Result<ConditionalVariance>;
}

/// Integrated variance `rate · ttm` regardless of the terminal return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatVariance {
    pub rate: f64,
}

impl CondVarProvider for FlatVariance {
    fn at(&mut self, ttm: f64) -> Result<ConditionalVariance> {
        Ok(ConditionalVariance::Constant(self.rate * ttm))
    }
}

/// Monte-Carlo binned curves under Heston parameters, optionally
/// recalibrated to each step's last day. Curves are cached per maturity
/// bucket and dropped when the parameters change.
#[derive(Debug, Clone)]
pub struct HestonCurves {
    pub params: HestonParams,
    pub carry: CarryTerms,
    pub n_paths: usize,
    pub steps_per_year: usize,
    pub n_bins: usize,
    pub seed: u64,
    pub recalibrate: bool,
    /// Maturity bucket width in calendar days.
    pub bucket_days: u32,
    cache: BTreeMap<i64, CondVarCurve>,
}

impl HestonCurves {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: HestonParams,
        carry: CarryTerms,
        n_paths: usize,
        steps_per_year: usize,
        n_bins: usize,
        seed: u64,
        recalibrate: bool,
        bucket_days: u32,
    ) -> Result<Self> {
        params.validate()?;
        if n_paths == 0 || steps_per_year == 0 || n_bins < 2 || bucket_days == 0 {
            return Err(Error::invalid("paths, steps, bins and bucket width must be positive"));
        }
        Ok(Self {
            params,
            carry,
            n_paths,
            steps_per_year,
            n_bins,
            seed,
            recalibrate,
            bucket_days,
            cache: BTreeMap::new(),
        })
    }
}

impl CondVarProvider for HestonCurves {
    fn refresh(&mut self, as_of: &[OptionQuote]) -> Result<()> {
        if !self.recalibrate {
            return Ok(());
        }
        let report = calibrate(as_of, &self.carry, &self.params, &CalibrationSettings::default())?;
        if report.params != self.params {
            self.params = report.params;
            self.cache.clear();
        }
        Ok(())
    }

    fn at(&mut self, ttm: f64) -> Result<ConditionalVariance> {
        let width = self.bucket_days as f64 / 365.0;
        let key = ((ttm / width).round() as i64).max(1);
        if !self.cache.contains_key(&key) {
            let horizon = key as f64 * width;
            let steps = ((horizon * self.steps_per_year as f64).ceil() as usize).max(1);
            let seed = derive_seed(self.seed, "condvar", key as u64);
            let paths = simulate_euler(&self.params, &self.carry, 1.0, horizon, steps, self.n_paths, seed)?;
            let grid = default_grid(&paths, 1.0, self.n_bins);
            let curve = mc_conditional_iv(&paths, 1.0, horizon, &grid)?;
            self.cache.insert(key, curve);
        }
        let mut curve = self.cache[&key].clone();
        // The bucket curve stands in for the exact maturity.
        curve.ttm = ttm;
        Ok(ConditionalVariance::Curve(curve))
    }
}

/// One trading day of quotes for the two funds.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketDay {
    pub date: NaiveDate,
    pub source: Vec<OptionQuote>,
    pub target: Vec<OptionQuote>,
}

/// Splits quotes by date into source and target fund, ascending in date.
/// Every date carrying a quote for either fund becomes a day.
pub fn market_days(quotes: &[OptionQuote], source: &str, target: &str) -> Vec<MarketDay> {
    let mut map: BTreeMap<NaiveDate, MarketDay> = BTreeMap::new();
    for q in quotes {
        if q.ticker != source && q.ticker != target {
            continue;
        }
        let day = map.entry(q.obs_date).or_insert_with(|| MarketDay {
            date: q.obs_date,
            source: Vec::new(),
            target: Vec::new(),
        });
        if q.ticker == source {
            day.source.push(q.clone());
        } else {
            day.target.push(q.clone());
        }
    }
    map.into_values().collect()
}

/// Bilinear interpolation of `surface` (rows along `grid_m`, columns along
/// `grid_t`), clamped to the grid.
pub fn bilinear(grid_m: &[f64], grid_t: &[f64], surface: &DMatrix<f64>, u: f64, v: f64) -> f64 {
    let locate = |g: &[f64], x: f64| -> (usize, f64) {
        let n = g.len();
        if x <= g[0] {
            return (0, 0.0);
        }
        if x >= g[n - 1] {
            return (n - 2, 1.0);
        }
        let k = g.partition_point(|p| *p <= x).clamp(1, n - 1);
        (k - 1, (x - g[k - 1]) / (g[k] - g[k - 1]))
    };
    let (i, a) = locate(grid_m, u);
    let (j, b) = locate(grid_t, v);
    let f = |r: usize, c: usize| surface[(r, c)];
    (1.0 - a) * (1.0 - b) * f(i, j)
        + a * (1.0 - b) * f(i + 1, j)
        + (1.0 - a) * b * f(i, j + 1)
        + a * b * f(i + 1, j + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceQuote {
    pub quote: OptionQuote,
    /// Target log-moneyness on the unit interval.
    pub u: f64,
    pub clamped: bool,
    pub model_iv: f64,
}

/// Everything the step-`t` forecast produces.
#[derive(Debug, Clone)]
pub struct PeriodForecast {
    pub date: NaiveDate,
    pub grid: Vec<f64>,
    /// Forecast surface for the next day on `grid × grid`.
    pub surface: DMatrix<f64>,
    /// `τ*` on the unit interval.
    pub v_star: f64,
    pub slice: Vec<SliceQuote>,
    /// Forecast loadings, without the constant.
    pub z_next: Vec<f64>,
    pub dsfm_iterations: usize,
}

fn unit_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Window panels in unit-square coordinates, with the marginal maps that
/// produced them.
#[derive(Debug, Clone)]
pub struct WindowPanels {
    pub panels: Vec<DayPanel>,
    pub map_m: MarginalMap,
    pub map_t: MarginalMap,
}

/// Steps 1 and 2: source quotes of every window day moved to target
/// moneyness, then both axes mapped by the window's pooled marginals.
pub fn window_panels<P: CondVarProvider + ?Sized>(
    window: &[MarketDay],
    source: &FundSpec,
    target: &FundSpec,
    provider: &mut P,
    cfg: &StrategyConfig,
) -> Result<WindowPanels> {
    // Step 1: source quotes in target moneyness.
    let mut scaled: Vec<Vec<(f64, f64, f64)>> = Vec::with_capacity(window.len());
    for day in window {
        let mut pts = Vec::with_capacity(day.source.len());
        for q in &day.source {
            let ctx = ScalingContext {
                source: source.clone(),
                target: target.clone(),
                r: cfg.r,
                ttm: q.ttm,
                condvar: provider.at(q.ttm)?,
            };
            pts.push((
                scale_log_moneyness(q.log_moneyness(), &ctx)?.value,
                q.ttm,
                q.implied_vol,
            ));
        }
        scaled.push(pts);
    }

    // Step 2: marginal maps fitted on the whole window.
    let ref_m: Vec<f64> = scaled.iter().flatten().map(|p| p.0).collect();
    let ref_t: Vec<f64> = scaled.iter().flatten().map(|p| p.1).collect();
    let map_m = MarginalMap::new(&ref_m)?;
    let map_t = MarginalMap::new(&ref_t)?;
    let panels: Vec<DayPanel> = scaled
        .iter()
        .enumerate()
        .filter(|(_, pts)| !pts.is_empty())
        .map(|(i, pts)| DayPanel {
            t: i as i64,
            points: pts
                .iter()
                .map(|(m, t, y)| PanelPoint {
                    x_m: map_m.apply(*m).0,
                    x_t: map_t.apply(*t).0,
                    y: *y,
                })
                .collect(),
        })
        .collect();

    Ok(WindowPanels { panels, map_m, map_t })
}

/// Steps 1 to 6 for the last day of `history`. Only `history` is read, so
/// the forecast cannot see later data.
pub fn forecast_period<P: CondVarProvider + ?Sized>(
    history: &[MarketDay],
    source: &FundSpec,
    target: &FundSpec,
    provider: &mut P,
    cfg: &StrategyConfig,
) -> Result<PeriodForecast> {
    cfg.validate()?;
    if history.len() < cfg.window_w {
        return Err(Error::invalid(format!(
            "history has {} days, window needs {}",
            history.len(),
            cfg.window_w
        )));
    }
    let today = &history[history.len() - 1];
    let window = &history[history.len() - cfg.window_w..];
    provider.refresh(&today.source)?;
    let WindowPanels { panels, map_m, map_t } = window_panels(window, source, target, provider, cfg)?;

    // Steps 3 and 4: DSFM on the window, VAR on its loadings.
    let model = dsfm::fit(&panels, cfg.l, &cfg.basis, &cfg.fit)?;
    let z = DMatrix::from_fn(model.z.len(), cfg.l, |r, c| model.z[r][c + 1]);
    let var = fit_var(&z, cfg.var_order)?;
    let recent: Vec<Vec<f64>> = model.z[model.z.len() - cfg.var_order..]
        .iter()
        .map(|row| row[1..].to_vec())
        .collect();
    let z_next = forecast(&var, &recent)?;
    let mut row = vec![1.0];
    row.extend(&z_next);
    let grid = unit_grid(cfg.grid_n);
    let surface = dsfm::surface_at(&model, &row, &grid, &grid)?;

    // Steps 5 and 6: today's target slice at τ*, read off the forecast.
    let v_star = map_t.apply(cfg.tau_star).0;
    let slice = today
        .target
        .iter()
        .filter(|q| (q.ttm - cfg.tau_star).abs() <= cfg.slice_tol + 1e-12)
        .map(|q| {
            let (u, clamped) = map_m.apply(q.log_moneyness());
            SliceQuote {
                quote: q.clone(),
                u,
                clamped,
                model_iv: bilinear(&grid, &grid, &surface, u, v_star),
            }
        })
        .collect();
    Ok(PeriodForecast {
        date: today.date,
        grid,
        surface,
        v_star,
        slice,
        z_next,
        dsfm_iterations: model.report.iterations,
    })
}

/// Step 7: the trade decision and the hedged position it opens.
pub fn open_position(fc: &PeriodForecast, cfg: &StrategyConfig) -> Result<(TradeDecision, Position)> {
    if fc.slice.is_empty() {
        return Err(Error::invalid(format!(
            "no target quotes within the τ* slice on {}",
            fc.date
        )));
    }
    let model: Vec<f64> = fc.slice.iter().map(|s| s.model_iv).collect();
    let market: Vec<f64> = fc.slice.iter().map(|s| s.quote.implied_vol).collect();
    let ids: Vec<String> = fc.slice.iter().map(|s| s.quote.contract_id()).collect();
    let mut decision = decide(&model, &market, &ids)?;
    let leg = |l: &Option<Leg>| -> Result<Option<LegPosition>> {
        let Some(l) = l else { return Ok(None) };
        let q = &fc.slice[l.index].quote;
        let delta = match cfg.hedge_model {
            HedgeModel::BlackScholesDelta => bs_delta(q.underlying, q.strike, q.ttm, cfg.r, q.implied_vol),
            HedgeModel::ExternalDelta => q
                .delta
                .ok_or_else(|| Error::invalid(format!("no external delta for {}", l.id)))?,
        };
        Ok(Some(LegPosition {
            contract: q.contract(),
            id: l.id.clone(),
            price: q.mid_price,
            iv: q.implied_vol,
            delta,
        }))
    };
    let long = leg(&decision.long_leg)?;
    let short = leg(&decision.short_leg)?;
    let underlying = fc.slice[0].quote.underlying;
    let pos = Position::new(fc.date, long, short, underlying);
    decision.hedge_delta = pos.hedge_delta;
    Ok((decision, pos))
}

/// Step 8 inputs: the held contracts' quotes on the exit day.
pub fn exit_prices(pos: &Position, next: &MarketDay) -> Result<ExitPrices> {
    let find = |leg: &Option<LegPosition>| -> Option<ExitQuote> {
        let leg = leg.as_ref()?;
        next.target
            .iter()
            .find(|q| q.contract() == leg.contract)
            .map(|q| ExitQuote {
                price: q.mid_price,
                iv: q.implied_vol,
            })
    };
    let underlying = next
        .target
        .first()
        .map(|q| q.underlying)
        .ok_or_else(|| Error::invalid(format!("no target quotes on {}", next.date)))?;
    Ok(ExitPrices {
        date: next.date,
        long: find(&pos.long),
        short: find(&pos.short),
        underlying,
    })
}

/// Long legs need a rising, short legs a falling implied vol; `None`
/// without legs.
pub fn direction_hit(pos: &Position, exit: &ExitPrices) -> Option<bool> {
    let long = pos.long.as_ref().zip(exit.long).map(|(l, q)| q.iv > l.iv);
    let short = pos.short.as_ref().zip(exit.short).map(|(s, q)| q.iv < s.iv);
    match (long, short) {
        (None, None) => None,
        (a, b) => Some(a.unwrap_or(true) && b.unwrap_or(true)),
    }
}

/// `(long ? 1 : 0) − (short ? 1 : 0) − hedge share`; negative reads as a
/// net short portfolio.
pub fn net_score(pos: &Position) -> f64 {
    pos.long.is_some() as i32 as f64 - pos.short.is_some() as i32 as f64 - pos.hedge_delta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub date: NaiveDate,
    pub exit_date: NaiveDate,
    pub decision: TradeDecision,
    pub position: Position,
    pub exit: ExitPrices,
    pub pnl: PnlRecord,
    /// Option legs only, hedge excluded.
    pub option_pnl: f64,
    pub hit: Option<bool>,
    pub net_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPeriod {
    pub date: NaiveDate,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeLedger {
    pub periods: Vec<PeriodRecord>,
    pub skipped: Vec<SkippedPeriod>,
    /// Cumulative P&L after every candidate period, flat across skips.
    pub curve: Vec<(NaiveDate, f64)>,
}

/// Headline magnitudes reported for the original SPY/SSO sample. They
/// depend on data not shipped here and are carried for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMagnitudes {
    pub periods: usize,
    pub net_short: usize,
    pub cumulative: f64,
    pub correct: usize,
}

pub const REFERENCE: ReferenceMagnitudes = ReferenceMagnitudes {
    periods: 55,
    net_short: 42,
    cumulative: 19.043,
    correct: 39,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSummary {
    pub candidate_periods: usize,
    pub settled: usize,
    pub skipped: usize,
    pub long_only: usize,
    pub short_only: usize,
    pub mixed: usize,
    pub no_trade: usize,
    pub net_short: usize,
    pub hits: usize,
    pub traded: usize,
    pub hit_rate: Option<f64>,
    pub cumulative: f64,
    pub reference: ReferenceMagnitudes,
}

impl TradeLedger {
    pub fn summary(&self) -> BacktestSummary {
        let count = |c: Classification| self.periods.iter().filter(|p| p.decision.classification == c).count();
        let traded = self.periods.iter().filter(|p| p.hit.is_some()).count();
        let hits = self.periods.iter().filter(|p| p.hit == Some(true)).count();
        BacktestSummary {
            candidate_periods: self.curve.len(),
            settled: self.periods.len(),
            skipped: self.skipped.len(),
            long_only: count(Classification::LongOnly),
            short_only: count(Classification::ShortOnly),
            mixed: count(Classification::Mixed),
            no_trade: count(Classification::NoTrade),
            net_short: self.periods.iter().filter(|p| p.net_score < 0.0).count(),
            hits,
            traded,
            hit_rate: (traded > 0).then(|| hits as f64 / traded as f64),
            cumulative: self.curve.last().map_or(0.0, |c| c.1),
            reference: REFERENCE,
        }
    }

    pub fn hit_rate(&self) -> Option<f64> {
        self.summary().hit_rate
    }
}

pub const LEDGER_HEADER: [&str; 9] = [
    "date",
    "class",
    "long_id",
    "short_id",
    "hedge_delta",
    "entry_value",
    "exit_value",
    "pnl",
    "cumulative",
];

pub fn write_ledger<W: Write>(w: W, ledger: &TradeLedger) -> Result<()> {
    let mut wtr = crate::market_data::csv_writer(w);
    wtr.write_record(LEDGER_HEADER)?;
    for p in &ledger.periods {
        wtr.write_record([
            p.date.to_string(),
            p.decision.classification.as_str().to_string(),
            p.decision.long_leg.as_ref().map(|l| l.id.clone()).unwrap_or_default(),
            p.decision.short_leg.as_ref().map(|l| l.id.clone()).unwrap_or_default(),
            p.position.hedge_delta.to_string(),
            p.pnl.entry_value.to_string(),
            p.pnl.exit_value.to_string(),
            p.pnl.pnl.to_string(),
            p.pnl.cumulative.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn check_inputs(days: &[MarketDay], cfg: &StrategyConfig) -> Result<()> {
    cfg.validate()?;
    let src = days.iter().filter(|d| !d.source.is_empty()).count();
    let tgt = days.iter().filter(|d| !d.target.is_empty()).count();
    if src < cfg.window_w + 1 || tgt == 0 {
        return Err(Error::invalid(format!(
            "backtest needs at least window_w + 1 = {} days with quotes for both funds (got {} days, {src} with source and {tgt} with target quotes)",
            cfg.window_w + 1,
            days.len()
        )));
    }
    let (lo, hi) = days
        .iter()
        .flat_map(|d| d.target.iter().map(|q| q.ttm))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    if !(cfg.tau_star >= lo - cfg.slice_tol && cfg.tau_star <= hi + cfg.slice_tol) {
        return Err(Error::invalid(format!(
            "tau_star {} outside the target maturity range {lo:.4}..{hi:.4}",
            cfg.tau_star
        )));
    }
    Ok(())
}

/// Runs steps 1 to 8 for every `t` from the end of the first window to the
/// second-to-last day. A period that cannot be formed or settled is
/// skipped with its reason logged.
pub fn run_backtest<P: CondVarProvider + ?Sized>(
    days: &[MarketDay],
    source: &FundSpec,
    target: &FundSpec,
    provider: &mut P,
    cfg: &StrategyConfig,
) -> Result<TradeLedger> {
    check_inputs(days, cfg)?;
    let mut ledger = TradeLedger {
        periods: Vec::new(),
        skipped: Vec::new(),
        curve: Vec::new(),
    };
    let mut cumulative = 0.0;
    for t in cfg.window_w - 1..days.len() - 1 {
        let date = days[t].date;
        let opened = forecast_period(&days[..=t], source, target, provider, cfg).and_then(|fc| open_position(&fc, cfg));
        let settled = opened.and_then(|(decision, pos)| {
            let exit = exit_prices(&pos, &days[t + 1])?;
            let pnl = settle(&pos, &exit, cumulative)?;
            Ok((decision, pos, exit, pnl))
        });
        match settled {
            Ok((decision, position, exit, pnl)) => {
                cumulative = pnl.cumulative;
                let option_pnl = position
                    .long
                    .as_ref()
                    .map_or(0.0, |l| exit.long.unwrap().price - l.price)
                    - position
                        .short
                        .as_ref()
                        .map_or(0.0, |s| exit.short.unwrap().price - s.price);
                ledger.periods.push(PeriodRecord {
                    date,
                    exit_date: days[t + 1].date,
                    hit: direction_hit(&position, &exit),
                    net_score: net_score(&position),
                    decision,
                    position,
                    exit,
                    pnl,
                    option_pnl,
                });
            }
            Err(e) => {
                log::info!("period {date} skipped: {e}");
                ledger.skipped.push(SkippedPeriod {
                    date,
                    reason: e.to_string(),
                });
            }
        }
        ledger.curve.push((date, cumulative));
    }
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn midranks_with_ties() {
        let m = MarginalMap::new(&[1.0, 1.0, 2.0, 3.0]).unwrap();
        // Midranks 0.5, 2, 3 rescaled to 0, 0.6, 1.
        assert_eq!(m.apply(1.0), (0.0, false));
        assert!((m.apply(2.0).0 - 0.6).abs() < 1e-15);
        assert!((m.apply(1.5).0 - 0.3).abs() < 1e-15);
        assert_eq!(m.apply(0.0), (0.0, true));
        assert_eq!(m.apply(9.0), (1.0, true));
    }

    #[test]
    fn bilinear_reproduces_planes() {
        let g = unit_grid(5);
        let s = DMatrix::from_fn(5, 5, |i, j| 1.0 + 2.0 * g[i] - 3.0 * g[j]);
        for (u, v) in [(0.1, 0.9), (0.5, 0.5), (0.77, 0.03)] {
            assert!((bilinear(&g, &g, &s, u, v) - (1.0 + 2.0 * u - 3.0 * v)).abs() < 1e-14);
        }
        assert_eq!(bilinear(&g, &g, &s, -1.0, 2.0), s[(0, 4)]);
    }

    #[test]
    fn settle_requires_exit_quotes() {
        let leg = LegPosition {
            contract: ContractKey {
                ticker: "SSO".into(),
                expiry: d(2016, 1, 15),
                strike_ticks: 600_000,
            },
            id: "x".into(),
            price: 10.0,
            iv: 0.3,
            delta: 0.5,
        };
        let pos = Position::new(d(2015, 6, 18), Some(leg), None, 66.0);
        let exit = ExitPrices {
            date: d(2015, 6, 19),
            long: None,
            short: None,
            underlying: 67.0,
        };
        assert!(settle(&pos, &exit, 0.0).is_err());
    }
}
