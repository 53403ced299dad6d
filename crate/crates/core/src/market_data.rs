//! Option-chain ingestion, validation and filtering.
//!
//! Quote files are comma-separated with a required header:
//!
//! ```text
//! obs_date,ticker,strike,expiry_date,ttm_years,mid_price,implied_vol,underlying,bid,ask,volume
//! ```
//!
//! `bid`, `ask` and `volume` may be empty, as may one of `expiry_date` and
//! `ttm_years` (the other is then derived on an ACT/365 basis). An optional
//! trailing `delta` column carries externally supplied hedge ratios. Lines
//! starting with `#` are comments.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const QUOTE_HEADER: [&str; 11] = [
    "obs_date",
    "ticker",
    "strike",
    "expiry_date",
    "ttm_years",
    "mid_price",
    "implied_vol",
    "underlying",
    "bid",
    "ask",
    "volume",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundSpec {
    pub ticker: String,
    /// Declared daily leverage ratio.
    pub beta: f64,
    /// Annual expense ratio as a fraction.
    pub expense_ratio: f64,
    /// Annual dividend yield as a fraction.
    pub dividend_yield: f64,
}

impl FundSpec {
    pub fn new(ticker: &str, beta: f64, expense_ratio: f64, dividend_yield: f64) -> Self {
        Self {
            ticker: ticker.to_string(),
            beta,
            expense_ratio,
            dividend_yield,
        }
    }

    /// Expense ratio corrected for dividend yield, `c* = c + δ`.
    pub fn carry_cost(&self) -> f64 {
        self.expense_ratio + self.dividend_yield
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta != 0.0) {
            return Err(Error::invalid(format!(
                "{}: leverage ratio must be nonzero",
                self.ticker
            )));
        }
        if !(self.expense_ratio >= 0.0 && self.dividend_yield >= 0.0) {
            return Err(Error::invalid(format!(
                "{}: expense ratio and dividend yield must be nonnegative",
                self.ticker
            )));
        }
        Ok(())
    }
}

/// S&P 500 fund family used throughout the examples and fixtures.
pub fn builtin_funds() -> Vec<FundSpec> {
    vec![
        FundSpec::new("SPY", 1.0, 0.000_90, 0.018_67),
        FundSpec::new("SSO", 2.0, 0.009_00, 0.004_40),
        FundSpec::new("UPRO", 3.0, 0.009_50, 0.002_63),
        FundSpec::new("SDS", -2.0, 0.008_90, 0.0),
        FundSpec::new("SPXU", -3.0, 0.009_00, 0.0),
    ]
}

pub fn find_fund<'a>(funds: &'a [FundSpec], ticker: &str) -> Result<&'a FundSpec> {
    funds
        .iter()
        .find(|f| f.ticker == ticker)
        .ok_or_else(|| Error::UnknownTicker(ticker.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionQuote {
    pub obs_date: NaiveDate,
    pub ticker: String,
    pub strike: f64,
    pub expiry: NaiveDate,
    /// Time to maturity in years.
    pub ttm: f64,
    pub mid_price: f64,
    pub implied_vol: f64,
    /// Price of the (L)ETF on `obs_date`.
    pub underlying: f64,
    pub bid: Option<f64>,
    pub ask: Option<f64>,
    pub volume: Option<u64>,
    /// Externally supplied option delta, if the source file carries one.
    pub delta: Option<f64>,
}

/// Identity of a listed contract across observation dates.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContractKey {
    pub ticker: String,
    pub expiry: NaiveDate,
    /// Strike in hundredths of a cent.
    pub strike_ticks: i64,
}

impl OptionQuote {
    pub fn log_moneyness(&self) -> f64 {
        log_moneyness(self.strike, self.underlying)
    }

    pub fn contract(&self) -> ContractKey {
        ContractKey {
            ticker: self.ticker.clone(),
            expiry: self.expiry,
            strike_ticks: (self.strike * 10_000.0).round() as i64,
        }
    }

    /// Human-readable contract id, e.g. `SSO-2015-12-18-C67.5`.
    pub fn contract_id(&self) -> String {
        format!("{}-{}-C{}", self.ticker, self.expiry, self.strike)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.ttm > 0.0 && self.ttm.is_finite()) {
            return bad("time to maturity must be positive");
        }
        if !(self.strike > 0.0 && self.strike.is_finite()) {
            return bad("strike must be positive");
        }
        if !(self.underlying > 0.0 && self.underlying.is_finite()) {
            return bad("underlying price must be positive");
        }
        if !(self.implied_vol > 0.0 && self.implied_vol.is_finite()) {
            return bad("implied volatility must be positive");
        }
        if !self.mid_price.is_finite() || self.mid_price < 0.0 {
            return bad("mid price must be finite and nonnegative");
        }
        if let (Some(b), Some(a)) = (self.bid, self.ask) {
            if a < b {
                return bad("ask below bid");
            }
            if !(b <= self.mid_price && self.mid_price <= a) {
                return bad("mid price outside [bid, ask]");
            }
        }
        Ok(())
    }
}

/// CSV writer with LF record terminators.
pub fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

/// `log(K / L)`.
pub fn log_moneyness(strike: f64, underlying: f64) -> f64 {
    (strike / underlying).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub iv_range: (f64, f64),
    pub ttm_range: (f64, f64),
    pub logmoneyness_range: (f64, f64),
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            iv_range: (0.01, 3.0),
            ttm_range: (0.05, 2.5),
            logmoneyness_range: (-3.5, 1.0),
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("iv_range", self.iv_range),
            ("ttm_range", self.ttm_range),
            ("logmoneyness_range", self.logmoneyness_range),
        ] {
            if !(lo < hi) {
                return Err(Error::invalid(format!("{name}: lower bound must be below upper")));
            }
        }
        Ok(())
    }

    pub fn admits(&self, q: &OptionQuote) -> bool {
        let within = |(lo, hi): (f64, f64), v: f64| lo <= v && v <= hi;
        within(self.iv_range, q.implied_vol)
            && within(self.ttm_range, q.ttm)
            && within(self.logmoneyness_range, q.log_moneyness())
    }
}

pub fn apply_filter(quotes: &[OptionQuote], policy: &FilterPolicy) -> Vec<OptionQuote> {
    quotes.iter().filter(|q| policy.admits(q)).cloned().collect()
}

/// Collapses repeated `(date, contract)` rows, keeping the one with the
/// highest volume, or the last one when volumes are absent or tied.
pub fn dedupe(quotes: Vec<OptionQuote>) -> Vec<OptionQuote> {
    let mut best: BTreeMap<(NaiveDate, ContractKey), (usize, OptionQuote)> = BTreeMap::new();
    for (i, q) in quotes.into_iter().enumerate() {
        let key = (q.obs_date, q.contract());
        let replace = match best.get(&key) {
            None => true,
            Some((_, old)) => q.volume.unwrap_or(0) >= old.volume.unwrap_or(0),
        };
        if replace {
            best.insert(key, (i, q));
        }
    }
    let mut kept: Vec<(usize, OptionQuote)> = best.into_values().collect();
    kept.sort_by_key(|(i, _)| *i);
    kept.into_iter().map(|(_, q)| q).collect()
}

/// Groups quotes by observation date, ascending.
pub fn by_date(quotes: &[OptionQuote]) -> BTreeMap<NaiveDate, Vec<OptionQuote>> {
    let mut out: BTreeMap<NaiveDate, Vec<OptionQuote>> = BTreeMap::new();
    for q in quotes {
        out.entry(q.obs_date).or_default().push(q.clone());
    }
    out
}

pub fn year_fraction(from: NaiveDate, to: NaiveDate) -> f64 {
    (to - from).num_days() as f64 / 365.0
}

fn csv_reader<R: Read>(rdr: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(rdr)
}

pub fn load_quotes(path: &Path, funds: &[FundSpec]) -> Result<Vec<OptionQuote>> {
    let file = std::fs::File::open(path)?;
    read_quotes(file, path, funds)
}

/// Parses a quote file; `origin` only labels error messages.
pub fn read_quotes<R: Read>(rdr: R, origin: &Path, funds: &[FundSpec]) -> Result<Vec<OptionQuote>> {
    let mut rdr = csv_reader(rdr);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 11];
    for (slot, name) in idx.iter_mut().zip(QUOTE_HEADER) {
        *slot = col(name).ok_or_else(|| Error::MalformedRow {
            path: origin.to_path_buf(),
            row: 1,
            message: format!("missing column `{name}`"),
        })?;
    }
    let delta_col = col("delta");
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let malformed = |message: String| Error::MalformedRow {
            path: origin.to_path_buf(),
            row,
            message,
        };
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|_| malformed(format!("`{}` is not a number: {:?}", QUOTE_HEADER[i], field(i))))
        };
        let opt_num = |s: &str, name: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| malformed(format!("`{name}` is not a number: {s:?}")))
            }
        };
        let date = |i: usize| -> Result<Option<NaiveDate>> {
            let s = field(i);
            if s.is_empty() {
                return Ok(None);
            }
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map(Some)
                .map_err(|_| malformed(format!("`{}` is not an ISO-8601 date: {s:?}", QUOTE_HEADER[i])))
        };

        let obs_date = date(0)?.ok_or_else(|| malformed("missing obs_date".into()))?;
        let ticker = field(1).to_string();
        if !funds.is_empty() {
            find_fund(funds, &ticker)?;
        }
        let expiry = date(3)?;
        let ttm = opt_num(field(4), "ttm_years")?;
        let (expiry, ttm) = match (expiry, ttm) {
            (Some(e), Some(t)) => (e, t),
            (Some(e), None) => (e, year_fraction(obs_date, e)),
            (None, Some(t)) => (obs_date + Duration::days((t * 365.0).round() as i64), t),
            (None, None) => return Err(malformed("need expiry_date or ttm_years".into())),
        };
        let volume = match field(10) {
            "" => None,
            s => Some(
                s.parse::<u64>()
                    .map_err(|_| malformed(format!("`volume` is not an integer: {s:?}")))?,
            ),
        };
        let delta = match delta_col {
            Some(c) => opt_num(rec.get(c).unwrap_or(""), "delta")?,
            None => None,
        };
        let q = OptionQuote {
            obs_date,
            ticker,
            strike: num(2)?,
            expiry,
            ttm,
            mid_price: num(5)?,
            implied_vol: num(6)?,
            underlying: num(7)?,
            bid: opt_num(field(8), "bid")?,
            ask: opt_num(field(9), "ask")?,
            volume,
            delta,
        };
        q.validate().map_err(|e| malformed(e.to_string()))?;
        out.push(q);
    }
    Ok(out)
}

/// Writes quotes in the ingestion schema. The `delta` column is emitted
/// only when at least one quote carries a delta.
pub fn write_quotes<W: Write>(w: W, quotes: &[OptionQuote]) -> Result<()> {
    let with_delta = quotes.iter().any(|q| q.delta.is_some());
    let mut wtr = csv_writer(w);
    let mut header: Vec<&str> = QUOTE_HEADER.to_vec();
    if with_delta {
        header.push("delta");
    }
    wtr.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for q in quotes {
        let mut rec = vec![
            q.obs_date.to_string(),
            q.ticker.clone(),
            q.strike.to_string(),
            q.expiry.to_string(),
            q.ttm.to_string(),
            q.mid_price.to_string(),
            q.implied_vol.to_string(),
            q.underlying.to_string(),
            opt(q.bid),
            opt(q.ask),
            q.volume.map(|v| v.to_string()).unwrap_or_default(),
        ];
        if with_delta {
            rec.push(opt(q.delta));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_funds(path: &Path) -> Result<Vec<FundSpec>> {
    let file = std::fs::File::open(path)?;
    read_funds(file, path)
}

pub fn read_funds<R: Read>(rdr: R, origin: &Path) -> Result<Vec<FundSpec>> {
    let mut rdr = csv_reader(rdr);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<FundSpec>() {
        let f = rec.map_err(|e| Error::MalformedRow {
            path: origin.to_path_buf(),
            row: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        f.validate()?;
        out.push(f);
    }
    Ok(out)
}

pub fn write_funds<W: Write>(w: W, funds: &[FundSpec]) -> Result<()> {
    let mut wtr = csv_writer(w);
    for f in funds {
        wtr.serialize(f)?;
    }
    wtr.flush()?;
    Ok(())
}
