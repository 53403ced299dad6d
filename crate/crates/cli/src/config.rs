//! `section.key = value` run configuration.
//!
//! Every key must appear in [`KEYS`]; values are range-checked when they
//! are read in, so a bad file fails before any work starts.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use letf_lab::numerics::rng::fnv1a;

use crate::CliError;

#[derive(Debug, Clone, Copy)]
pub enum Kind {
    /// Closed interval.
    Real(f64, f64),
    /// Strictly positive real.
    Positive,
    /// Open interval.
    Between(f64, f64),
    Int(u64, u64),
    Bool,
    Choice(&'static [&'static str]),
    Ticker,
}

const INF: f64 = f64::INFINITY;

pub const KEYS: &[(&str, Kind)] = &[
    ("data.r", Kind::Real(-1.0, 1.0)),
    ("data.source", Kind::Ticker),
    ("data.target", Kind::Ticker),
    ("data.days", Kind::Int(2, 100_000)),
    ("heston.kappa", Kind::Real(0.01, 20.0)),
    ("heston.theta", Kind::Real(1e-4, 1.0)),
    ("heston.sigma", Kind::Real(0.01, 3.0)),
    ("heston.v0", Kind::Real(1e-4, 1.0)),
    ("heston.rho", Kind::Real(-0.99, 0.99)),
    ("heston.max_iter", Kind::Int(1, 100_000)),
    ("heston.max_starts", Kind::Int(1, 100)),
    ("condvar.model", Kind::Choice(&["flat", "heston"])),
    ("condvar.variance_rate", Kind::Real(0.0, 10.0)),
    ("condvar.paths", Kind::Int(1, 100_000_000)),
    ("condvar.bins", Kind::Int(2, 100_000)),
    ("condvar.steps_per_year", Kind::Int(1, 100_000)),
    ("condvar.bucket_days", Kind::Int(1, 3650)),
    ("condvar.recalibrate", Kind::Bool),
    ("condvar.s0", Kind::Positive),
    ("scaling.ttm_tol", Kind::Real(0.0, 1.0)),
    ("bands.alpha", Kind::Between(0.0, 1.0)),
    ("bands.boot", Kind::Int(100, 1_000_000)),
    ("bands.kernel", Kind::Choice(&["quartic", "gaussian"])),
    ("bands.h", Kind::Positive),
    ("bands.trim", Kind::Real(0.0, 0.49)),
    ("bands.grid", Kind::Int(2, 100_000)),
    ("bands.ttm_tol", Kind::Real(0.0, 1.0)),
    ("dsfm.l", Kind::Int(1, 20)),
    ("dsfm.order_m", Kind::Int(1, 10)),
    ("dsfm.order_t", Kind::Int(1, 10)),
    ("dsfm.knots_m", Kind::Int(2, 200)),
    ("dsfm.knots_t", Kind::Int(2, 200)),
    ("dsfm.tol", Kind::Between(0.0, INF)),
    ("dsfm.max_iter", Kind::Int(1, 1_000_000)),
    ("var.pmax", Kind::Int(1, 50)),
    ("var.criterion", Kind::Choice(&["aic", "hq", "sc"])),
    ("var.lags", Kind::Int(1, 500)),
    ("strategy.window", Kind::Int(30, 100_000)),
    ("strategy.tau_star", Kind::Positive),
    ("strategy.var_order", Kind::Int(1, 50)),
    ("strategy.grid_n", Kind::Int(2, 10_000)),
    ("strategy.slice_tol", Kind::Real(0.0, 1.0)),
    ("strategy.hedge", Kind::Choice(&["bs", "external"])),
    ("robustness.iters", Kind::Int(1, 1_000_000)),
    ("robustness.block", Kind::Int(1, 100_000)),
];

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _)| *k == key).map(|(_, kind)| *kind)
}

fn check(key: &str, value: &str) -> Result<(), CliError> {
    let kind = kind_of(key).ok_or_else(|| CliError::usage(format!("unknown config key `{key}`")))?;
    let bad = |why: String| CliError::usage(format!("config key `{key}` = `{value}`: {why}"));
    match kind {
        Kind::Real(lo, hi) | Kind::Between(lo, hi) => {
            let v: f64 = value.parse().map_err(|_| bad("expected a number".into()))?;
            let ok = match kind {
                Kind::Real(..) => v >= lo && v <= hi,
                _ => v > lo && v < hi,
            };
            if !ok || !v.is_finite() {
                return Err(bad(format!(
                    "must lie in {}{lo}, {hi}{}",
                    bracket(kind).0,
                    bracket(kind).1
                )));
            }
        }
        Kind::Positive => {
            let v: f64 = value.parse().map_err(|_| bad("expected a number".into()))?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad("must be positive".into()));
            }
        }
        Kind::Int(lo, hi) => {
            let v: u64 = value
                .parse()
                .map_err(|_| bad("expected a nonnegative integer".into()))?;
            if v < lo || v > hi {
                return Err(bad(format!("must lie in [{lo}, {hi}]")));
            }
        }
        Kind::Bool => {
            value
                .parse::<bool>()
                .map_err(|_| bad("expected true or false".into()))?;
        }
        Kind::Choice(options) => {
            if !options.contains(&value) {
                return Err(bad(format!("expected one of {}", options.join(", "))));
            }
        }
        Kind::Ticker => {
            if value.is_empty() || !value.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '-') {
                return Err(bad("expected a ticker symbol".into()));
            }
        }
    }
    Ok(())
}

fn bracket(kind: Kind) -> (&'static str, &'static str) {
    match kind {
        Kind::Between(..) => ("(", ")"),
        _ => ("[", "]"),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected `section.key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if cfg.values.contains_key(k) {
                return Err(CliError::usage(format!("config line {}: duplicate key `{k}`", n + 1)));
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets a key, validating it. Command-line flags land here too, so they
    /// are checked and hashed like file entries.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        check(key, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Sets `key` from an optional flag value.
    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<(), CliError> {
        match value {
            Some(v) => self.set(key, &v.to_string()),
            None => Ok(()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> T {
        debug_assert!(kind_of(key).is_some(), "{key} is not a config key");
        self.values.get(key).and_then(|v| v.parse().ok()).unwrap_or(default)
    }

    pub fn text(&self, key: &str, default: &str) -> String {
        self.values.get(key).cloned().unwrap_or_else(|| default.to_string())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// FNV-1a over the sorted `key=value` lines.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325;
        for (k, v) in &self.values {
            h = fnv1a(h, k.as_bytes());
            h = fnv1a(h, b"=");
            h = fnv1a(h, v.as_bytes());
            h = fnv1a(h, b"\n");
        }
        h
    }
}
