use chrono::NaiveDate;
use letf_lab::dsfm::BasisSpec;
use letf_lab::fixtures::{oracle_world, synthetic_market, MarketSpec};
use letf_lab::market_data::ContractKey;
use letf_lab::strategy::*;
use proptest::prelude::*;

fn date(m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2015, m, d).unwrap()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("q{i}")).collect()
}

fn leg(price: f64, delta: f64, strike: i64) -> LegPosition {
    LegPosition {
        contract: ContractKey {
            ticker: "SSO".into(),
            expiry: NaiveDate::from_ymd_opt(2016, 1, 15).unwrap(),
            strike_ticks: strike,
        },
        id: format!("k{strike}"),
        price,
        iv: 0.3,
        delta,
    }
}

fn small_config() -> StrategyConfig {
    StrategyConfig {
        window_w: 30,
        basis: BasisSpec::uniform(3, 3, 9, 7).unwrap(),
        ..StrategyConfig::paper_defaults()
    }
}

#[test]
fn marginal_transform_examples() {
    let r = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(marginal_transform(&r, &r).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(marginal_transform(&[0.7, 0.7], &[0.7; 6]).unwrap(), vec![0.5, 0.5]);
    assert_eq!(marginal_transform(&[-1.0, 9.0], &r).unwrap(), vec![0.0, 1.0]);
    let m = MarginalMap::new(&r).unwrap();
    assert!(m.apply(9.0).1 && !m.apply(2.5).1);
    assert!(marginal_transform(&[1.0], &[]).unwrap_err().is_validation());
}

#[test]
fn black_scholes_delta_limits() {
    assert!(bs_delta(500.0, 50.0, 0.5, 0.0, 0.2) > 1.0 - 1e-12);
    assert_eq!(bs_delta(100.0, 100.5, 1.0, 0.01, 1e-14), 1.0);
    assert_eq!(bs_delta(100.0, 101.5, 1.0, 0.01, 1e-14), 0.0);
    // ATM forward: d1 = σ√T / 2 = 0.1, Φ(0.1) from the normal table.
    assert!((bs_delta(100.0, 100.0, 1.0, 0.0, 0.2) - 0.539_827_837_277_029).abs() < 1e-12);
}

#[test]
fn decide_three_cases() {
    let market = [0.20, 0.25, 0.30, 0.22];
    let up: Vec<f64> = market.iter().map(|v| v + 0.05).collect();
    let d = decide(&up, &market, &ids(4)).unwrap();
    assert_eq!(d.classification, Classification::LongOnly);
    // Rounding differs by index; the winner must hold the largest gap.
    let gaps: Vec<f64> = up.iter().zip(&market).map(|(a, b)| a - b).collect();
    let best = gaps.iter().cloned().fold(f64::MIN, f64::max);
    let first = gaps.iter().position(|g| *g == best).unwrap();
    assert_eq!(d.long_leg.unwrap().index, first);

    let down: Vec<f64> = market.iter().map(|v| v - 0.05).collect();
    let d = decide(&down, &market, &ids(4)).unwrap();
    assert_eq!(d.classification, Classification::ShortOnly);
    assert!(d.long_leg.is_none());

    let model = [0.30 + 0.052, 0.40 - 0.163, 0.35, 0.22 + 0.01];
    let market = [0.30, 0.40, 0.35 + 0.02, 0.22];
    let d = decide(&model, &market, &ids(4)).unwrap();
    assert_eq!(d.classification, Classification::Mixed);
    let (l, s) = (d.long_leg.unwrap(), d.short_leg.unwrap());
    assert_eq!((l.id.as_str(), s.id.as_str()), ("q0", "q1"));
    assert!((l.d - 0.052).abs() < 1e-12 && (s.d - 0.163).abs() < 1e-12);

    let same = decide(&[0.25; 3], &[0.25; 3], &ids(3)).unwrap();
    assert_eq!(same.classification, Classification::NoTrade);
    assert!(same.long_leg.is_none() && same.short_leg.is_none());

    // Exact equality abstains; ties go to the first index.
    let d = decide(&[0.5, 0.75, 0.75, 0.5], &[0.5, 0.5, 0.5, 0.5], &ids(4)).unwrap();
    assert_eq!(d.classification, Classification::LongOnly);
    assert_eq!(d.long_leg.unwrap().index, 1);
    assert!(decide(&[0.1], &[0.1, 0.2], &ids(1)).is_err());
}

#[test]
fn worked_example_accounting() {
    let entry = Position::new(
        date(6, 18),
        Some(leg(27.375, 0.859, 1)),
        Some(leg(2.740, 0.461, 2)),
        66.960,
    );
    assert!((entry.hedge_delta - 0.398).abs() < 1e-12);
    assert!((entry.entry_value + 2.015).abs() < 1e-3, "{}", entry.entry_value);
    let exit = ExitPrices {
        date: date(6, 19),
        long: Some(ExitQuote { price: 28.450, iv: 0.3 }),
        short: Some(ExitQuote { price: 0.320, iv: 0.3 }),
        underlying: 68.300,
    };
    let rec = settle(&entry, &exit, 0.0).unwrap();
    assert!((rec.exit_value - 0.947).abs() < 1e-3, "{}", rec.exit_value);
    assert!((rec.pnl - 2.962).abs() < 1e-3, "{}", rec.pnl);
    assert_eq!(rec.cumulative, rec.pnl);

    let hedge = Position::with_hedge(date(6, 18), None, None, 0.398, 66.960);
    let flat = ExitPrices {
        date: date(6, 19),
        long: None,
        short: None,
        underlying: 68.300,
    };
    assert!((settle(&hedge, &flat, 0.0).unwrap().pnl + 0.533).abs() < 1e-3);

    let still = ExitPrices {
        long: Some(ExitQuote { price: 27.375, iv: 0.3 }),
        short: Some(ExitQuote { price: 2.740, iv: 0.3 }),
        underlying: 66.960,
        ..exit
    };
    assert_eq!(settle(&entry, &still, 0.0).unwrap().pnl, 0.0);
    assert_eq!(portfolio_value(Some(10.0), None, 0.0, 50.0), 10.0);
}

#[test]
fn hedge_is_delta_neutral_at_entry() {
    for (dl, ds) in [(0.859, 0.461), (0.2, 0.0), (0.0, 0.73), (0.51, 0.49)] {
        let long = (dl > 0.0).then(|| leg(1.0, dl, 1));
        let short = (ds > 0.0).then(|| leg(1.0, ds, 2));
        let p = Position::new(date(6, 18), long, short, 50.0);
        assert!((dl - ds - p.hedge_delta).abs() < 1e-12);
    }
}

#[test]
fn oracle_world_trades_profitably_and_hits_every_time() {
    let cfg = small_config();
    let (spec, quotes) = oracle_world(&MarketSpec::standard(42, 11), &cfg).unwrap();
    let days = market_days(&quotes, "SPY", "SSO");
    let mut provider = FlatVariance {
        rate: spec.variance_rate,
    };
    let ledger = run_backtest(&days, &spec.source, &spec.target, &mut provider, &cfg).unwrap();
    assert!(ledger.skipped.is_empty(), "{:?}", ledger.skipped);
    assert_eq!(ledger.periods.len(), 42 - 30);
    for p in &ledger.periods {
        assert_ne!(p.decision.classification, Classification::NoTrade);
        assert!(p.option_pnl >= 0.0, "{} {}", p.date, p.option_pnl);
    }
    let s = ledger.summary();
    assert_eq!(s.hit_rate, Some(1.0));
    assert_eq!(s.hits, 12);
}

#[test]
fn decisions_ignore_the_future() {
    let cfg = small_config();
    let spec = MarketSpec::standard(36, 5);
    let quotes = synthetic_market(&spec).unwrap();
    let days = market_days(&quotes, "SPY", "SSO");
    let mut provider = FlatVariance {
        rate: spec.variance_rate,
    };
    let base = run_backtest(&days, &spec.source, &spec.target, &mut provider, &cfg).unwrap();

    // Last settled period that still leaves at least one later day to mutate.
    let t = base
        .periods
        .iter()
        .filter_map(|p| days.iter().position(|d| d.date == p.date))
        .filter(|&i| i + 2 < days.len())
        .max()
        .unwrap();
    let mut mutated = days.clone();
    for day in &mut mutated[t + 1..] {
        for q in day.source.iter_mut().chain(day.target.iter_mut()) {
            q.implied_vol *= 1.7;
            q.mid_price *= 1.3;
        }
    }
    let after = run_backtest(&mutated, &spec.source, &spec.target, &mut provider, &cfg).unwrap();
    let upto = |l: &TradeLedger| -> Vec<(TradeDecision, Position)> {
        l.periods
            .iter()
            .filter(|p| p.date <= days[t].date)
            .map(|p| (p.decision.clone(), p.position.clone()))
            .collect()
    };
    assert!(!upto(&base).is_empty());
    assert_eq!(upto(&base), upto(&after));
    // The settlement at t does see day t + 1.
    let pnl = |l: &TradeLedger| {
        l.periods
            .iter()
            .find(|p| p.date == days[t].date)
            .map(|p| p.pnl.exit_value)
    };
    assert_ne!(pnl(&base), pnl(&after));
}

#[test]
fn ledger_accounting_and_skips() {
    let cfg = small_config();
    let spec = MarketSpec::standard(34, 9);
    let quotes = synthetic_market(&spec).unwrap();
    let mut days = market_days(&quotes, "SPY", "SSO");
    // Target quotes vanish on one day: its own period and the previous
    // period's exit both fail.
    days[31].target.clear();
    let mut provider = FlatVariance {
        rate: spec.variance_rate,
    };
    let ledger = run_backtest(&days, &spec.source, &spec.target, &mut provider, &cfg).unwrap();
    assert_eq!(ledger.curve.len(), 34 - 30);
    assert_eq!(ledger.skipped.len(), 2);
    assert_eq!(ledger.periods.len(), 2);
    let mut run = 0.0;
    for p in &ledger.periods {
        run += p.pnl.pnl;
        assert_eq!(p.pnl.cumulative, run);
        assert_eq!(p.pnl.pnl, p.pnl.exit_value - p.pnl.entry_value);
    }
    assert_eq!(ledger.summary().cumulative, run);

    let mut buf = Vec::new();
    write_ledger(&mut buf, &ledger).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("date,class,long_id,short_id,hedge_delta,entry_value,exit_value,pnl,cumulative\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn backtest_preconditions() {
    let cfg = small_config();
    let spec = MarketSpec::standard(30, 1);
    let days = market_days(&synthetic_market(&spec).unwrap(), "SPY", "SSO");
    let mut provider = FlatVariance { rate: 0.03 };
    assert!(run_backtest(&days, &spec.source, &spec.target, &mut provider, &cfg)
        .unwrap_err()
        .is_validation());
    let bad = StrategyConfig {
        window_w: 10,
        ..cfg.clone()
    };
    assert!(bad.validate().unwrap_err().is_validation());
    let far = StrategyConfig { tau_star: 3.0, ..cfg };
    let days = market_days(&synthetic_market(&MarketSpec::standard(32, 1)).unwrap(), "SPY", "SSO");
    assert!(run_backtest(&days, &spec.source, &spec.target, &mut provider, &far)
        .unwrap_err()
        .is_validation());
}

proptest! {
    #[test]
    fn marginal_transform_is_monotone(
        reference in prop::collection::vec(-5.0f64..5.0, 1..40),
        mut values in prop::collection::vec(-6.0f64..6.0, 1..20),
    ) {
        values.sort_by(f64::total_cmp);
        let out = marginal_transform(&values, &reference).unwrap();
        prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(out.iter().all(|u| (0.0..=1.0).contains(u)));
    }

    // Dyadic values keep the shifted differences exact.
    #[test]
    fn decide_depends_on_differences_only(
        model in prop::collection::vec(0i32..64, 1..12),
        market in prop::collection::vec(0i32..64, 12),
        shift in -32i32..32,
    ) {
        let n = model.len();
        let m: Vec<f64> = model.iter().map(|v| *v as f64 / 64.0).collect();
        let v: Vec<f64> = market[..n].iter().map(|v| *v as f64 / 64.0).collect();
        let c = shift as f64 / 64.0;
        let ms: Vec<f64> = m.iter().map(|x| x + c).collect();
        let vs: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert_eq!(decide(&m, &v, &ids(n)).unwrap(), decide(&ms, &vs, &ids(n)).unwrap());
    }
}
