use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::Serialize;

use letf_lab::cond_var::{analytic_conditional_iv, default_grid, mc_conditional_iv, AnalyticSettings, CondVarCurve};
use letf_lab::dsfm::{self, BasisSpec, FitSettings};
use letf_lab::fixtures::{funds as fixture_funds, synthetic_market, MarketSpec};
use letf_lab::heston::{calibrate, simulate_euler, CalibrationSettings, CarryTerms, HestonParams};
use letf_lab::market_data::{
    builtin_funds, csv_writer, find_fund, load_funds, read_quotes, write_funds, write_quotes, FundSpec, OptionQuote,
};
use letf_lab::moneyness::{scale_quote_set, ConditionalVariance, ScalingContext};
use letf_lab::msmooth::{cv_bandwidth, huber_constant, oversmoothing_bandwidth, uniform_band, Kernel, SmootherConfig};
use letf_lab::numerics::rng::derive_seed;
use letf_lab::resample::{robustness, write_envelope, BlockBootstrapConfig};
use letf_lab::strategy::{
    market_days, run_backtest, window_panels, write_ledger, CondVarProvider, FlatVariance, HedgeModel, HestonCurves,
    MarketDay, StrategyConfig, TradeLedger,
};
use letf_lab::var_forecast::{
    fit_var, is_stable, portmanteau, select_order, write_loadings, OrderSelection, Portmanteau, Stability, VarModel,
};

use crate::config::RunConfig;
use crate::output::{open, read_json, Header, Sink};
use crate::{Cli, CliError, Command, DsfmCommand, VarCommand};

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg_path = cli.config.as_deref();
    match &cli.command {
        Command::Calibrate(a) => {
            cfg.set_opt("data.r", a.r)?;
            let funds = load_funds(&a.funds)?;
            let ticker = a.ticker.clone().unwrap_or_else(|| cfg.text("data.source", "SPY"));
            let quotes = load_quotes(&a.quotes, &funds)?;
            let day = day_quotes(&quotes, &ticker, a.date)?;
            let report = calibrate_fund(&cfg, &day, find_fund(&funds, &ticker)?)?;
            let sink = sink("calibrate", &cfg, None, &[&a.quotes, &a.funds], cfg_path);
            sink.json(&a.out, &report)
        }
        Command::Simulate(a) => {
            cfg.set_opt("data.r", a.r)?;
            positive("ttm", a.ttm)?;
            positive("s0", a.s0)?;
            let params = read_params(&a.params)?;
            let steps = a.steps.unwrap_or_else(|| steps_for(&cfg, a.ttm));
            let carry = CarryTerms::new(cfg.get("data.r", 0.0), a.c);
            let paths = simulate_euler(&params, &carry, a.s0, a.ttm, steps, a.paths, a.seed)?;
            let sink = sink("simulate", &cfg, Some(a.seed), &[&a.params], cfg_path);
            sink.write(&a.out, |w| {
                let mut out = csv_writer(w);
                out.write_record(["terminal_price", "integrated_variance", "terminal_variance"])?;
                for p in &paths {
                    out.serialize((p.terminal_price, p.integrated_variance, p.terminal_variance))?;
                }
                out.flush()?;
                Ok(())
            })
        }
        Command::Condvar(a) => {
            cfg.set_opt("data.r", a.r)?;
            positive("ttm", a.ttm)?;
            let params = read_params(&a.params)?;
            let carry = CarryTerms::new(cfg.get("data.r", 0.0), a.c);
            let curve = condvar_curve(&cfg, &params, &carry, a.ttm, a.paths, a.bins, a.seed)?;
            if a.analytic_check {
                let check = analytic_check(&curve, &params, &carry)?;
                println!(
                    "{}",
                    serde_json::to_string(&check).map_err(|e| CliError::runtime(e.to_string()))?
                );
            }
            let sink = sink("condvar", &cfg, Some(a.seed), &[&a.params], cfg_path);
            sink.write(&a.out, |w| curve.write_csv(w))
        }
        Command::Scale(a) => {
            cfg.set_opt("data.r", a.r)?;
            let funds = funds_or_builtin(a.funds.as_deref())?;
            let quotes = load_quotes(&a.quotes, &funds)?;
            let curve = CondVarCurve::read_csv(std::io::BufReader::new(open(&a.condvar)?))?;
            let day = day_quotes(&quotes, &a.from, a.date)?;
            let rows = scale_day(&cfg, &day, &funds, &a.from, &a.to, curve)?;
            let mut inputs = vec![a.quotes.as_path(), a.condvar.as_path()];
            inputs.extend(a.funds.as_deref());
            sink("scale", &cfg, None, &inputs, cfg_path).write(&a.out, |w| write_scaled(w, &rows))
        }
        Command::Bands(a) => {
            cfg.set_opt("bands.alpha", a.alpha)?;
            cfg.set_opt("bands.boot", a.boot)?;
            let funds = funds_or_builtin(a.funds.as_deref())?;
            let quotes = load_quotes(&a.quotes, &funds)?;
            let ticker = a.ticker.clone().unwrap_or_else(|| cfg.text("data.target", "SSO"));
            let day = day_quotes(&quotes, &ticker, a.date)?;
            let band = smile_band(&cfg, &day, a.ttm, a.seed)?;
            let mut inputs = vec![a.quotes.as_path()];
            inputs.extend(a.funds.as_deref());
            sink("bands", &cfg, Some(a.seed), &inputs, cfg_path).write(&a.out, |w| write_band(w, &band))
        }
        Command::Dsfm {
            command:
                DsfmCommand::Fit {
                    panels,
                    l,
                    out,
                    loadings,
                },
        } => {
            cfg.set_opt("dsfm.l", *l)?;
            let data = dsfm::read_panels(open(panels)?)?;
            let model = dsfm::fit(&data, cfg.get("dsfm.l", 3), &basis(&cfg)?, &fit_settings(&cfg))?;
            println!(
                "explained_variance={} rmse={} iterations={}",
                dsfm::explained_variance(&model, &data)?,
                dsfm::rmse(&model, &data)?,
                model.report.iterations
            );
            let sink = sink("dsfm", &cfg, None, &[panels], cfg_path);
            sink.json(out, &model)?;
            if let Some(path) = loadings {
                sink.write(path, |w| write_model_loadings(w, &model))?;
            }
            Ok(())
        }
        Command::Var {
            command: VarCommand::Fit { z, pmax, p, out },
        } => {
            cfg.set_opt("var.pmax", *pmax)?;
            let (_, series) = letf_lab::var_forecast::read_loadings(open(z)?)?;
            let report = var_report(&cfg, &series, *p)?;
            sink("var", &cfg, None, &[z], cfg_path).json(out, &report)
        }
        Command::Backtest(a) => {
            let funds = load_funds(&a.funds)?;
            let quotes = load_quotes(&a.quotes, &funds)?;
            let (days, source, target) = backtest_inputs(&cfg, &quotes, &funds)?;
            let strategy = strategy_config(&cfg)?;
            let mut provider = provider(&cfg, &source, derive_seed(a.seed, "condvar", 0), None)?;
            let ledger = run_backtest(&days, &source, &target, &mut provider, &strategy)?;
            warn_skips(&ledger);
            let sink = sink("backtest", &cfg, Some(a.seed), &[&a.quotes, &a.funds], cfg_path);
            sink.write(&a.out_ledger, |w| write_ledger(w, &ledger))?;
            sink.json(&a.out_summary, &ledger.summary())
        }
        Command::Robustness(a) => {
            cfg.set_opt("robustness.iters", a.iters)?;
            cfg.set_opt("robustness.block", a.block)?;
            let funds = load_funds(&a.funds)?;
            let quotes = load_quotes(&a.quotes, &funds)?;
            let (days, source, target) = backtest_inputs(&cfg, &quotes, &funds)?;
            let strategy = strategy_config(&cfg)?;
            let provider = provider(&cfg, &source, derive_seed(a.seed, "condvar", 0), None)?;
            let boot = bootstrap_config(&cfg, a.seed);
            let report = robustness(&days, &source, &target, &provider, &strategy, &boot)?;
            let sink = sink("robustness", &cfg, Some(a.seed), &[&a.quotes, &a.funds], cfg_path);
            sink.write(&a.out, |w| write_envelope(w, &report))
        }
        Command::Demo(a) => {
            cfg.set("data.days", &a.days.to_string())?;
            demo(&cfg, a.seed, &a.out_dir, a.days, cfg_path)
        }
    }
}

fn sink(sub: &'static str, cfg: &RunConfig, seed: Option<u64>, inputs: &[&Path], config: Option<&Path>) -> Sink {
    let mut all = inputs.to_vec();
    all.extend(config);
    Sink::new(
        Header {
            subcommand: sub,
            config_hash: cfg.hash(),
            seed,
        },
        &all,
    )
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::usage(format!("--{name} must be positive")))
    }
}

fn load_quotes(path: &Path, funds: &[FundSpec]) -> Result<Vec<OptionQuote>, CliError> {
    Ok(read_quotes(open(path)?, path, funds)?)
}

fn funds_or_builtin(path: Option<&Path>) -> Result<Vec<FundSpec>, CliError> {
    Ok(match path {
        Some(p) => load_funds(p)?,
        None => builtin_funds(),
    })
}

/// Quotes of `ticker` on `date`, or on the last date that lists the ticker.
fn day_quotes(quotes: &[OptionQuote], ticker: &str, date: Option<NaiveDate>) -> Result<Vec<OptionQuote>, CliError> {
    let date = match date {
        Some(d) => d,
        None => quotes
            .iter()
            .filter(|q| q.ticker == ticker)
            .map(|q| q.obs_date)
            .max()
            .ok_or_else(|| CliError::usage(format!("no quotes for {ticker}")))?,
    };
    let day: Vec<OptionQuote> = quotes
        .iter()
        .filter(|q| q.ticker == ticker && q.obs_date == date)
        .cloned()
        .collect();
    if day.is_empty() {
        return Err(CliError::usage(format!("no quotes for {ticker} on {date}")));
    }
    Ok(day)
}

fn read_params(path: &Path) -> Result<HestonParams, CliError> {
    let v: serde_json::Value = read_json(path)?;
    let inner = v.get("params").cloned().unwrap_or(v);
    let p: HestonParams = serde_json::from_value(inner)
        .map_err(|e| CliError::usage(format!("{}: not Heston parameters: {e}", path.display())))?;
    p.validate()?;
    Ok(p)
}

fn heston_start(cfg: &RunConfig) -> HestonParams {
    HestonParams::new(
        cfg.get("heston.kappa", 2.0),
        cfg.get("heston.theta", 0.04),
        cfg.get("heston.sigma", 0.3),
        cfg.get("heston.v0", 0.04),
        cfg.get("heston.rho", -0.5),
    )
}

fn calibrate_fund(
    cfg: &RunConfig,
    quotes: &[OptionQuote],
    fund: &FundSpec,
) -> Result<letf_lab::heston::CalibrationReport, CliError> {
    let settings = CalibrationSettings {
        max_iter: cfg.get("heston.max_iter", 200),
        max_starts: cfg.get("heston.max_starts", 3),
        ..CalibrationSettings::default()
    };
    let carry = CarryTerms::new(cfg.get("data.r", 0.0), fund.carry_cost());
    Ok(calibrate(quotes, &carry, &heston_start(cfg), &settings)?)
}

fn steps_for(cfg: &RunConfig, ttm: f64) -> usize {
    ((ttm * cfg.get("condvar.steps_per_year", 250usize) as f64).ceil() as usize).max(1)
}

fn condvar_curve(
    cfg: &RunConfig,
    params: &HestonParams,
    carry: &CarryTerms,
    ttm: f64,
    n_paths: usize,
    bins: usize,
    seed: u64,
) -> Result<CondVarCurve, CliError> {
    let s0 = cfg.get("condvar.s0", 100.0);
    let paths = simulate_euler(params, carry, s0, ttm, steps_for(cfg, ttm), n_paths, seed)?;
    Ok(mc_conditional_iv(&paths, s0, ttm, &default_grid(&paths, s0, bins))?)
}

#[derive(Serialize)]
struct AnalyticCheck {
    lm: f64,
    monte_carlo: f64,
    analytic: f64,
    relative_difference: f64,
}

fn analytic_check(curve: &CondVarCurve, p: &HestonParams, carry: &CarryTerms) -> Result<AnalyticCheck, CliError> {
    let (lm, mc, _) = curve
        .nonempty()
        .into_iter()
        .min_by(|a, b| a.0.abs().total_cmp(&b.0.abs()))
        .ok_or_else(|| CliError::runtime("every bin is empty"))?;
    let a = analytic_conditional_iv(lm, p, carry, 1.0, curve.ttm, &AnalyticSettings::default())?;
    Ok(AnalyticCheck {
        lm,
        monte_carlo: mc,
        analytic: a.value,
        relative_difference: (mc - a.value) / a.value,
    })
}

#[derive(Serialize)]
struct ScaledRow {
    obs_date: NaiveDate,
    strike: f64,
    ttm: f64,
    source_lm: f64,
    scaled_lm: f64,
    implied_vol: f64,
    extrapolated: bool,
}

fn scale_day(
    cfg: &RunConfig,
    day: &[OptionQuote],
    funds: &[FundSpec],
    from: &str,
    to: &str,
    curve: CondVarCurve,
) -> Result<Vec<ScaledRow>, CliError> {
    let tol = cfg.get("scaling.ttm_tol", 0.5 / 365.0);
    let slice: Vec<OptionQuote> = day
        .iter()
        .filter(|q| (q.ttm - curve.ttm).abs() <= tol)
        .cloned()
        .collect();
    if slice.is_empty() {
        return Err(CliError::usage(format!(
            "no {from} quotes within {tol} years of the curve maturity {}",
            curve.ttm
        )));
    }
    let ctx = ScalingContext {
        source: find_fund(funds, from)?.clone(),
        target: find_fund(funds, to)?.clone(),
        r: cfg.get("data.r", 0.0),
        ttm: curve.ttm,
        condvar: ConditionalVariance::Curve(curve),
    };
    let scaled = scale_quote_set(&slice, &ctx)?;
    Ok(slice
        .iter()
        .zip(scaled)
        .map(|(q, s)| ScaledRow {
            obs_date: q.obs_date,
            strike: q.strike,
            ttm: q.ttm,
            source_lm: q.log_moneyness(),
            scaled_lm: s.scaled_lm,
            implied_vol: s.implied_vol,
            extrapolated: s.extrapolated,
        })
        .collect())
}

fn write_scaled(w: &mut Vec<u8>, rows: &[ScaledRow]) -> letf_lab::Result<()> {
    let mut out = csv_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

fn smile_band(
    cfg: &RunConfig,
    day: &[OptionQuote],
    ttm: f64,
    seed: u64,
) -> Result<letf_lab::msmooth::UniformBand, CliError> {
    positive("ttm", ttm)?;
    let tol = cfg.get("bands.ttm_tol", 1.0 / 365.0);
    let mut pts: Vec<(f64, f64)> = day
        .iter()
        .filter(|q| (q.ttm - ttm).abs() <= tol)
        .map(|q| (q.log_moneyness(), q.implied_vol))
        .collect();
    if pts.len() < 10 {
        return Err(CliError::usage(format!(
            "{} quotes within {tol} years of ttm {ttm}; a band needs at least 10",
            pts.len()
        )));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let kernel = match cfg.text("bands.kernel", "quartic").as_str() {
        "gaussian" => Kernel::Gaussian,
        _ => Kernel::Quartic,
    };
    let span = x[x.len() - 1] - x[0];
    if !(span > 0.0) {
        return Err(CliError::usage("all quotes share one strike"));
    }
    let h = if cfg.contains("bands.h") {
        cfg.get("bands.h", 0.0)
    } else {
        // Pilot Huber constant at a wide bandwidth, then leave-one-out CV.
        let pilot = huber_constant(&x, &y, kernel, 0.3 * span)?;
        let grid: Vec<f64> = (0..12).map(|i| span * (0.08 + 0.04 * i as f64)).collect();
        cv_bandwidth(&x, &y, kernel, pilot, &grid)?.h
    };
    let n_grid: usize = cfg.get("bands.grid", 51);
    let smoother = SmootherConfig {
        kernel,
        h,
        huber_c: huber_constant(&x, &y, kernel, h)?,
        eval_grid: (0..n_grid)
            .map(|i| x[0] + span * i as f64 / (n_grid - 1) as f64)
            .collect(),
        support_trim: cfg.get("bands.trim", 0.05),
    };
    let g = oversmoothing_bandwidth(h, x.len());
    Ok(uniform_band(
        &x,
        &y,
        &smoother,
        g,
        cfg.get("bands.boot", 1000),
        cfg.get("bands.alpha", 0.05),
        seed,
    )?)
}

fn write_band(w: &mut Vec<u8>, band: &letf_lab::msmooth::UniformBand) -> letf_lab::Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["x", "fit", "lower", "upper"])?;
    for i in 0..band.grid.len() {
        out.serialize((band.grid[i], band.fit[i], band.lower[i], band.upper[i]))?;
    }
    out.flush()?;
    Ok(())
}

fn basis(cfg: &RunConfig) -> Result<BasisSpec, CliError> {
    Ok(BasisSpec::uniform(
        cfg.get("dsfm.order_m", 3),
        cfg.get("dsfm.order_t", 3),
        cfg.get("dsfm.knots_m", 9),
        cfg.get("dsfm.knots_t", 7),
    )?)
}

fn fit_settings(cfg: &RunConfig) -> FitSettings {
    let d = FitSettings::default();
    FitSettings {
        tol: cfg.get("dsfm.tol", d.tol),
        max_iter: cfg.get("dsfm.max_iter", d.max_iter),
    }
}

fn write_model_loadings(w: &mut Vec<u8>, model: &dsfm::DsfmModel) -> letf_lab::Result<()> {
    let z = DMatrix::from_fn(model.z.len(), model.l, |r, c| model.z[r][c + 1]);
    write_loadings(w, &model.days, &z)
}

#[derive(Serialize)]
struct VarReport {
    selection: Option<OrderSelection>,
    criterion: String,
    model: VarModel,
    stability: Stability,
    portmanteau: Option<Portmanteau>,
    forecast: Vec<f64>,
}

fn var_report(cfg: &RunConfig, z: &DMatrix<f64>, fixed: Option<usize>) -> Result<VarReport, CliError> {
    let criterion = cfg.text("var.criterion", "aic");
    let (selection, p) = match fixed {
        Some(0) => return Err(CliError::usage("--p must be at least 1")),
        Some(p) => (None, p),
        None => {
            let s = select_order(z, cfg.get("var.pmax", 5))?;
            let p = match criterion.as_str() {
                "hq" => s.p_hq,
                "sc" => s.p_sc,
                _ => s.p_aic,
            };
            (Some(s), p)
        }
    };
    let model = fit_var(z, p)?;
    let lags: usize = cfg.get("var.lags", 12);
    // The test has no degrees of freedom unless the horizon exceeds p.
    let port = if lags > p && z.nrows() > lags + p {
        Some(portmanteau(&model, lags)?)
    } else {
        log::warn!(
            "skipping the portmanteau test: {lags} lags with order {p} on {} rows",
            z.nrows()
        );
        None
    };
    let recent: Vec<Vec<f64>> = (z.nrows() - p..z.nrows())
        .map(|r| z.row(r).iter().copied().collect())
        .collect();
    Ok(VarReport {
        selection,
        criterion: if fixed.is_some() { "fixed".into() } else { criterion },
        stability: is_stable(&model),
        portmanteau: port,
        forecast: letf_lab::var_forecast::forecast(&model, &recent)?,
        model,
    })
}

fn strategy_config(cfg: &RunConfig) -> Result<StrategyConfig, CliError> {
    let d = StrategyConfig::paper_defaults();
    let s = StrategyConfig {
        window_w: cfg.get("strategy.window", d.window_w),
        tau_star: cfg.get("strategy.tau_star", d.tau_star),
        l: cfg.get("dsfm.l", d.l),
        basis: basis(cfg)?,
        r: cfg.get("data.r", d.r),
        hedge_model: match cfg.text("strategy.hedge", "bs").as_str() {
            "external" => HedgeModel::ExternalDelta,
            _ => HedgeModel::BlackScholesDelta,
        },
        var_order: cfg.get("strategy.var_order", d.var_order),
        grid_n: cfg.get("strategy.grid_n", d.grid_n),
        slice_tol: cfg.get("strategy.slice_tol", d.slice_tol),
        fit: fit_settings(cfg),
    };
    s.validate()?;
    Ok(s)
}

#[derive(Debug, Clone)]
enum Provider {
    Flat(FlatVariance),
    Heston(HestonCurves),
}

impl CondVarProvider for Provider {
    fn refresh(&mut self, as_of: &[OptionQuote]) -> letf_lab::Result<()> {
        match self {
            Provider::Flat(p) => p.refresh(as_of),
            Provider::Heston(p) => p.refresh(as_of),
        }
    }

    fn at(&mut self, ttm: f64) -> letf_lab::Result<ConditionalVariance> {
        match self {
            Provider::Flat(p) => p.at(ttm),
            Provider::Heston(p) => p.at(ttm),
        }
    }
}

fn provider(cfg: &RunConfig, source: &FundSpec, seed: u64, params: Option<HestonParams>) -> Result<Provider, CliError> {
    Ok(match cfg.text("condvar.model", "heston").as_str() {
        "flat" => Provider::Flat(FlatVariance {
            rate: cfg.get("condvar.variance_rate", 0.0324),
        }),
        _ => Provider::Heston(HestonCurves::new(
            params.unwrap_or_else(|| heston_start(cfg)),
            CarryTerms::new(cfg.get("data.r", 0.0), source.carry_cost()),
            cfg.get("condvar.paths", 20_000),
            cfg.get("condvar.steps_per_year", 250),
            cfg.get("condvar.bins", 30),
            seed,
            cfg.get("condvar.recalibrate", false),
            cfg.get("condvar.bucket_days", 7),
        )?),
    })
}

fn backtest_inputs(
    cfg: &RunConfig,
    quotes: &[OptionQuote],
    funds: &[FundSpec],
) -> Result<(Vec<MarketDay>, FundSpec, FundSpec), CliError> {
    let src = cfg.text("data.source", "SPY");
    let tgt = cfg.text("data.target", "SSO");
    let source = find_fund(funds, &src)?.clone();
    let target = find_fund(funds, &tgt)?.clone();
    Ok((market_days(quotes, &src, &tgt), source, target))
}

fn warn_skips(ledger: &TradeLedger) {
    if let Some(first) = ledger.skipped.first() {
        log::warn!(
            "{} of {} periods skipped; first on {}: {}",
            ledger.skipped.len(),
            ledger.curve.len(),
            first.date,
            first.reason
        );
    }
}

fn bootstrap_config(cfg: &RunConfig, seed: u64) -> BlockBootstrapConfig {
    BlockBootstrapConfig {
        block_size: cfg.get("robustness.block", 5),
        n_iterations: cfg.get("robustness.iters", 500),
        seed,
    }
}

/// The whole pipeline on a generated SPY/SSO market. Every stage draws its
/// seed from `derive_seed(seed, stage, 0)`.
fn demo(cfg: &RunConfig, seed: u64, dir: &Path, days: usize, config: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    for (k, v) in [
        ("strategy.window", "30"),
        ("robustness.iters", "100"),
        ("condvar.paths", "20000"),
        ("heston.max_starts", "1"),
        ("heston.max_iter", "60"),
    ] {
        if !cfg.contains(k) {
            cfg.set(k, v)?;
        }
    }
    let stage = |name: &str| derive_seed(seed, name, 0);
    let header = |sub: &'static str, s: u64| sink(sub, &cfg, Some(s), &[], config);
    let path = |name: &str| dir.join(name);

    let spec = MarketSpec::standard(days, stage("fixtures"));
    spec.validate()?;
    let quotes = synthetic_market(&spec)?;
    let funds = fixture_funds(&spec);
    header("demo", seed).write(&path("quotes.csv"), |w| write_quotes(w, &quotes))?;
    header("demo", seed).write(&path("funds.csv"), |w| write_funds(w, &funds))?;

    let market = market_days(&quotes, &spec.source.ticker, &spec.target.ticker);
    let first = &market[0];
    let report = calibrate_fund(&cfg, &first.source, &spec.source)?;
    header("calibrate", seed).json(&path("calibration.json"), &report)?;

    let tau_star: f64 = cfg.get("strategy.tau_star", 0.6);
    let slice_ttm = first
        .source
        .iter()
        .map(|q| q.ttm)
        .min_by(|a, b| (a - tau_star).abs().total_cmp(&(b - tau_star).abs()))
        .ok_or_else(|| CliError::runtime("no source quotes on the first day"))?;
    let carry = CarryTerms::new(spec.r, spec.source.carry_cost());
    let curve = condvar_curve(
        &cfg,
        &report.params,
        &carry,
        slice_ttm,
        cfg.get("condvar.paths", 20_000),
        cfg.get("condvar.bins", 30),
        stage("condvar"),
    )?;
    header("condvar", stage("condvar")).write(&path("condvar.csv"), |w| curve.write_csv(w))?;
    let scaled = scale_day(
        &cfg,
        &first.source,
        &funds,
        &spec.source.ticker,
        &spec.target.ticker,
        curve,
    )?;
    header("scale", seed).write(&path("scaled.csv"), |w| write_scaled(w, &scaled))?;

    // Target smile over the week of expiries around τ*.
    let mut band_cfg = cfg.clone();
    if !band_cfg.contains("bands.ttm_tol") {
        band_cfg.set("bands.ttm_tol", &(7.0 / 365.0).to_string())?;
    }
    let band = smile_band(&band_cfg, &first.target, tau_star, stage("bands"))?;
    header("bands", stage("bands")).write(&path("bands.csv"), |w| write_band(w, &band))?;

    let strategy = strategy_config(&cfg)?;
    let mut provider = provider(&cfg, &spec.source, stage("condvar"), Some(report.params))?;
    let w = strategy.window_w.min(market.len());
    let panels = window_panels(&market[..w], &spec.source, &spec.target, &mut provider, &strategy)?;
    header("dsfm", seed).write(&path("panels.csv"), |wr| dsfm::write_panels(wr, &panels.panels))?;
    let model = dsfm::fit(&panels.panels, strategy.l, &strategy.basis, &strategy.fit)?;
    header("dsfm", seed).json(&path("dsfm.json"), &model)?;
    header("dsfm", seed).write(&path("loadings.csv"), |wr| write_model_loadings(wr, &model))?;
    let z = DMatrix::from_fn(model.z.len(), model.l, |r, c| model.z[r][c + 1]);
    header("var", seed).json(&path("var.json"), &var_report(&cfg, &z, None)?)?;

    let ledger = run_backtest(&market, &spec.source, &spec.target, &mut provider, &strategy)?;
    warn_skips(&ledger);
    header("backtest", seed).write(&path("ledger.csv"), |wr| write_ledger(wr, &ledger))?;
    header("backtest", seed).json(&path("summary.json"), &ledger.summary())?;

    let boot = bootstrap_config(&cfg, stage("robustness"));
    let env = robustness(&market, &spec.source, &spec.target, &provider, &strategy, &boot)?;
    header("robustness", stage("robustness")).write(&path("envelope.csv"), |wr| write_envelope(wr, &env))?;
    println!("{}", dir.display());
    Ok(())
}
