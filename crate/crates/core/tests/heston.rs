use chrono::NaiveDate;
use letf_lab::heston::*;
use letf_lab::market_data::OptionQuote;
use num_complex::Complex64;
use proptest::prelude::*;

fn desk() -> HestonParams {
    HestonParams::new(2.0, 0.04, 0.3, 0.04, -0.5)
}

// Black-Scholes oracle written independently of the library.
fn bs_oracle(s: f64, k: f64, t: f64, r: f64, c: f64, vol: f64) -> f64 {
    let n = |x: f64| 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
    let sd = vol * t.sqrt();
    let d1 = ((s / k).ln() + (r - c + 0.5 * vol * vol) * t) / sd;
    s * (-c * t).exp() * n(d1) - k * (-r * t).exp() * n(d1 - sd)
}

#[test]
fn matches_high_precision_reference_prices() {
    // Values from a 30-digit evaluation of the original (non-rotated) form.
    let cases = [
        (
            HestonParams::new(2.0, 0.04, 0.3, 0.04, -0.5),
            100.0,
            100.0,
            1.0,
            0.02,
            0.01,
            8.09611705501641,
        ),
        (
            HestonParams::new(1.5, 0.06, 0.8, 0.03, -0.7),
            100.0,
            80.0,
            0.25,
            0.0,
            0.0,
            20.275677834398,
        ),
        (
            HestonParams::new(3.0, 0.09, 1.0, 0.12, -0.8),
            66.96,
            75.0,
            0.6,
            0.01,
            0.0134,
            2.18092587294505,
        ),
    ];
    for (p, s, k, t, r, c, want) in cases {
        let got = price_call(&p, &CarryTerms::new(r, c), s, k, t).unwrap();
        assert!((got - want).abs() < 1e-8, "got {got} want {want}");
    }
}

#[test]
fn degenerate_sigma_cf_is_lognormal() {
    let p = HestonParams::new(1.3, 0.04, 1e-8, 0.04, -0.4);
    let carry = CarryTerms::new(0.02, 0.005);
    let (s0, t) = (100.0f64, 0.8);
    for w in [0.3, 1.0, 4.0, 12.0] {
        let got = logprice_cf(Complex64::new(w, 0.0), &p, &carry, s0, t);
        let mean = s0.ln() + (carry.r - carry.c - 0.5 * 0.04) * t;
        let want = (Complex64::i() * w * mean - 0.5 * w * w * 0.04 * t).exp();
        assert!(((got - want) / want).norm() < 1e-4, "w={w}");
    }
}

#[test]
fn degenerate_sigma_prices_black_scholes() {
    let p = HestonParams::new(2.0, 0.04, 1e-8, 0.04, 0.0);
    let c = CarryTerms::default();
    let atm = price_call(&p, &c, 100.0, 100.0, 1.0).unwrap();
    assert!((atm / 7.9656 - 1.0).abs() < 1e-3);
    for t in [0.5, 1.0] {
        for m in [0.8, 1.0, 1.2] {
            let got = price_call(&p, &c, 100.0, 100.0 * m, t).unwrap();
            let want = bs_oracle(100.0, 100.0 * m, t, 0.0, 0.0, 0.2);
            assert!((got / want - 1.0).abs() < 1e-3, "m={m} t={t}");
            let iv = implied_vol_from_price(got, 100.0, 100.0 * m, t, &c).unwrap();
            assert!((iv - 0.2).abs() < 1e-3);
        }
    }
}

#[test]
fn deep_in_the_money_limit() {
    let carry = CarryTerms::new(0.02, 0.015);
    let px = price_call(&desk(), &carry, 100.0, 1e-6, 1.0).unwrap();
    assert!((px - 100.0 * (-0.015f64).exp()).abs() < 1e-4);
}

#[test]
fn mc_martingale_drift() {
    let carry = CarryTerms::new(0.03, 0.01);
    let paths = simulate_euler(&desk(), &carry, 100.0, 1.0, 50, 1_000_000, 99).unwrap();
    let n = paths.len() as f64;
    let m = paths.iter().map(|p| p.terminal_price).sum::<f64>() / n;
    let var = paths.iter().map(|p| (p.terminal_price - m).powi(2)).sum::<f64>() / (n - 1.0);
    let want = 100.0 * (0.02f64).exp();
    assert!((m - want).abs() < 3.0 * (var / n).sqrt(), "mean {m} vs {want}");
    assert!(paths
        .iter()
        .all(|p| p.integrated_variance >= 0.0 && p.terminal_variance >= 0.0));
}

#[test]
fn mc_prices_agree_with_fourier_prices() {
    let carry = CarryTerms::new(0.02, 0.0);
    let t = 0.5;
    let paths = simulate_euler(&desk(), &carry, 100.0, t, 125, 200_000, 5).unwrap();
    for k in [90.0, 100.0, 110.0] {
        let disc = (-carry.r * t).exp();
        let pay: Vec<f64> = paths.iter().map(|p| disc * (p.terminal_price - k).max(0.0)).collect();
        let n = pay.len() as f64;
        let m = pay.iter().sum::<f64>() / n;
        let se = (pay.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        let cf = price_call(&desk(), &carry, 100.0, k, t).unwrap();
        assert!((m - cf).abs() < 3.0 * se, "k={k}: mc {m} cf {cf} se {se}");
    }
}

fn synthetic_quotes(p: &HestonParams, carry: &CarryTerms) -> Vec<OptionQuote> {
    let d = NaiveDate::from_ymd_opt(2015, 6, 18).unwrap();
    let mut out = Vec::new();
    for &t in &[0.25, 0.5, 1.0] {
        for &k in &[80.0, 90.0, 95.0, 100.0, 105.0, 110.0, 120.0] {
            let px = price_call(p, carry, 100.0, k, t).unwrap();
            out.push(OptionQuote {
                obs_date: d,
                ticker: "SPY".into(),
                strike: k,
                expiry: d + chrono::Duration::days((t * 365.0) as i64),
                ttm: t,
                mid_price: px,
                implied_vol: implied_vol_from_price(px, 100.0, k, t, carry).unwrap(),
                underlying: 100.0,
                bid: None,
                ask: None,
                volume: None,
                delta: None,
            });
        }
    }
    out
}

#[test]
fn calibration_recovers_parameters() {
    let truth = HestonParams::new(2.0, 0.05, 0.4, 0.03, -0.6);
    let carry = CarryTerms::new(0.02, 0.01);
    let quotes = synthetic_quotes(&truth, &carry);
    let init = HestonParams::new(2.4, 0.04, 0.48, 0.036, -0.48);
    let rep = calibrate(&quotes, &carry, &init, &CalibrationSettings::default()).unwrap();
    assert!(rep.rmse < 1e-4, "rmse {}", rep.rmse);
    for (got, want) in rep.params.to_array().iter().zip(truth.to_array()) {
        assert!((got / want - 1.0).abs() < 0.05, "{:?}", rep.params);
    }
    assert!(rep.objective_history.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(rep.residuals.len(), quotes.len());
}

#[test]
fn calibration_at_truth_is_a_fixed_point() {
    let truth = desk();
    let carry = CarryTerms::default();
    let quotes = synthetic_quotes(&truth, &carry);
    let rep = calibrate(&quotes, &carry, &truth, &CalibrationSettings::default()).unwrap();
    assert!(rep.objective <= rep.initial_objective);
    assert!(rep.objective < 1e-18);
}

#[test]
fn calibration_needs_two_maturities() {
    let carry = CarryTerms::default();
    let quotes: Vec<_> = synthetic_quotes(&desk(), &carry)
        .into_iter()
        .filter(|q| q.ttm == 0.5)
        .collect();
    let err = calibrate(&quotes, &carry, &desk(), &CalibrationSettings::default()).unwrap_err();
    assert!(err.is_validation());
}

fn params_strategy() -> impl Strategy<Value = HestonParams> {
    (0.2f64..6.0, 0.01f64..0.2, 0.05f64..1.2, 0.01f64..0.2, -0.9f64..0.5)
        .prop_map(|(k, th, s, v, r)| HestonParams::new(k, th, s, v, r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prices_respect_bounds_monotonicity_and_convexity(
        p in params_strategy(),
        t in 0.1f64..2.0,
        r in 0.0f64..0.05,
        c in 0.0f64..0.02,
    ) {
        let carry = CarryTerms::new(r, c);
        let ks = [85.0, 90.0, 95.0, 100.0, 105.0, 110.0];
        let px: Vec<f64> = ks.iter().map(|&k| price_call(&p, &carry, 100.0, k, t).unwrap()).collect();
        for (i, &k) in ks.iter().enumerate() {
            let (lo, hi) = call_bounds(100.0, k, t, &carry);
            prop_assert!(px[i] >= lo && px[i] <= hi);
        }
        for w in px.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
        // Put price K e^{-rT} - S e^{-cT} + C is nondecreasing and convex in K.
        let put: Vec<f64> = ks.iter().zip(&px)
            .map(|(&k, &cp)| cp + k * (-r * t).exp() - 100.0 * (-c * t).exp())
            .collect();
        for w in put.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9);
        }
        for w in px.windows(3) {
            prop_assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-8);
        }
    }

    #[test]
    fn cf_modulus_bounded_on_real_axis(p in params_strategy(), w in -50.0f64..50.0, t in 0.05f64..3.0) {
        // Drift removed: r = c = 0 and S0 = 1.
        let v = logprice_cf(Complex64::new(w, 0.0), &p, &CarryTerms::default(), 1.0, t);
        prop_assert!(v.norm() <= 1.0 + 1e-12);
    }
}
