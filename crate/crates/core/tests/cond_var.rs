use letf_lab::cond_var::*;
use letf_lab::heston::{simulate_euler, CarryTerms, HestonParams, PathSample};
use letf_lab::numerics::quad::{integrate, AdaptiveSettings};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn desk() -> HestonParams {
    HestonParams::new(2.0, 0.04, 0.3, 0.04, -0.5)
}

fn tight() -> AdaptiveSettings {
    AdaptiveSettings {
        abs_tol: 1e-11,
        rel_tol: 0.0,
        max_intervals: 4000,
    }
}

#[test]
fn chi2_density_normalizes_and_has_the_right_mean() {
    let mass = integrate(|x| noncentral_chi2_pdf(x, 3.0, 5.0), 0.0, 200.0, tight(), "mass").unwrap();
    assert!((mass.value - 1.0).abs() < 1e-6);
    let mean = integrate(|x| x * noncentral_chi2_pdf(x, 2.0, 1.0), 0.0, 200.0, tight(), "mean").unwrap();
    assert!((mean.value - 3.0).abs() < 1e-4);
}

#[test]
fn chi2_density_matches_poisson_mixture() {
    // Independent oracle: Poisson(λ/2) mixture of central chi-squared laws.
    let central = |x: f64, k: f64| {
        ((k / 2.0 - 1.0) * x.ln() - x / 2.0 - (k / 2.0) * 2f64.ln() - statrs::function::gamma::ln_gamma(k / 2.0)).exp()
    };
    for &(x, d, l) in &[(0.7, 3.0, 5.0), (4.0, 1.5, 2.0), (12.0, 6.0, 9.0)] {
        let mut s = 0.0;
        let mut w = (-l / 2.0f64).exp();
        for j in 0..200 {
            if j > 0 {
                w *= l / 2.0 / j as f64;
            }
            s += w * central(x, d + 2.0 * j as f64);
        }
        assert!((noncentral_chi2_pdf(x, d, l) / s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn transition_density_normalizes() {
    let p = desk();
    let mass = transition_mass(0.04, &p, 1.0, 2.0).unwrap();
    assert!((mass - 1.0).abs() < 1e-5, "{mass}");
}

#[test]
fn transition_density_is_a_scaled_chi2() {
    let p = desk();
    for &t in &[0.25, 1.0, 3.0] {
        let (scale, dof, lambda) = transition_chi2_parameters(0.04, &p, t);
        for &v in &[0.005, 0.02, 0.04, 0.09, 0.2] {
            let direct = variance_transition_pdf(v, 0.04, &p, t);
            let via = noncentral_chi2_pdf(v / scale, dof, lambda) / scale;
            assert!((direct / via - 1.0).abs() < 1e-8, "t={t} v={v}");
        }
    }
}

#[test]
fn transition_density_matches_euler_histogram() {
    let p = desk();
    let t = 1.0;
    let n = 1_000_000;
    let paths = simulate_euler(&p, &CarryTerms::default(), 100.0, t, 1000, n, 17).unwrap();
    let edges: Vec<f64> = (0..=20).map(|k| 0.005 * k as f64).collect();
    let mut counts = vec![0usize; edges.len() - 1];
    for s in &paths {
        let v = s.terminal_variance;
        if v > edges[0] && v <= *edges.last().unwrap() {
            let k = ((v / 0.005).ceil() as usize).clamp(1, counts.len()) - 1;
            counts[k] += 1;
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        let prob = integrate(
            |v| variance_transition_pdf(v, 0.04, &p, t),
            edges[k],
            edges[k + 1],
            tight(),
            "bin",
        )
        .unwrap()
        .value;
        let se = (prob * (1.0 - prob) / n as f64).sqrt();
        let freq = c as f64 / n as f64;
        assert!((freq - prob).abs() < 3.0 * se, "bin {k}: {freq} vs {prob} (se {se})");
    }
}

#[test]
fn endpoint_density_mean_matches_conditional_mc() {
    let p = desk();
    let t = 0.5;
    let paths = simulate_euler(&p, &CarryTerms::default(), 100.0, t, 200, 400_000, 23).unwrap();
    let (lo, hi) = (0.038, 0.042);
    let sel: Vec<&PathSample> = paths
        .iter()
        .filter(|s| s.terminal_variance > lo && s.terminal_variance <= hi)
        .collect();
    assert!(sel.len() > 2000);
    let mc = sel.iter().map(|s| s.integrated_variance).sum::<f64>() / sel.len() as f64;
    let dens = integrated_var_density_given_endpoints(0.04, 0.04, &p, t, &AnalyticSettings::default()).unwrap();
    assert!((dens.mass() - 1.0).abs() < 1e-6, "mass {}", dens.mass());
    assert!(
        (dens.mean() / mc - 1.0).abs() < 0.05,
        "analytic {} mc {mc}",
        dens.mean()
    );
}

#[test]
fn analytic_matches_mc_binning_at_the_money() {
    let p = desk();
    let carry = CarryTerms::default();
    let t = 0.5;
    let res = analytic_conditional_iv(0.0, &p, &carry, 100.0, t, &AnalyticSettings::default()).unwrap();
    assert!(
        (res.normalization - 1.0).abs() < 1e-3,
        "normalization {}",
        res.normalization
    );
    let paths = simulate_euler(&p, &carry, 100.0, t, 126, 200_000, 41).unwrap();
    // Centers 0.7 .. 1.3 in price, so the middle bin sits at lm = 0.
    let grid = price_equidistant_grid(0.7f64.ln(), 1.3f64.ln(), 41);
    let curve = mc_conditional_iv(&paths, 100.0, t, &grid).unwrap();
    let mid = grid.len() / 2;
    assert!(grid[mid].abs() < 1e-12);
    let mc = curve.values[mid].unwrap();
    assert!((res.value / mc - 1.0).abs() < 0.05, "analytic {} mc {mc}", res.value);
}

#[test]
fn analytic_degenerate_limit() {
    let p = HestonParams::new(2.0, 0.04, 1e-6, 0.04, -0.5);
    let r = analytic_conditional_iv(
        0.0,
        &p,
        &CarryTerms::default(),
        100.0,
        0.5,
        &AnalyticSettings::default(),
    )
    .unwrap();
    assert!((r.value - 0.02).abs() < 1e-3);
}

#[test]
fn deterministic_variance_curve() {
    let p = HestonParams::new(2.0, 0.04, 0.0, 0.04, 0.0);
    let paths = simulate_euler(&p, &CarryTerms::default(), 100.0, 0.5, 50, 20_000, 3).unwrap();
    let curve = mc_conditional_iv(&paths, 100.0, 0.5, &default_grid(&paths, 100.0, 21)).unwrap();
    for v in curve.values.iter().flatten() {
        assert!((v - 0.02).abs() < 1e-15);
    }
}

#[test]
fn merged_bins_give_the_count_weighted_mean() {
    let paths = simulate_euler(&desk(), &CarryTerms::default(), 100.0, 0.5, 50, 50_000, 8).unwrap();
    let fine = price_equidistant_grid(-0.2, 0.2, 10);
    let curve = mc_conditional_iv(&paths, 100.0, 0.5, &fine).unwrap();
    // Pairs (0,1), (2,3), ... of the fine grid form the coarse grid.
    let centers: Vec<f64> = fine.iter().map(|x| x.exp()).collect();
    let coarse: Vec<f64> = centers.chunks(2).map(|c| (0.5 * (c[0] + c[1])).ln()).collect();
    let merged = mc_conditional_iv(&paths, 100.0, 0.5, &coarse).unwrap();
    for k in 0..5 {
        let (a, b) = (2 * k, 2 * k + 1);
        let n = curve.bin_counts[a] + curve.bin_counts[b];
        assert_eq!(merged.bin_counts[k], n);
        let want = (curve.values[a].unwrap_or(0.0) * curve.bin_counts[a] as f64
            + curve.values[b].unwrap_or(0.0) * curve.bin_counts[b] as f64)
            / n as f64;
        assert!((merged.values[k].unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn binning_ignores_path_order() {
    let mut paths = simulate_euler(&desk(), &CarryTerms::default(), 100.0, 0.5, 20, 20_000, 9).unwrap();
    let grid = price_equidistant_grid(-0.3, 0.3, 15);
    let a = mc_conditional_iv(&paths, 100.0, 0.5, &grid).unwrap();
    paths.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
    let b = mc_conditional_iv(&paths, 100.0, 0.5, &grid).unwrap();
    assert_eq!(a.bin_counts, b.bin_counts);
    for (x, y) in a.values.iter().zip(&b.values) {
        match (x, y) {
            (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-14 * x.abs()),
            (None, None) => {}
            _ => panic!("emptiness differs"),
        }
    }
}

#[test]
fn uncorrelated_curve_is_symmetric_about_the_drift() {
    let p = HestonParams::new(2.0, 0.04, 0.4, 0.04, 0.0);
    let carry = CarryTerms::new(0.03, 0.01);
    let t = 0.5;
    let paths = simulate_euler(&p, &carry, 100.0, t, 100, 400_000, 77).unwrap();
    let center = (carry.r - carry.c) * t;
    for x in [0.05, 0.1, 0.15] {
        let side = |lm: f64| {
            let g = price_equidistant_grid(lm - 0.01, lm + 0.01, 3);
            let c = mc_conditional_iv(&paths, 100.0, t, &g).unwrap();
            let sel: Vec<f64> = paths
                .iter()
                .filter(|s| {
                    let e = (s.terminal_price / 100.0).ln();
                    e > lm - 0.005 && e <= lm + 0.005
                })
                .map(|s| s.integrated_variance)
                .collect();
            let m = sel.iter().sum::<f64>() / sel.len() as f64;
            let v = sel.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (sel.len() as f64 - 1.0);
            (c.values[1].unwrap(), v / c.bin_counts[1] as f64)
        };
        let (up, se_up) = side(center + x);
        let (dn, se_dn) = side(center - x);
        assert!((up - dn).abs() < 3.0 * (se_up + se_dn).sqrt(), "x={x}: {up} vs {dn}");
    }
}

#[test]
fn smoothed_curve_is_smile_shaped() {
    let p = desk();
    let paths = simulate_euler(&p, &CarryTerms::default(), 100.0, 0.5, 126, 200_000, 13).unwrap();
    let curve = mc_conditional_iv(&paths, 100.0, 0.5, &default_grid(&paths, 100.0, 41)).unwrap();
    let pts = curve.nonempty();
    let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let fit = polyfit(&x, &y, 2).unwrap();
    assert!(fit.coefficients[2] > 0.0, "{:?}", fit.coefficients);
    let smooth = smooth_curve(&curve, 2).unwrap();
    assert!(smooth.values.iter().flatten().all(|v| *v >= 0.0));
}

#[test]
fn polyfit_recovers_noisy_quadratic_within_standard_errors() {
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 1e-4).unwrap();
    let truth = [0.02, -0.01, 0.3];
    let x: Vec<f64> = (0..41).map(|k| -0.4 + 0.02 * k as f64).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|x| truth[0] + truth[1] * x + truth[2] * x * x + noise.sample(&mut rng))
        .collect();
    let fit = polyfit(&x, &y, 2).unwrap();
    for j in 0..3 {
        assert!((fit.coefficients[j] - truth[j]).abs() < 3.0 * fit.standard_errors[j]);
    }
}

#[test]
fn log_price_is_conditionally_normal_with_the_stated_mean() {
    let p = desk();
    let carry = CarryTerms::new(0.02, 0.0);
    let t = 0.5;
    let paths = simulate_euler(&p, &carry, 100.0, t, 250, 200_000, 31).unwrap();
    let n = paths.len();
    let x = DMatrix::from_fn(n, 2, |i, j| {
        let s = &paths[i];
        if j == 0 {
            s.integrated_variance
        } else {
            s.terminal_variance - p.v0 - p.kappa * p.theta * t
        }
    });
    let y = DVector::from_fn(n, |i, _| (paths[i].terminal_price / 100.0).ln() - carry.r * t);
    let beta = letf_lab::numerics::least_squares(&x, &y).unwrap();
    let e = &y - &x * &beta;
    // Heteroskedasticity-robust covariance.
    let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
    let mut meat = DMatrix::zeros(2, 2);
    for i in 0..n {
        let row = x.row(i);
        meat += row.transpose() * row * (e[i] * e[i]);
    }
    let cov = &xtx_inv * meat * &xtx_inv;
    let want = [-0.5 + p.kappa * p.rho / p.sigma, p.rho / p.sigma];
    for j in 0..2 {
        let se = cov[(j, j)].sqrt();
        assert!(
            (beta[j] - want[j]).abs() < 3.0 * se,
            "coef {j}: {} vs {} (se {se})",
            beta[j],
            want[j]
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn endpoint_cf_is_bounded(w in -200.0f64..200.0, v0 in 0.005f64..0.2, vt in 0.005f64..0.2) {
        let p = desk();
        let phi = integrated_var_cf_given_endpoints(w, v0, vt, &p, 0.5).unwrap();
        prop_assert!(phi.norm() <= 1.0 + 1e-9);
        let back = integrated_var_cf_given_endpoints(-w, v0, vt, &p, 0.5).unwrap();
        prop_assert!((phi - back.conj()).norm() < 1e-10);
    }
}
