use letf_lab::msmooth::*;
use letf_lab::numerics::rng::substream;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn grid(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

fn cfg(kernel: Kernel, h: f64, c: f64) -> SmootherConfig {
    SmootherConfig {
        kernel,
        h,
        huber_c: c,
        eval_grid: grid(20),
        support_trim: 0.05,
    }
}

fn sine_sample(seed: u64, n: usize, sd: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = substream(seed, 0);
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let e = Normal::new(0.0, sd).unwrap();
    let y = x
        .iter()
        .map(|x| (2.0 * std::f64::consts::PI * x).sin() + e.sample(&mut rng))
        .collect();
    (x, y)
}

// Closed-form local linear least squares with Gaussian weights.
fn ls_oracle(x: &[f64], y: &[f64], x0: f64, h: f64) -> f64 {
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        let d = xi - x0;
        let w = (-0.5 * (d / h).powi(2)).exp();
        s0 += w;
        s1 += w * d;
        s2 += w * d * d;
        t0 += w * yi;
        t1 += w * d * yi;
    }
    (s2 * t0 - s1 * t1) / (s0 * s2 - s1 * s1)
}

#[test]
fn constant_data_gives_constant_fit() {
    let x = grid(30);
    let y = vec![0.27; x.len()];
    let f = fit_llm(&x, &y, &cfg(Kernel::Gaussian, 0.1, 0.05)).unwrap();
    assert!(f.values.iter().all(|v| (v - 0.27).abs() < 1e-12));
    assert!(f.residuals.iter().all(|r| r.abs() < 1e-12));
}

#[test]
fn gross_outlier_moves_huber_less_than_least_squares() {
    let x = grid(60);
    let clean: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, x)| 0.2 + 0.1 * x + 0.002 * ((i * 7 % 5) as f64 - 2.0))
        .collect();
    let mut y = clean.clone();
    y[30] += 5.0;
    let x0 = x[30];
    let h = 0.08;
    let base = ls_oracle(&x, &clean, x0, h);
    let ls = ls_oracle(&x, &y, x0, h);
    let hub = local_fit(&x, &y, x0, Kernel::Gaussian, h, 0.01, None);
    assert!(hub.converged);
    // Huber caps the outlier's pull at c times its weight.
    assert!(
        (hub.value - base).abs() < 0.1 * (ls - base).abs(),
        "{} {} {}",
        hub.value,
        ls,
        base
    );
    // With a huge constant the Huber fit is the least-squares fit.
    let wide = local_fit(&x, &y, x0, Kernel::Gaussian, h, 1e9, None);
    assert!((wide.value - ls).abs() < 1e-10);
}

#[test]
fn cv_ties_go_to_the_smallest_bandwidth() {
    let x = grid(40);
    let y: Vec<f64> = x.iter().map(|x| 1.0 - 0.5 * x).collect();
    let r = cv_bandwidth(&x, &y, Kernel::Gaussian, 0.1, &[0.3, 0.1, 0.2]).unwrap();
    assert!(r.scores.iter().all(|s| *s < 1e-24));
    assert_eq!(r.h, 0.1);
}

#[test]
fn cv_on_a_sine_is_finite_and_minimal() {
    let (x, y) = sine_sample(3, 150, 0.1);
    let hs: Vec<f64> = (0..8).map(|i| 0.02 + 0.01 * i as f64).collect();
    let r = cv_bandwidth(&x, &y, Kernel::Gaussian, 0.13, &hs).unwrap();
    assert!(r.scores.iter().all(|s| s.is_finite()));
    let min = r.scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let k = hs.iter().position(|h| *h == r.h).unwrap();
    assert_eq!(r.scores[k], min);
}

#[test]
fn cv_choice_is_within_a_step_of_the_fine_grid_optimum() {
    let (x, y) = sine_sample(11, 120, 0.1);
    let c = 0.13;
    // Leave-one-out by physically removing the point.
    let loo = |h: f64| -> f64 {
        (0..x.len())
            .map(|i| {
                let mut xs = x.clone();
                let mut ys = y.clone();
                xs.remove(i);
                ys.remove(i);
                huber_rho(y[i] - local_fit(&xs, &ys, x[i], Kernel::Gaussian, h, c, None).value, c)
            })
            .sum::<f64>()
    };
    let fine: Vec<f64> = (0..=60).map(|i| 0.015 + 0.001 * i as f64).collect();
    let scores: Vec<f64> = fine.iter().map(|h| loo(*h)).collect();
    let best = fine[(0..fine.len())
        .min_by(|a, b| scores[*a].total_cmp(&scores[*b]))
        .unwrap()];
    let coarse: Vec<f64> = (0..7).map(|i| 0.015 + 0.01 * i as f64).collect();
    let r = cv_bandwidth(&x, &y, Kernel::Gaussian, c, &coarse).unwrap();
    assert!((r.h - best).abs() <= 0.01 + 1e-12, "coarse {} fine {}", r.h, best);
}

#[test]
fn noise_free_line_gives_a_zero_width_band() {
    let x = grid(50);
    let y: Vec<f64> = x.iter().map(|x| 0.25 + 0.3 * x).collect();
    let c = huber_constant(&x, &y, Kernel::Quartic, 0.15).unwrap();
    let b = uniform_band(&x, &y, &cfg(Kernel::Quartic, 0.15, c), 0.25, 200, 0.05, 1).unwrap();
    assert!(b.degenerate);
    for k in 0..b.grid.len() {
        assert!(b.lower[k] <= b.fit[k] && b.fit[k] <= b.upper[k]);
        assert!(b.upper[k] - b.lower[k] < 1e-6);
    }
}

#[test]
fn band_is_deterministic_symmetric_and_nested_in_alpha() {
    let (x, y) = sine_sample(5, 150, 0.1);
    let c = huber_constant(&x, &y, Kernel::Quartic, 0.1).unwrap();
    let cf = cfg(Kernel::Quartic, 0.1, c);
    let g = oversmoothing_bandwidth(0.1, x.len());
    let a = uniform_band(&x, &y, &cf, g, 300, 0.05, 42).unwrap();
    let b = uniform_band(&x, &y, &cf, g, 300, 0.05, 42).unwrap();
    assert_eq!(a.lower, b.lower);
    assert_eq!(a.upper, b.upper);
    for k in 0..a.grid.len() {
        assert!(((a.upper[k] - a.fit[k]) - (a.fit[k] - a.lower[k])).abs() < 1e-12);
    }
    let wide = uniform_band(&x, &y, &cf, g, 300, 0.01, 42).unwrap();
    let narrow = uniform_band(&x, &y, &cf, g, 300, 0.10, 42).unwrap();
    assert!(wide.d_star >= a.d_star && a.d_star >= narrow.d_star);
    for k in 0..a.grid.len() {
        assert!(wide.lower[k] <= narrow.lower[k] && narrow.upper[k] <= wide.upper[k]);
    }
    // The band lives on the trimmed support.
    let (lo, hi) = trimmed_support(&x, 0.05);
    assert!(a.grid.iter().all(|g| *g >= lo && *g <= hi));
}

#[test]
fn band_preconditions() {
    let (x, y) = sine_sample(5, 60, 0.1);
    let cf = cfg(Kernel::Quartic, 0.1, 0.1);
    assert!(uniform_band(&x, &y, &cf, 0.1, 200, 0.05, 1)
        .unwrap_err()
        .is_validation());
    assert!(uniform_band(&x, &y, &cf, 0.2, 99, 0.05, 1).unwrap_err().is_validation());
    assert!(uniform_band(&x, &y, &cf, 0.2, 200, 0.5, 1).unwrap_err().is_validation());
    assert!(fit_llm(&x[..9], &y[..9], &cf).unwrap_err().is_validation());
}

#[test]
fn resampling_stays_inside_the_cluster() {
    let mut x: Vec<f64> = (0..20).map(|i| 0.01 * i as f64).collect();
    x.extend((0..20).map(|i| 10.0 + 0.01 * i as f64));
    let resid: Vec<f64> = (0..40)
        .map(|i| {
            if i < 20 {
                0.1 * (i as f64 - 9.5)
            } else {
                100.0 + i as f64
            }
        })
        .collect();
    for kernel in [Kernel::Gaussian, Kernel::Quartic] {
        let s = ConditionalResampler::new(&x, &resid, kernel, 0.5);
        for t in 0..20 {
            let w = s.weights(t);
            assert!(w[20..].iter().all(|v| *v < 1e-12));
        }
        let mut rng = substream(9, 0);
        for _ in 0..500 {
            // Cluster A residuals are below 1 in magnitude before centering.
            assert!(s.draw(3, &mut rng).abs() < 3.0);
        }
    }
}

#[test]
fn shifted_smiles_have_disjoint_bands() {
    let (x, y) = sine_sample(8, 150, 0.02);
    let lifted: Vec<f64> = y.iter().map(|v| v + 0.5).collect();
    let c = huber_constant(&x, &y, Kernel::Quartic, 0.1).unwrap();
    let cf = cfg(Kernel::Quartic, 0.1, c);
    let g = oversmoothing_bandwidth(0.1, x.len());
    let a = uniform_band(&x, &y, &cf, g, 200, 0.05, 1).unwrap();
    let b = uniform_band(&x, &lifted, &cf, g, 200, 0.05, 2).unwrap();
    let r = bands_disjoint(&a, &b).unwrap();
    assert!(r.disjoint);
    assert!(r.overlap.iter().all(|o| *o == 0.0));
    let mut other = b.clone();
    other.grid[0] += 0.01;
    assert!(bands_disjoint(&a, &other).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn centered_residuals_have_zero_local_mean(
        pts in prop::collection::vec((0.0f64..1.0, -1.0f64..1.0), 12..40),
        h in 0.05f64..0.5,
    ) {
        let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let e: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let s = ConditionalResampler::new(&x, &e, Kernel::Gaussian, h);
        for t in 0..x.len() {
            let w = s.weights(t);
            let m: f64 = w.iter().zip(&e).map(|(w, e)| w * (e - s.centers[t])).sum();
            prop_assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn local_fit_is_equivariant(
        shift in -5.0f64..5.0, scale in 0.1f64..10.0, seed in 0u64..1000,
    ) {
        let (x, y) = sine_sample(seed, 40, 0.2);
        let c = 0.15;
        let base = local_fit(&x, &y, 0.4, Kernel::Gaussian, 0.1, c, None).value;
        let moved: Vec<f64> = y.iter().map(|v| shift + scale * v).collect();
        let f = local_fit(&x, &moved, 0.4, Kernel::Gaussian, 0.1, c * scale, None).value;
        prop_assert!((f - (shift + scale * base)).abs() < 1e-8 * (1.0 + scale));
    }
}
