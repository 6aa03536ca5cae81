use std::path::PathBuf;

use epabc::bessel::ln_bessel_k;
use epabc::extremes::{correlation_distance_grid, whittle_matern};

fn fixture(name: &str) -> Vec<Vec<f64>> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name);
    std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split(',').map(|v| v.trim().parse().unwrap()).collect())
        .collect()
}

#[test]
fn bessel_k_matches_high_precision_reference() {
    let rows = fixture("besselk_reference.csv");
    assert_eq!(rows.len(), 100);
    let mut worst = 0.0_f64;
    for r in &rows {
        let (nu, x, reference) = (r[0], r[1], r[2]);
        // relative error of K itself
        let rel = (ln_bessel_k(nu, x) - reference).exp_m1().abs();
        assert!(rel < 1e-10, "nu={nu} x={x}: relative error {rel:e}");
        worst = worst.max(rel);
    }
    println!("worst relative error {worst:e}");
}

#[test]
fn matern_matches_high_precision_reference() {
    for r in fixture("matern_reference.csv") {
        let (h, nu, c, reference) = (r[0], r[1], r[2], r[3]);
        let got = whittle_matern(h, nu, c);
        assert!((got / reference - 1.0).abs() < 1e-10, "h={h} nu={nu} c={c}: {got} vs {reference}");
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (n - 1) as f64).exp()).collect()
}

#[test]
fn matern_bounded_and_decreasing_over_sweep() {
    let hs = log_grid(1e-8, 1e3, 60);
    for nu in log_grid(0.1, 20.0, 9) {
        for c in log_grid(0.1, 20.0, 7) {
            let mut prev = 1.0;
            for &h in &hs {
                let rho = whittle_matern(h, nu, c);
                assert!((0.0..=1.0).contains(&rho), "nu={nu} c={c} h={h}: {rho}");
                assert!(rho <= prev + 1e-12, "not decreasing at nu={nu} c={c} h={h}");
                prev = rho;
            }
        }
    }
}

#[test]
fn matern_tends_to_one_at_zero_lag() {
    for nu in [0.6, 1.0, 2.5, 8.0] {
        assert!((whittle_matern(1e-9, nu, 1.0) - 1.0).abs() < 1e-6, "nu={nu}");
    }
}

#[test]
fn exponential_identity_over_sweep() {
    let mut worst = 0.0_f64;
    for c in log_grid(0.1, 20.0, 7) {
        for z in log_grid(1e-6, 50.0, 200) {
            let rel = (whittle_matern(z * c, 0.5, c) / (-z).exp() - 1.0).abs();
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-8, "{worst:e}");
}

#[test]
fn grid_is_symmetric_in_reference() {
    let a = correlation_distance_grid(&[3.0], &[2.0], (8.0, 4.0), 30.0, 200)[(0, 0)];
    let b = correlation_distance_grid(&[8.0], &[4.0], (3.0, 2.0), 30.0, 200)[(0, 0)];
    assert!((a - b).abs() < 1e-13 * a.max(1.0));
}
