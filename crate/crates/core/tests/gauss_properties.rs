use epabc::gauss::{cavity, kl_gaussian, MomentParams, NaturalParams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Random SPD matrix `A Aᵗ + δI` of dimension `p`.
fn spd(p: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (prop::collection::vec(-2.0..2.0f64, p * p), 0.05..2.0f64).prop_map(move |(a, delta)| {
        let a = DMatrix::from_vec(p, p, a);
        &a * a.transpose() + DMatrix::identity(p, p) * delta
    })
}

fn moments_of_dim(p: usize) -> impl Strategy<Value = MomentParams> {
    (prop::collection::vec(-5.0..5.0f64, p), spd(p)).prop_map(|(m, s)| MomentParams::new(DVector::from_vec(m), s).unwrap())
}

fn moments() -> impl Strategy<Value = MomentParams> {
    (1usize..5).prop_flat_map(moments_of_dim)
}

fn moment_pair() -> impl Strategy<Value = (MomentParams, MomentParams)> {
    (1usize..5).prop_flat_map(|p| (moments_of_dim(p), moments_of_dim(p)))
}

fn rel_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).norm() <= tol * a.norm().max(b.norm()).max(1.0)
}

proptest! {
    #[test]
    fn natural_moment_round_trip(m in moments()) {
        let back = m.to_natural().unwrap().to_moments().unwrap();
        let cond = m.cov().norm() * m.to_natural().unwrap().q().norm();
        let tol = 1e-12 * cond.max(1.0);
        prop_assert!(rel_close(m.cov(), back.cov(), tol));
        prop_assert!((m.mean() - back.mean()).norm() <= tol * m.mean().norm().max(1.0));
    }

    #[test]
    fn cavity_then_add_recovers_global(m in moments(), shift in -1.0..1.0f64) {
        let global = m.to_natural().unwrap();
        let p = global.dim();
        let site = NaturalParams::new(DVector::from_element(p, shift), DMatrix::identity(p, p) * shift.abs() * 0.1).unwrap();
        let cav = cavity(&global, &site).unwrap();
        let back = cav.add(&site);
        prop_assert!((back.q() - global.q()).amax() <= 1e-12 * global.q().amax().max(1.0));
        prop_assert!((back.r() - global.r()).amax() <= 1e-12 * global.r().amax().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_diagonal((a, b) in moment_pair()) {
        prop_assert!(kl_gaussian(&a, &b).unwrap() >= 0.0);
        prop_assert!(kl_gaussian(&a, &a).unwrap().abs() < 1e-9);
    }
}
