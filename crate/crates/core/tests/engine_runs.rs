use epabc::abc::{AbcConfig, RejectionAbc};
use epabc::engine::{
    run, AnalyticGaussianSites, EpTrace, EstimateError, HybridMomentEstimate, MomentEstimator, Schedule, SiteView,
    SkipReason, Termination, UpdatePolicy, UpdateRecord,
};
use epabc::gauss::{MomentParams, NaturalParams};
use epabc::model::{Ar1, GaussMean, ModelSpec};
use epabc::rng::StreamKey;
use nalgebra::{DMatrix, DVector};

fn ar1_model(n: usize) -> ModelSpec {
    Ar1::new(MomentParams::standard(2), Ar1::synthetic(n, 0.5, 1.0, 4)).model().unwrap()
}

fn key_fields(r: &UpdateRecord) -> impl PartialEq + std::fmt::Debug + '_ {
    (r.pass, r.site, &r.skipped, r.n_accepted, r.n_simulated, &r.global)
}

fn assert_same_trace(a: &EpTrace, b: &EpTrace) {
    assert_eq!(a.records.len(), b.records.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(key_fields(x), key_fields(y));
    }
    assert_eq!(a.state, b.state);
    assert_eq!(a.termination, b.termination);
}

fn abc() -> RejectionAbc {
    RejectionAbc::new(AbcConfig::new(0.3, 60, 200_000))
}

fn short_policy() -> UpdatePolicy {
    UpdatePolicy { max_passes: 3, ..Default::default() }
}

#[test]
fn schedule_degeneracies_are_trace_identical() {
    let model = ar1_model(7);
    let seq = run(&model, &abc(), Schedule::Sequential, &short_policy(), 9).unwrap();
    let bp1 = run(&model, &abc(), Schedule::BlockParallel { n_core: 1 }, &short_policy(), 9).unwrap();
    assert_same_trace(&seq, &bp1);
    let par = run(&model, &abc(), Schedule::Parallel, &short_policy(), 9).unwrap();
    let bpn = run(&model, &abc(), Schedule::BlockParallel { n_core: 8 }, &short_policy(), 9).unwrap();
    assert_same_trace(&par, &bpn);
    // a block larger than n + 1 is the same single block
    let bp_big = run(&model, &abc(), Schedule::BlockParallel { n_core: 50 }, &short_policy(), 9).unwrap();
    assert_same_trace(&par, &bp_big);
}

#[test]
fn global_is_sum_of_sites_and_prior_is_untouched() {
    let model = ar1_model(6);
    for schedule in [Schedule::Sequential, Schedule::Parallel, Schedule::BlockParallel { n_core: 3 }] {
        let t = run(&model, &abc(), schedule, &short_policy(), 2).unwrap();
        assert!(t.state.sum_residual() <= 1e-12 * t.state.global().max_abs().max(1.0));
        assert_eq!(t.state.site(0), model.prior());
        assert_eq!(t.records.len(), t.passes * 6);
        assert_eq!(t.total_simulated, t.records.iter().map(|r| r.n_simulated).sum::<usize>());
    }
}

#[test]
fn result_does_not_depend_on_worker_count() {
    let model = ar1_model(5);
    let go = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run(&model, &abc(), Schedule::BlockParallel { n_core: 3 }, &short_policy(), 5).unwrap())
    };
    assert_same_trace(&go(1), &go(3));
}

#[test]
fn parallel_exact_sites_converge_in_one_pass() {
    let obs = vec![0.3, -1.2, 2.0, 0.7];
    let gm = GaussMean::new(0.5, 2.0, obs.clone());
    let model = gm.model().unwrap();
    let factors = obs.iter().map(|&y| NaturalParams::from_slices(&[y], &[1.0]).unwrap()).collect();
    let est = AnalyticGaussianSites::new(factors);
    let policy = UpdatePolicy { max_passes: 5, convergence_tol: 1e-10, ..Default::default() };
    let t = run(&model, &est, Schedule::Parallel, &policy, 0).unwrap();
    let post = t.posterior().unwrap();
    let exact = gm.exact_posterior();
    assert!((post.mean()[0] - exact.mean()[0]).abs() < 1e-12);
    assert!((post.cov()[(0, 0)] - exact.cov()[(0, 0)]).abs() < 1e-12);
    assert_eq!(t.termination, Termination::Converged);
    assert_eq!(t.passes, 2);
}

/// Returns a hybrid with an indefinite covariance for every site.
struct Broken;

impl MomentEstimator for Broken {
    fn estimate(&self, _: &ModelSpec, v: &SiteView<'_>, _: StreamKey) -> Result<HybridMomentEstimate, EstimateError> {
        let p = v.cavity.dim();
        Ok(HybridMomentEstimate {
            z_hat: 1.0,
            mean: DVector::zeros(p),
            cov: -DMatrix::identity(p, p),
            n_accepted: 100,
            n_simulated: 100,
            distances: vec![],
        })
    }
}

#[test]
fn failed_updates_leave_state_unchanged() {
    let model = ar1_model(4);
    let t = run(&model, &Broken, Schedule::Sequential, &short_policy(), 0).unwrap();
    assert_eq!(t.termination, Termination::AllSitesSkipped);
    assert_eq!(t.passes, 1);
    assert!(t.records.iter().all(|r| r.skipped == Some(SkipReason::NotPositiveDefinite)));
    assert_eq!(t.state.global(), model.prior());
    assert!(t.state.sites()[1..].iter().all(|s| s.max_abs() == 0.0));
}

#[test]
fn hopeless_tolerance_skips_with_degenerate_estimate() {
    let model = GaussMean::new(0.0, 1.0, vec![40.0, 41.0]).model().unwrap();
    let est = RejectionAbc::new(AbcConfig::new(1e-3, 50, 3000));
    let t = run(&model, &est, Schedule::Sequential, &short_policy(), 0).unwrap();
    assert_eq!(t.termination, Termination::AllSitesSkipped);
    for r in &t.records {
        assert!(matches!(r.skipped, Some(SkipReason::DegenerateEstimate { .. })), "{:?}", r.skipped);
        assert_eq!(r.n_simulated, 3000);
    }
    assert_eq!(t.state.global(), model.prior());
}

#[test]
fn invalid_policies_are_rejected() {
    let model = ar1_model(3);
    let bad = UpdatePolicy { alpha: 0.0, ..Default::default() };
    assert!(run(&model, &abc(), Schedule::Sequential, &bad, 0).is_err());
    assert!(run(&model, &abc(), Schedule::BlockParallel { n_core: 0 }, &short_policy(), 0).is_err());
}
