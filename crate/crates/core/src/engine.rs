//! Expectation-propagation iteration over Gaussian sites.
//!
//! Site 0 holds the prior and is never updated. Sites `1..=n` start flat, so
//! the initial global approximation is the prior. All three schedules run
//! through one block loop: sequential EP is block size 1, parallel EP is a
//! single block of `n + 1`, block-parallel EP is anything in between. The
//! global parameter is recomputed as the sum of sites at every block
//! boundary.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abc::AcceptanceRecord;
use crate::gauss::{self, GaussError, MomentParams, NaturalParams};
use crate::model::ModelSpec;
use crate::rng::{Purpose, StreamKey};

/// Order in which sites are updated within a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Sequential,
    Parallel,
    BlockParallel { n_core: usize },
}

impl Schedule {
    /// Number of consecutive site indices (counting the prior as index 0)
    /// that share one global snapshot.
    pub fn block_size(&self, n_sites: usize) -> usize {
        match *self {
            Schedule::Sequential => 1,
            Schedule::Parallel => n_sites + 1,
            Schedule::BlockParallel { n_core } => n_core.max(1),
        }
    }

    /// Blocks of site indices for one pass; the prior (index 0) occupies a
    /// slot in the first block but is never updated.
    pub fn blocks(&self, n_sites: usize) -> Vec<Vec<usize>> {
        let size = self.block_size(n_sites);
        let n_blocks = (n_sites + 1).div_ceil(size);
        (0..n_blocks)
            .map(|k| {
                let start = k * size;
                let end = ((k + 1) * size - 1).min(n_sites);
                (start.max(1)..=end).collect::<Vec<_>>()
            })
            .filter(|b| !b.is_empty())
            .collect()
    }

    pub fn label(&self) -> String {
        match self {
            Schedule::Sequential => "sequential".into(),
            Schedule::Parallel => "parallel".into(),
            Schedule::BlockParallel { n_core } => format!("block_parallel_{n_core}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("alpha must lie in (0, 1], got {0}")]
    Alpha(f64),
    #[error("min_accept must be positive")]
    MinAccept,
    #[error("max_passes must be positive")]
    MaxPasses,
    #[error("convergence_tol must be positive, got {0}")]
    Tolerance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdatePolicy {
    pub alpha: f64,
    pub min_accept: usize,
    pub max_passes: usize,
    pub convergence_tol: f64,
}

impl Default for UpdatePolicy {
    fn default() -> Self {
        Self { alpha: 1.0, min_accept: 10, max_passes: 10, convergence_tol: 1e-4 }
    }
}

impl UpdatePolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(PolicyError::Alpha(self.alpha));
        }
        if self.min_accept == 0 {
            return Err(PolicyError::MinAccept);
        }
        if self.max_passes == 0 {
            return Err(PolicyError::MaxPasses);
        }
        if !(self.convergence_tol > 0.0) {
            return Err(PolicyError::Tolerance(self.convergence_tol));
        }
        Ok(())
    }
}

/// Estimated moments of the hybrid (cavity × likelihood factor).
#[derive(Debug, Clone, PartialEq)]
pub struct HybridMomentEstimate {
    pub z_hat: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n_accepted: usize,
    /// Zero when the moments were computed analytically.
    pub n_simulated: usize,
    /// Summary distances of every simulated draw, when available.
    pub distances: Vec<f64>,
}

impl HybridMomentEstimate {
    pub fn exact(moments: &MomentParams) -> Self {
        Self {
            z_hat: 1.0,
            mean: moments.mean().clone(),
            cov: moments.cov().clone(),
            n_accepted: 0,
            n_simulated: 0,
            distances: Vec::new(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("only {} acceptances out of {} simulations", partial.n_accepted, partial.n_simulated)]
    InsufficientAcceptances { partial: Box<HybridMomentEstimate> },
    #[error("cavity is not positive definite")]
    CavityNotPositiveDefinite,
    #[error("all importance weights are zero")]
    DegenerateWeights,
    #[error("model is not iid; recycling unavailable")]
    NonIidModel,
    #[error("{0}")]
    Other(String),
}

/// Everything a moment estimator may need about the site being updated.
#[derive(Debug, Clone, Copy)]
pub struct SiteView<'a> {
    pub index: usize,
    pub site: &'a NaturalParams,
    pub global: &'a NaturalParams,
    pub cavity_natural: &'a NaturalParams,
    pub cavity: &'a MomentParams,
}

/// Provider of hybrid moments for a site update.
pub trait MomentEstimator: Sync {
    /// Called once per block, before any site in the block is estimated,
    /// with the global approximation the block will read.
    fn begin_block(&self, _model: &ModelSpec, _global: &NaturalParams, _key: StreamKey) -> Result<(), EstimateError> {
        Ok(())
    }

    fn estimate(&self, model: &ModelSpec, view: &SiteView<'_>, key: StreamKey)
        -> Result<HybridMomentEstimate, EstimateError>;
}

/// Exact hybrid moments when every likelihood factor is itself Gaussian in θ.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianSites {
    factors: Vec<NaturalParams>,
}

impl AnalyticGaussianSites {
    /// `factors[k]` is the natural parameter of factor `k + 1`.
    pub fn new(factors: Vec<NaturalParams>) -> Self {
        Self { factors }
    }

    pub fn exact_posterior(&self, prior: &NaturalParams) -> Result<MomentParams, GaussError> {
        self.factors.iter().fold(prior.clone(), |acc, f| acc.add(f)).to_moments()
    }
}

impl MomentEstimator for AnalyticGaussianSites {
    fn estimate(&self, _: &ModelSpec, view: &SiteView<'_>, _: StreamKey) -> Result<HybridMomentEstimate, EstimateError> {
        let hybrid = view.cavity_natural.add(&self.factors[view.index - 1]);
        let moments = hybrid.to_moments().map_err(|e| EstimateError::Other(e.to_string()))?;
        Ok(HybridMomentEstimate::exact(&moments))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkipReason {
    #[error("cavity not positive definite")]
    CavityNotPositiveDefinite,
    #[error("hybrid covariance or new precision not positive definite")]
    NotPositiveDefinite,
    #[error("{n_accepted} acceptances below minimum {min_accept}")]
    DegenerateEstimate { n_accepted: usize, min_accept: usize },
    #[error("estimator failed: {0}")]
    Estimator(String),
}

impl SkipReason {
    pub fn code(&self) -> &'static str {
        match self {
            SkipReason::CavityNotPositiveDefinite => "cavity_not_pd",
            SkipReason::NotPositiveDefinite => "not_pd",
            SkipReason::DegenerateEstimate { .. } => "degenerate_estimate",
            SkipReason::Estimator(_) => "estimator",
        }
    }
}

/// Sites plus their sum. `sites[0]` is the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct EpState {
    sites: Vec<NaturalParams>,
    global: NaturalParams,
}

impl EpState {
    /// Prior at site 0, `n` flat sites after it.
    pub fn new(prior: NaturalParams, n: usize) -> Self {
        let p = prior.dim();
        let mut sites = vec![prior.clone()];
        sites.extend((0..n).map(|_| NaturalParams::zeros(p)));
        Self { sites, global: prior }
    }

    pub fn from_sites(sites: Vec<NaturalParams>) -> Self {
        let global = sum_sites(&sites);
        Self { sites, global }
    }

    pub fn sites(&self) -> &[NaturalParams] {
        &self.sites
    }

    pub fn site(&self, i: usize) -> &NaturalParams {
        &self.sites[i]
    }

    pub fn global(&self) -> &NaturalParams {
        &self.global
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len() - 1
    }

    pub fn set_site(&mut self, i: usize, value: NaturalParams) {
        assert!(i >= 1, "the prior site is fixed");
        self.sites[i] = value;
    }

    pub fn set_global(&mut self, value: NaturalParams) {
        self.global = value;
    }

    pub fn refresh_global(&mut self) {
        self.global = sum_sites(&self.sites);
    }

    /// `‖global − Σ sites‖_∞`.
    pub fn sum_residual(&self) -> f64 {
        self.global.sub(&sum_sites(&self.sites)).max_abs()
    }
}

fn sum_sites(sites: &[NaturalParams]) -> NaturalParams {
    let mut acc = sites[0].clone();
    for s in &sites[1..] {
        acc = acc.add(s);
    }
    acc
}

/// One Gaussian site update, possibly fractional. Returns `(site_new, global_new)`.
pub fn site_update(
    i: usize,
    est: &HybridMomentEstimate,
    state: &EpState,
    policy: &UpdatePolicy,
) -> Result<(NaturalParams, NaturalParams), SkipReason> {
    assert!(i >= 1 && i <= state.n_sites(), "site index {i} out of range");
    if est.n_simulated > 0 && est.n_accepted < policy.min_accept {
        return Err(SkipReason::DegenerateEstimate { n_accepted: est.n_accepted, min_accept: policy.min_accept });
    }
    let hybrid = MomentParams::new(est.mean.clone(), est.cov.clone()).map_err(|_| SkipReason::NotPositiveDefinite)?;
    let matched = gauss::to_natural(&hybrid).map_err(|_| SkipReason::NotPositiveDefinite)?;
    let global = state.global();
    let step = matched.sub(global);
    let (site_new, global_new) = if policy.alpha == 1.0 {
        (state.site(i).add(&step), matched)
    } else {
        let a = policy.alpha;
        (state.site(i).add(&step.scale(a)), matched.scale(a).add(&global.scale(1.0 - a)))
    };
    if !global_new.is_positive_definite() {
        return Err(SkipReason::NotPositiveDefinite);
    }
    Ok((site_new, global_new))
}

/// Composite stopping rule on successive global approximations.
pub fn converged(prev: &NaturalParams, curr: &NaturalParams, tol: f64) -> bool {
    let rel = |num: f64, a: f64, b: f64| if num == 0.0 { 0.0 } else { num / a.max(b).max(1e-12) };
    let dr = rel((curr.r() - prev.r()).norm(), prev.r().norm(), curr.r().norm());
    let dq = rel((curr.q() - prev.q()).norm(), prev.q().norm(), curr.q().norm());
    let mut change = dr.max(dq);
    if let (Ok(a), Ok(b)) = (prev.to_moments(), curr.to_moments()) {
        let skl = gauss::kl_gaussian(&a, &b).unwrap_or(f64::INFINITY) + gauss::kl_gaussian(&b, &a).unwrap_or(f64::INFINITY);
        change = change.max(skl);
    }
    change < tol
}

/// One attempted site update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub pass: usize,
    pub site: usize,
    pub skipped: Option<SkipReason>,
    pub n_accepted: usize,
    pub n_simulated: usize,
    /// Global approximation after the block containing this update; `None`
    /// when the global precision was not positive definite.
    pub global: Option<MomentParams>,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxPassesExceeded,
    AllSitesSkipped,
}

#[derive(Debug, Clone)]
pub struct EpTrace {
    pub records: Vec<UpdateRecord>,
    pub state: EpState,
    pub termination: Termination,
    pub passes: usize,
    pub total_simulated: usize,
    /// Distances from the latest estimate of each site that reported them.
    pub acceptance: Vec<AcceptanceRecord>,
}

impl EpTrace {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    pub fn posterior(&self) -> Result<MomentParams, GaussError> {
        self.state.global().to_moments()
    }

    /// Global mean after each full pass, starting with the prior.
    pub fn pass_means(&self, prior: &NaturalParams) -> Vec<Option<DVector<f64>>> {
        let n = self.state.n_sites();
        let mut out = vec![prior.to_moments().ok().map(|m| m.mean().clone())];
        for chunk in self.records.chunks(n) {
            out.push(chunk.last().and_then(|r| r.global.as_ref()).map(|m| m.mean().clone()));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum EpError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("block-parallel schedule needs n_core >= 1")]
    Schedule,
    #[error("prior is not positive definite")]
    ImproperPrior,
}

/// Run EP on `model` with hybrid moments from `estimator`.
///
/// Randomness for the update of site `i` in pass `t` is keyed by
/// `(seed, t, i)`, so the result is independent of worker count.
pub fn run<E: MomentEstimator + ?Sized>(
    model: &ModelSpec,
    estimator: &E,
    schedule: Schedule,
    policy: &UpdatePolicy,
    seed: u64,
) -> Result<EpTrace, EpError> {
    policy.validate()?;
    if let Schedule::BlockParallel { n_core: 0 } = schedule {
        return Err(EpError::Schedule);
    }
    if !model.prior().is_positive_definite() {
        return Err(EpError::ImproperPrior);
    }
    let n = model.n_chunks();
    let mut state = EpState::new(model.prior().clone(), n);
    let blocks = schedule.blocks(n);
    let mut records = Vec::with_capacity(n * policy.max_passes);
    let mut latest: Vec<Option<AcceptanceRecord>> = vec![None; n + 1];
    let mut termination = Termination::MaxPassesExceeded;
    let mut passes = 0;

    for pass in 0..policy.max_passes {
        let pass_start = state.global().clone();
        let mut any_success = false;
        for block in &blocks {
            let snapshot = state.clone();
            let block_key = StreamKey::new(seed, pass, block[0], Purpose::SiteEstimate);
            let prepared = estimator.begin_block(model, snapshot.global(), block_key);
            let results: Vec<_> = block
                .par_iter()
                .map(|&i| {
                    let started = Instant::now();
                    let key = StreamKey::new(seed, pass, i, Purpose::SiteEstimate);
                    let outcome = match &prepared {
                        Ok(()) => attempt_site(model, estimator, &snapshot, i, policy, key),
                        Err(e) => Attempt::skipped(SkipReason::Estimator(e.to_string())),
                    };
                    (i, outcome, started.elapsed())
                })
                .collect();

            let first_record = records.len();
            for (i, outcome, elapsed) in results {
                if let Some(site_new) = outcome.site_new {
                    state.set_site(i, site_new);
                    any_success = true;
                }
                if let Some(rec) = outcome.acceptance {
                    latest[i] = Some(rec);
                }
                records.push(UpdateRecord {
                    pass,
                    site: i,
                    skipped: outcome.skipped,
                    n_accepted: outcome.n_accepted,
                    n_simulated: outcome.n_simulated,
                    global: None,
                    elapsed,
                });
            }
            state.refresh_global();
            let global_moments = state.global().to_moments().ok();
            for rec in &mut records[first_record..] {
                rec.global = global_moments.clone();
            }
        }
        passes = pass + 1;
        if !any_success {
            termination = Termination::AllSitesSkipped;
            break;
        }
        if converged(&pass_start, state.global(), policy.convergence_tol) {
            termination = Termination::Converged;
            break;
        }
    }

    let total_simulated = records.iter().map(|r| r.n_simulated).sum();
    Ok(EpTrace {
        records,
        state,
        termination,
        passes,
        total_simulated,
        acceptance: latest.into_iter().flatten().collect(),
    })
}

struct Attempt {
    site_new: Option<NaturalParams>,
    skipped: Option<SkipReason>,
    n_accepted: usize,
    n_simulated: usize,
    acceptance: Option<AcceptanceRecord>,
}

impl Attempt {
    fn skipped(reason: SkipReason) -> Self {
        Self { site_new: None, skipped: Some(reason), n_accepted: 0, n_simulated: 0, acceptance: None }
    }
}

fn attempt_site<E: MomentEstimator + ?Sized>(
    model: &ModelSpec,
    estimator: &E,
    snapshot: &EpState,
    i: usize,
    policy: &UpdatePolicy,
    key: StreamKey,
) -> Attempt {
    let cavity_natural = snapshot.global().sub(snapshot.site(i));
    let Ok(cavity) = cavity_natural.to_moments() else {
        return Attempt::skipped(SkipReason::CavityNotPositiveDefinite);
    };
    let view = SiteView {
        index: i,
        site: snapshot.site(i),
        global: snapshot.global(),
        cavity_natural: &cavity_natural,
        cavity: &cavity,
    };
    let est = match estimator.estimate(model, &view, key) {
        Ok(est) => est,
        // A short run may still carry enough acceptances for the policy.
        Err(EstimateError::InsufficientAcceptances { partial }) => *partial,
        Err(EstimateError::CavityNotPositiveDefinite) => {
            return Attempt::skipped(SkipReason::CavityNotPositiveDefinite)
        }
        Err(e) => return Attempt::skipped(SkipReason::Estimator(e.to_string())),
    };
    let acceptance = (!est.distances.is_empty()).then(|| AcceptanceRecord {
        site: i,
        distances: est.distances.clone(),
        n_simulated: est.n_simulated,
        n_accepted: est.n_accepted,
    });
    let (site_new, skipped) = match site_update(i, &est, snapshot, policy) {
        Ok((site_new, _)) => (Some(site_new), None),
        Err(reason) => (None, Some(reason)),
    };
    Attempt { site_new, skipped, n_accepted: est.n_accepted, n_simulated: est.n_simulated, acceptance }
}
