//! Monte Carlo hybrid-moment estimators.
//!
//! [`RejectionAbc`] runs a local rejection-ABC problem per site: proposals
//! come from the cavity, one chunk is simulated per proposal, and draws whose
//! summary lands within `epsilon` of the observed summary are kept.
//! [`RecyclingEstimator`] serves IID models from a single shared pool of
//! `(θ, summary)` pairs, reweighted per site by importance sampling.

use std::sync::{Mutex, RwLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::engine::{EpState, EstimateError, HybridMomentEstimate, MomentEstimator, SiteView};
use crate::gauss::{cholesky, GaussError, MomentParams, NaturalParams};
use crate::model::ModelSpec;
use crate::rng::{Purpose, StreamKey};

/// Draws simulated per round of the adaptive sampler.
pub const BATCH_SIZE: usize = 1024;
/// Leading Halton points skipped by the estimators.
pub const HALTON_BURN_IN: u64 = 64;
/// Default ESS fraction below which a recycling pool is regenerated.
pub const DEFAULT_ESS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AbcError {
    #[error("no acceptance records")]
    EmptyRecords,
    #[error("site {site}: {have} recorded distances cannot reach fraction {floor} of {n_simulated} simulations")]
    TooFewDistances { site: usize, have: usize, n_simulated: usize, floor: f64 },
    #[error("floor must lie in (0, 1), got {0}")]
    Floor(f64),
    #[error("invalid ABC configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gauss(#[from] GaussError),
}

/// Weighted Euclidean norm on summary differences.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Distance {
    /// Per-component weights; empty means all ones.
    pub weights: Vec<f64>,
}

impl Distance {
    pub fn between(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a
            .iter()
            .zip(b)
            .enumerate()
            .map(|(k, (x, y))| self.weights.get(k).copied().unwrap_or(1.0) * (x - y).powi(2))
            .sum();
        sq.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbcConfig {
    pub epsilon: f64,
    pub m_target: usize,
    pub m_max: usize,
    pub use_qmc: bool,
    pub distance: Distance,
}

impl AbcConfig {
    pub fn new(epsilon: f64, m_target: usize, m_max: usize) -> Self {
        Self { epsilon, m_target, m_max, use_qmc: false, distance: Distance::default() }
    }

    pub fn with_qmc(mut self, use_qmc: bool) -> Self {
        self.use_qmc = use_qmc;
        self
    }

    pub fn validate(&self) -> Result<(), AbcError> {
        if !(self.epsilon > 0.0) {
            return Err(AbcError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.m_target == 0 || self.m_max == 0 {
            return Err(AbcError::Config("m_target and m_max must be positive".into()));
        }
        if self.m_target > self.m_max {
            return Err(AbcError::Config(format!("m_target {} exceeds m_max {}", self.m_target, self.m_max)));
        }
        if self.distance.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(AbcError::Config("distance weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Realized summary distances of one site's simulations.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptanceRecord {
    pub site: usize,
    pub distances: Vec<f64>,
    pub n_simulated: usize,
    pub n_accepted: usize,
}

// ---------------------------------------------------------------------------
// Quasi-Monte Carlo

fn first_primes(count: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(count);
    let mut candidate = 2u64;
    while primes.len() < count {
        if primes.iter().take_while(|&&p| p * p <= candidate).all(|&p| candidate % p != 0) {
            primes.push(candidate);
        }
        candidate += 1;
    }
    primes
}

/// Radical inverse of `index` in `base` (the `index`-th Halton coordinate).
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv_base = 1.0 / base as f64;
    let mut factor = inv_base;
    let mut value = 0.0;
    while index > 0 {
        value += (index % base) as f64 * factor;
        index /= base;
        factor *= inv_base;
    }
    value
}

/// Halton point number `index` (1-based) in `dim` dimensions, bases 2, 3, 5, ….
pub fn halton_point(index: u64, dim: usize) -> Vec<f64> {
    first_primes(dim).into_iter().map(|b| radical_inverse(index, b)).collect()
}

/// Standard-normal quantile.
pub fn normal_quantile(u: f64) -> f64 {
    Normal::standard().inverse_cdf(u)
}

/// `count` points `μ + L Φ⁻¹(u)` for consecutive Halton points `u`, after
/// skipping the first `stream_offset` points. Rows are points.
pub fn qmc_gaussian_stream(count: usize, target: &MomentParams, stream_offset: u64) -> DMatrix<f64> {
    let p = target.dim();
    let l = target.cholesky_factor();
    let primes = first_primes(p);
    let mut out = DMatrix::zeros(count, p);
    for m in 0..count {
        let index = stream_offset + m as u64 + 1;
        let z = DVector::from_iterator(p, primes.iter().map(|&b| normal_quantile(radical_inverse(index, b))));
        let theta = target.mean() + &l * z;
        out.row_mut(m).copy_from(&theta.transpose());
    }
    out
}

// ---------------------------------------------------------------------------
// Local rejection ABC

/// Proposal generator for draw number `draw`; also returns the generator
/// the simulator continues with.
struct Proposal<'a> {
    mean: &'a DVector<f64>,
    chol: DMatrix<f64>,
    primes: Vec<u64>,
    use_qmc: bool,
}

impl<'a> Proposal<'a> {
    fn new(target: &'a MomentParams, use_qmc: bool) -> Self {
        Self { mean: target.mean(), chol: target.cholesky_factor(), primes: first_primes(target.dim()), use_qmc }
    }

    fn draw(&self, key: &StreamKey, draw: u64) -> (DVector<f64>, ChaCha8Rng) {
        let mut rng = key.draw_rng(draw);
        let p = self.mean.len();
        let z = if self.use_qmc {
            let index = HALTON_BURN_IN + draw + 1;
            DVector::from_iterator(p, self.primes.iter().map(|&b| normal_quantile(radical_inverse(index, b))))
        } else {
            DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)))
        };
        (self.mean + &self.chol * z, rng)
    }
}

/// Simulate draws `start..end` for `site`; `None` marks a failed simulation.
fn simulate_range(
    model: &ModelSpec,
    site: usize,
    proposal: &Proposal<'_>,
    distance: &Distance,
    key: &StreamKey,
    start: usize,
    end: usize,
) -> Vec<(DVector<f64>, Option<f64>)> {
    let observed = model.observed_summary(site);
    (start..end)
        .into_par_iter()
        .map(|draw| {
            let (theta, mut rng) = proposal.draw(key, draw as u64);
            let d = model
                .simulate_chunk(site, theta.as_slice(), &mut rng)
                .ok()
                .map(|c| distance.between(&c.summary, observed.as_slice()));
            (theta, d)
        })
        .collect()
}

fn weighted_moments(thetas: &[&DVector<f64>], weights: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let p = thetas[0].len();
    let total: f64 = weights.iter().sum();
    let mut mean = DVector::zeros(p);
    for (t, w) in thetas.iter().zip(weights) {
        mean.axpy(*w / total, t, 1.0);
    }
    let mut cov = DMatrix::zeros(p, p);
    for (t, w) in thetas.iter().zip(weights) {
        let d = *t - &mean;
        cov.ger(*w / total, &d, &d, 1.0);
    }
    (mean, cov)
}

/// Mean and (divide-by-count) covariance of accepted draws.
fn accepted_moments(accepted: &[DVector<f64>], p: usize) -> (DVector<f64>, DMatrix<f64>) {
    if accepted.is_empty() {
        return (DVector::from_element(p, f64::NAN), DMatrix::from_element(p, p, f64::NAN));
    }
    let refs: Vec<&DVector<f64>> = accepted.iter().collect();
    weighted_moments(&refs, &vec![1.0; accepted.len()])
}

fn rejection_estimate(
    site: usize,
    cavity: &MomentParams,
    model: &ModelSpec,
    cfg: &AbcConfig,
    key: StreamKey,
    m_target: usize,
    m_max: usize,
) -> (HybridMomentEstimate, bool) {
    let proposal = Proposal::new(cavity, cfg.use_qmc);
    let mut accepted = Vec::new();
    let mut distances = Vec::new();
    let mut n_simulated = 0;
    while accepted.len() < m_target && n_simulated < m_max {
        let end = (n_simulated + BATCH_SIZE).min(m_max);
        for (theta, d) in simulate_range(model, site, &proposal, &cfg.distance, &key, n_simulated, end) {
            if let Some(d) = d {
                if d <= cfg.epsilon {
                    accepted.push(theta);
                }
                distances.push(d);
            }
        }
        n_simulated = end;
    }
    let (mean, cov) = accepted_moments(&accepted, cavity.dim());
    let reached = accepted.len() >= m_target;
    let est = HybridMomentEstimate {
        z_hat: accepted.len() as f64 / n_simulated as f64,
        mean,
        cov,
        n_accepted: accepted.len(),
        n_simulated,
        distances,
    };
    (est, reached)
}

/// Adaptive local rejection ABC for one site: simulate in batches from the
/// cavity until `m_target` acceptances or `m_max` simulations.
pub fn estimate_site_moments(
    site: usize,
    cavity: &MomentParams,
    model: &ModelSpec,
    cfg: &AbcConfig,
    key: StreamKey,
) -> Result<HybridMomentEstimate, EstimateError> {
    if cholesky(cavity.cov()).is_none() {
        return Err(EstimateError::CavityNotPositiveDefinite);
    }
    let (est, reached) = rejection_estimate(site, cavity, model, cfg, key, cfg.m_target, cfg.m_max);
    if reached {
        Ok(est)
    } else {
        Err(EstimateError::InsufficientAcceptances { partial: Box::new(est) })
    }
}

/// Rejection ABC with exactly `budget` simulations (the fixed-`M` form).
/// `cfg.m_target` and `cfg.m_max` are ignored.
pub fn estimate_fixed_budget(
    site: usize,
    cavity: &MomentParams,
    model: &ModelSpec,
    cfg: &AbcConfig,
    budget: usize,
    key: StreamKey,
) -> Result<HybridMomentEstimate, EstimateError> {
    let (est, _) = rejection_estimate(site, cavity, model, cfg, key, usize::MAX, budget);
    if est.n_accepted == 0 {
        return Err(EstimateError::InsufficientAcceptances { partial: Box::new(est) });
    }
    Ok(est)
}

/// Local rejection-ABC moment estimator.
#[derive(Debug, Clone)]
pub struct RejectionAbc {
    pub cfg: AbcConfig,
}

impl RejectionAbc {
    pub fn new(cfg: AbcConfig) -> Self {
        Self { cfg }
    }
}

impl MomentEstimator for RejectionAbc {
    fn estimate(&self, model: &ModelSpec, view: &SiteView<'_>, key: StreamKey) -> Result<HybridMomentEstimate, EstimateError> {
        estimate_site_moments(view.index, view.cavity, model, &self.cfg, key)
    }
}

/// Rejection ABC with a fixed number of simulations per site.
#[derive(Debug, Clone)]
pub struct FixedBudgetAbc {
    pub cfg: AbcConfig,
    pub budget: usize,
}

impl MomentEstimator for FixedBudgetAbc {
    fn estimate(&self, model: &ModelSpec, view: &SiteView<'_>, key: StreamKey) -> Result<HybridMomentEstimate, EstimateError> {
        estimate_fixed_budget(view.index, view.cavity, model, &self.cfg, self.budget, key)
    }
}

// ---------------------------------------------------------------------------
// Epsilon calibration

/// Smallest ε such that every site accepts at least a `floor` fraction of
/// its simulations: the maximum over sites of each site's `floor`-quantile.
pub fn calibrate_epsilon(records: &[AcceptanceRecord], floor: f64) -> Result<f64, AbcError> {
    if !(floor > 0.0 && floor < 1.0) {
        return Err(AbcError::Floor(floor));
    }
    if records.is_empty() {
        return Err(AbcError::EmptyRecords);
    }
    let mut eps = f64::NEG_INFINITY;
    for rec in records {
        // count(d ≤ ε) ≥ floor·n  ⇔  ε ≥ k-th smallest distance
        let k = ((floor * rec.n_simulated as f64) - 1e-9).ceil().max(1.0) as usize;
        if k > rec.distances.len() {
            return Err(AbcError::TooFewDistances {
                site: rec.site,
                have: rec.distances.len(),
                n_simulated: rec.n_simulated,
                floor,
            });
        }
        let mut sorted = rec.distances.clone();
        sorted.sort_by(f64::total_cmp);
        eps = eps.max(sorted[k - 1]);
    }
    Ok(eps)
}

/// Distances from `draws_per_site` simulations per site with parameters
/// drawn from `proposal` (typically the prior). IID models share one set of
/// simulations across sites.
pub fn pilot_records(
    model: &ModelSpec,
    proposal: &MomentParams,
    distance: &Distance,
    draws_per_site: usize,
    use_qmc: bool,
    seed: u64,
) -> Vec<AcceptanceRecord> {
    let prop = Proposal::new(proposal, use_qmc);
    let n = model.n_chunks();
    let shared = model.is_iid().then(|| {
        let key = StreamKey::new(seed, 0, 0, Purpose::Pilot);
        simulate_summaries(model, &prop, &key, draws_per_site)
    });
    (1..=n)
        .map(|site| {
            let observed = model.observed_summary(site);
            let distances: Vec<f64> = match &shared {
                Some(summaries) => summaries
                    .iter()
                    .flatten()
                    .map(|s| distance.between(s.as_slice(), observed.as_slice()))
                    .collect(),
                None => {
                    let key = StreamKey::new(seed, 0, site, Purpose::Pilot);
                    simulate_range(model, site, &prop, distance, &key, 0, draws_per_site)
                        .into_iter()
                        .filter_map(|(_, d)| d)
                        .collect()
                }
            };
            AcceptanceRecord { site, n_accepted: distances.len(), distances, n_simulated: draws_per_site }
        })
        .collect()
}

fn simulate_summaries(
    model: &ModelSpec,
    proposal: &Proposal<'_>,
    key: &StreamKey,
    count: usize,
) -> Vec<Option<DVector<f64>>> {
    // iid: every site shares the simulator, site 1 stands in for all
    (0..count)
        .into_par_iter()
        .map(|draw| {
            let (theta, mut rng) = proposal.draw(key, draw as u64);
            model.simulate_chunk(1, theta.as_slice(), &mut rng).ok().map(|c| DVector::from_vec(c.summary))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Recycling (IID models)

/// Shared simulations `(θ⁽ᵐ⁾, s(y⁽ᵐ⁾))` drawn from one Gaussian proposal.
#[derive(Debug, Clone)]
pub struct RecyclePool {
    thetas: Vec<DVector<f64>>,
    /// `None` where the simulation failed; such draws are never accepted.
    summaries: Vec<Option<DVector<f64>>>,
    proposal: MomentParams,
    pub ess_threshold: f64,
}

impl RecyclePool {
    pub fn from_parts(
        thetas: Vec<DVector<f64>>,
        summaries: Vec<Option<DVector<f64>>>,
        proposal: MomentParams,
        ess_threshold: f64,
    ) -> Self {
        assert!(!thetas.is_empty(), "pool must hold at least one draw");
        assert_eq!(thetas.len(), summaries.len(), "pool columns differ in length");
        Self { thetas, summaries, proposal, ess_threshold }
    }

    /// Draw `size` parameters from `proposal` and simulate one chunk each.
    pub fn generate(
        model: &ModelSpec,
        proposal: MomentParams,
        size: usize,
        use_qmc: bool,
        ess_threshold: f64,
        key: StreamKey,
    ) -> Result<Self, EstimateError> {
        if !model.is_iid() {
            return Err(EstimateError::NonIidModel);
        }
        let prop = Proposal::new(&proposal, use_qmc);
        let drawn: Vec<(DVector<f64>, Option<DVector<f64>>)> = (0..size)
            .into_par_iter()
            .map(|draw| {
                let (theta, mut rng) = prop.draw(&key, draw as u64);
                let s = model.simulate_chunk(1, theta.as_slice(), &mut rng).ok().map(|c| DVector::from_vec(c.summary));
                (theta, s)
            })
            .collect();
        let (thetas, summaries) = drawn.into_iter().unzip();
        Ok(Self::from_parts(thetas, summaries, proposal, ess_threshold))
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn proposal(&self) -> &MomentParams {
        &self.proposal
    }

    pub fn thetas(&self) -> &[DVector<f64>] {
        &self.thetas
    }
}

fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    cholesky(m).map(|c| 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// `(Σw)² / Σw²` for weights `w = N(θ; new_target) / N(θ; pool.proposal)`.
pub fn effective_sample_size(pool: &RecyclePool, new_target: &MomentParams) -> Result<f64, GaussError> {
    if new_target.dim() != pool.proposal.dim() {
        return Err(GaussError::DimensionMismatch { expected: pool.proposal.dim(), got: new_target.dim() });
    }
    let log_w: Vec<f64> =
        pool.thetas.iter().map(|t| new_target.log_density(t) - pool.proposal.log_density(t)).collect();
    Ok(ess_from_log_weights(&log_w))
}

/// ESS of unnormalized log weights, clamped to `[1, len]`.
pub fn ess_from_log_weights(log_w: &[f64]) -> f64 {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return 1.0;
    }
    let (s1, s2) = log_w.iter().fold((0.0, 0.0), |(a, b), lw| {
        let w = (lw - max).exp();
        (a + w, b + w * w)
    });
    (s1 * s1 / s2).clamp(1.0, log_w.len() as f64)
}

/// Recycling weight of a single draw, before the acceptance indicator:
/// `(|Q−Qᵢ|/|Q|) · exp{θᵗQᵢθ/2 − rᵢᵗθ}`, where `(r, Q)` is the current global
/// approximation and `(rᵢ, Qᵢ)` the site.
pub fn recycling_weight(global: &NaturalParams, site: &NaturalParams, theta: &DVector<f64>) -> Option<f64> {
    log_recycling_prefactor(global, site).map(|c| (c + log_site_factor(site, theta)).exp())
}

fn log_recycling_prefactor(global: &NaturalParams, site: &NaturalParams) -> Option<f64> {
    Some(log_det_spd(&(global.q() - site.q()))? - log_det_spd(global.q())?)
}

fn log_site_factor(site: &NaturalParams, theta: &DVector<f64>) -> f64 {
    0.5 * theta.dot(&(site.q() * theta)) - site.r().dot(theta)
}

/// Hybrid moments of `site` reweighted from the pool. When the pool was not
/// drawn from the current global approximation, the weights also carry the
/// density ratio `N(θ; global) / N(θ; pool proposal)`.
pub fn recycled_site_estimate(
    pool: &RecyclePool,
    site_index: usize,
    site: &NaturalParams,
    global: &NaturalParams,
    model: &ModelSpec,
    cfg: &AbcConfig,
) -> Result<HybridMomentEstimate, EstimateError> {
    let prefactor = log_recycling_prefactor(global, site).ok_or(EstimateError::CavityNotPositiveDefinite)?;
    let global_moments = global.to_moments().map_err(|_| EstimateError::CavityNotPositiveDefinite)?;
    let same_proposal = &global_moments == pool.proposal();
    let observed = model.observed_summary(site_index);

    let mut log_w = Vec::new();
    let mut kept = Vec::new();
    let mut distances = Vec::with_capacity(pool.len());
    for (theta, summary) in pool.thetas.iter().zip(&pool.summaries) {
        let Some(summary) = summary else { continue };
        let d = cfg.distance.between(summary.as_slice(), observed.as_slice());
        distances.push(d);
        if d <= cfg.epsilon {
            let mut lw = prefactor + log_site_factor(site, theta);
            if !same_proposal {
                lw += global_moments.log_density(theta) - pool.proposal.log_density(theta);
            }
            log_w.push(lw);
            kept.push(theta);
        }
    }
    let m = pool.len();
    let n_accepted = kept.len();
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if n_accepted == 0 || !max.is_finite() {
        return Err(EstimateError::DegenerateWeights);
    }
    let scaled: Vec<f64> = log_w.iter().map(|lw| (lw - max).exp()).collect();
    let z_hat = max.exp() * scaled.iter().sum::<f64>() / m as f64;
    let (mean, cov) = weighted_moments(&kept, &scaled);
    Ok(HybridMomentEstimate { z_hat, mean, cov, n_accepted, n_simulated: m, distances })
}

/// One recycled pass: refresh the pool from the current global approximation
/// if its ESS fraction fell below the pool threshold, then estimate every
/// site. Returns per-site results (index `k` is site `k + 1`) and whether the
/// pool was regenerated.
pub fn recycled_pass(
    state: &EpState,
    pool: &mut RecyclePool,
    model: &ModelSpec,
    cfg: &AbcConfig,
    use_qmc: bool,
    key: StreamKey,
) -> Result<(Vec<Result<HybridMomentEstimate, EstimateError>>, bool), EstimateError> {
    if !model.is_iid() {
        return Err(EstimateError::NonIidModel);
    }
    let global = state.global().to_moments().map_err(|_| EstimateError::CavityNotPositiveDefinite)?;
    let ess = effective_sample_size(pool, &global).map_err(|e| EstimateError::Other(e.to_string()))?;
    let refreshed = ess / (pool.len() as f64) < pool.ess_threshold;
    if refreshed {
        *pool = RecyclePool::generate(model, global, pool.len(), use_qmc, pool.ess_threshold, key)?;
    }
    let estimates = (1..=state.n_sites())
        .into_par_iter()
        .map(|i| recycled_site_estimate(pool, i, state.site(i), state.global(), model, cfg))
        .collect();
    Ok((estimates, refreshed))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecycleDiagnostics {
    /// ESS of the retained pool against each new global approximation.
    pub ess_history: Vec<f64>,
    /// Regenerations triggered by the ESS rule (the initial draw is not counted).
    pub refreshes: usize,
    /// Chunks actually simulated for pools.
    pub simulations: usize,
}

/// Moment estimator backed by a shared, ESS-monitored pool. Intended for the
/// parallel schedule; with other schedules the pool is checked at every block.
#[derive(Debug)]
pub struct RecyclingEstimator {
    pub cfg: AbcConfig,
    pub pool_size: usize,
    pub ess_threshold: f64,
    pool: RwLock<Option<RecyclePool>>,
    diagnostics: Mutex<RecycleDiagnostics>,
}

impl RecyclingEstimator {
    pub fn new(cfg: AbcConfig, pool_size: usize, ess_threshold: f64) -> Self {
        Self {
            cfg,
            pool_size,
            ess_threshold,
            pool: RwLock::new(None),
            diagnostics: Mutex::new(RecycleDiagnostics::default()),
        }
    }

    pub fn diagnostics(&self) -> RecycleDiagnostics {
        self.diagnostics.lock().expect("diagnostics lock").clone()
    }
}

impl MomentEstimator for RecyclingEstimator {
    fn begin_block(&self, model: &ModelSpec, global: &NaturalParams, key: StreamKey) -> Result<(), EstimateError> {
        if !model.is_iid() {
            return Err(EstimateError::NonIidModel);
        }
        let target = global.to_moments().map_err(|_| EstimateError::CavityNotPositiveDefinite)?;
        let key = StreamKey { purpose: Purpose::RecyclePool, ..key };
        let mut pool = self.pool.write().expect("pool lock");
        let mut diag = self.diagnostics.lock().expect("diagnostics lock");
        let regenerate = match pool.as_ref() {
            None => true,
            Some(existing) => {
                let ess = effective_sample_size(existing, &target).map_err(|e| EstimateError::Other(e.to_string()))?;
                diag.ess_history.push(ess);
                let low = ess / (existing.len() as f64) < self.ess_threshold;
                if low {
                    diag.refreshes += 1;
                }
                low
            }
        };
        if regenerate {
            *pool = Some(RecyclePool::generate(model, target, self.pool_size, self.cfg.use_qmc, self.ess_threshold, key)?);
            diag.simulations += self.pool_size;
        }
        Ok(())
    }

    fn estimate(&self, model: &ModelSpec, view: &SiteView<'_>, _: StreamKey) -> Result<HybridMomentEstimate, EstimateError> {
        let guard = self.pool.read().expect("pool lock");
        let pool = guard.as_ref().ok_or_else(|| EstimateError::Other("pool not initialised".into()))?;
        recycled_site_estimate(pool, view.index, view.site, view.global, model, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussMean;

    fn rec(site: usize, distances: Vec<f64>) -> AcceptanceRecord {
        let n = distances.len();
        AcceptanceRecord { site, distances, n_simulated: n, n_accepted: n }
    }

    #[test]
    fn halton_base_two_and_three() {
        let pts: Vec<f64> = (1..=3).map(|i| radical_inverse(i, 2)).collect();
        assert_eq!(pts, vec![0.5, 0.25, 0.75]);
        let p2 = halton_point(2, 2);
        assert_eq!(p2[0], 0.25);
        assert!((p2[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(first_primes(5), vec![2, 3, 5, 7, 11]);
    }

    #[test]
    fn qmc_stream_first_point_maps_to_mean() {
        let std = MomentParams::standard(1);
        let pts = qmc_gaussian_stream(3, &std, 0);
        assert_eq!(pts[(0, 0)], 0.0);
        assert!(pts[(1, 0)] < 0.0 && pts[(2, 0)] > 0.0);
        assert!((pts[(1, 0)] + pts[(2, 0)]).abs() < 1e-12);
    }

    #[test]
    fn qmc_stream_offsets_continue_sequence() {
        let target = MomentParams::from_slices(&[1.0, -1.0], &[2.0, 0.3, 0.3, 1.0]).unwrap();
        let all = qmc_gaussian_stream(10, &target, 5);
        let head = qmc_gaussian_stream(4, &target, 5);
        let tail = qmc_gaussian_stream(6, &target, 9);
        assert_eq!(all.rows(0, 4), head);
        assert_eq!(all.rows(4, 6), tail);
        assert_eq!(qmc_gaussian_stream(10, &target, 5), all);
    }

    #[test]
    fn normal_quantile_accuracy() {
        assert_eq!(normal_quantile(0.5), 0.0);
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((normal_quantile(1e-10) + 6.361340902404056).abs() < 1e-9);
    }

    #[test]
    fn calibrate_examples() {
        let one = rec(1, (1..=100).map(f64::from).collect());
        assert_eq!(calibrate_epsilon(&[one.clone()], 0.05).unwrap(), 5.0);
        let two = rec(2, (11..=110).map(f64::from).collect());
        assert_eq!(calibrate_epsilon(&[one.clone(), two.clone()], 0.05).unwrap(), 15.0);
        assert_eq!(calibrate_epsilon(&[one, two], 1e-9).unwrap(), 11.0);
        assert_eq!(calibrate_epsilon(&[], 0.05), Err(AbcError::EmptyRecords));
        assert!(matches!(calibrate_epsilon(&[rec(1, vec![1.0])], 1.5), Err(AbcError::Floor(_))));
    }

    #[test]
    fn calibrate_counts_failed_simulations() {
        let r = AcceptanceRecord { site: 1, distances: vec![3.0, 1.0, 2.0], n_simulated: 10, n_accepted: 3 };
        assert_eq!(calibrate_epsilon(&[r.clone()], 0.2).unwrap(), 2.0);
        assert!(matches!(calibrate_epsilon(&[r], 0.5), Err(AbcError::TooFewDistances { .. })));
    }

    #[test]
    fn weight_prefactor_example() {
        let global = NaturalParams::from_slices(&[0.0], &[2.0]).unwrap();
        let site = NaturalParams::from_slices(&[0.0], &[1.0]).unwrap();
        let w = recycling_weight(&global, &site, &DVector::from_element(1, 1.0)).unwrap();
        assert!((w - 0.5 * 0.5_f64.exp()).abs() < 1e-14);
        assert!((w - 0.8244).abs() < 1e-4);
        let zero = NaturalParams::zeros(1);
        assert!((recycling_weight(&global, &zero, &DVector::from_element(1, 3.7)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ess_edge_cases() {
        let std = MomentParams::standard(1);
        let thetas: Vec<_> = (0..50).map(|k| DVector::from_element(1, k as f64 / 10.0 - 2.5)).collect();
        let pool = RecyclePool::from_parts(thetas, vec![None; 50], std.clone(), 0.5);
        assert!((effective_sample_size(&pool, &std).unwrap() - 50.0).abs() < 1e-9);
        let single = RecyclePool::from_parts(vec![DVector::from_element(1, 0.3)], vec![None], std.clone(), 0.5);
        let far = MomentParams::from_slices(&[4.0], &[0.1]).unwrap();
        assert_eq!(effective_sample_size(&single, &far).unwrap(), 1.0);
    }

    #[test]
    fn everything_accepted_at_infinite_epsilon() {
        let model = GaussMean::new(0.0, 1.0, vec![0.0]).model().unwrap();
        let cavity = MomentParams::from_slices(&[0.3], &[2.0]).unwrap();
        let cfg = AbcConfig::new(f64::INFINITY, 2000, 10_000);
        let est = estimate_site_moments(1, &cavity, &model, &cfg, StreamKey::new(1, 0, 1, Purpose::SiteEstimate)).unwrap();
        assert_eq!(est.n_accepted, est.n_simulated);
        assert_eq!(est.n_simulated, 2048);
        assert_eq!(est.z_hat, 1.0);
    }

    #[test]
    fn hopeless_site_reports_insufficient() {
        let model = GaussMean::new(0.0, 1.0, vec![1e6]).model().unwrap();
        let cavity = MomentParams::standard(1);
        let cfg = AbcConfig::new(0.1, 10, 3000);
        let err = estimate_site_moments(1, &cavity, &model, &cfg, StreamKey::new(1, 0, 1, Purpose::SiteEstimate));
        match err {
            Err(EstimateError::InsufficientAcceptances { partial }) => {
                assert_eq!(partial.n_accepted, 0);
                assert_eq!(partial.n_simulated, 3000);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn recycling_refuses_non_iid() {
        let model = crate::model::Ar1::new(MomentParams::standard(2), vec![0.0, 1.0, 2.0]).model().unwrap();
        let err = RecyclePool::generate(&model, MomentParams::standard(2), 10, false, 0.5, StreamKey::new(0, 0, 0, Purpose::RecyclePool));
        assert!(matches!(err, Err(EstimateError::NonIidModel)));
    }

    #[test]
    fn distance_weights() {
        let d = Distance { weights: vec![4.0, 0.0] };
        assert_eq!(d.between(&[1.0, 5.0], &[0.0, 0.0]), 2.0);
        assert_eq!(Distance::default().between(&[3.0, 4.0], &[0.0, 0.0]), 5.0);
    }
}
