//! Model plugin contract and the tractable built-in models.
//!
//! A model is a factorized likelihood `p(y|θ) = ∏ fᵢ(yᵢ|θ)` that can only be
//! sampled. Simulators return the local summary `sᵢ(yᵢ)` directly; raw
//! chunks never leave the simulator.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::gauss::{GaussError, MomentParams, NaturalParams};
use crate::rng::{Purpose, StreamKey};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("simulation failed: {0}")]
pub struct SimulationFailure(pub String);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model needs at least one chunk")]
    NoChunks,
    #[error("observed summaries ({observed}) and contexts ({contexts}) differ in length")]
    ContextLength { observed: usize, contexts: usize },
    #[error("site {site}: summary dimension {got}, expected {expected}")]
    SummaryDim { site: usize, expected: usize, got: usize },
    #[error("prior dimension {got} does not match simulator parameter dimension {expected}")]
    PriorDim { expected: usize, got: usize },
    #[error("prior is not a proper Gaussian")]
    ImproperPrior,
    #[error("iid model requires identical chunk contexts")]
    IidContext,
    #[error("invalid model parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Gauss(#[from] GaussError),
    #[error("reading {path}: {message}")]
    Data { path: String, message: String },
}

/// Summary of one simulated chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkDraw {
    pub summary: Vec<f64>,
}

/// Sampler for one likelihood factor. `context` is the fixed observed data a
/// factor conditions on (e.g. the previous observation of a Markov chain).
pub trait ChunkSimulator: Send + Sync {
    fn theta_dim(&self) -> usize;
    fn summary_dim(&self) -> usize;
    fn simulate(
        &self,
        theta: &[f64],
        context: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, SimulationFailure>;
}

/// A complete likelihood-free model: simulator, observed summaries, Gaussian prior.
#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    prior: NaturalParams,
    observed: Vec<DVector<f64>>,
    contexts: Vec<Vec<f64>>,
    iid: bool,
    simulator: Arc<dyn ChunkSimulator>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("n_chunks", &self.n_chunks())
            .field("theta_dim", &self.theta_dim())
            .field("iid", &self.iid)
            .finish()
    }
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        simulator: Arc<dyn ChunkSimulator>,
        prior: NaturalParams,
        observed: Vec<Vec<f64>>,
        contexts: Vec<Vec<f64>>,
        iid: bool,
    ) -> Result<Self, ModelError> {
        if observed.is_empty() {
            return Err(ModelError::NoChunks);
        }
        if contexts.len() != observed.len() {
            return Err(ModelError::ContextLength { observed: observed.len(), contexts: contexts.len() });
        }
        if prior.dim() != simulator.theta_dim() {
            return Err(ModelError::PriorDim { expected: simulator.theta_dim(), got: prior.dim() });
        }
        if !prior.is_positive_definite() {
            return Err(ModelError::ImproperPrior);
        }
        let s_dim = simulator.summary_dim();
        for (k, s) in observed.iter().enumerate() {
            if s.len() != s_dim {
                return Err(ModelError::SummaryDim { site: k + 1, expected: s_dim, got: s.len() });
            }
        }
        if iid && contexts.windows(2).any(|w| w[0] != w[1]) {
            return Err(ModelError::IidContext);
        }
        Ok(Self {
            name: name.into(),
            prior,
            observed: observed.into_iter().map(DVector::from_vec).collect(),
            contexts,
            iid,
            simulator,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_chunks(&self) -> usize {
        self.observed.len()
    }

    pub fn theta_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn summary_dim(&self) -> usize {
        self.simulator.summary_dim()
    }

    pub fn prior(&self) -> &NaturalParams {
        &self.prior
    }

    pub fn is_iid(&self) -> bool {
        self.iid
    }

    /// Observed summary of site `site` (1-based; site 0 is the prior).
    pub fn observed_summary(&self, site: usize) -> &DVector<f64> {
        &self.observed[site - 1]
    }

    pub fn context(&self, site: usize) -> &[f64] {
        &self.contexts[site - 1]
    }

    /// Draw the summary of chunk `site` given `theta`.
    pub fn simulate_chunk(
        &self,
        site: usize,
        theta: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<ChunkDraw, SimulationFailure> {
        assert!(site >= 1 && site <= self.n_chunks(), "site {site} out of range");
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(SimulationFailure("non-finite parameter".into()));
        }
        let summary = self.simulator.simulate(theta, self.context(site), rng)?;
        if summary.iter().any(|s| !s.is_finite()) {
            return Err(SimulationFailure("non-finite summary".into()));
        }
        Ok(ChunkDraw { summary })
    }
}

/// Read a comma-separated numeric file, one chunk per row. Blank lines and
/// lines starting with `#` are ignored.
pub fn load_rows(path: &Path) -> Result<Vec<Vec<f64>>, ModelError> {
    let data_err = |message: String| ModelError::Data { path: path.display().to_string(), message };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| data_err(e.to_string()))?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| data_err(e.to_string()))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let row = record
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| data_err(format!("row {}: {e}", line + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(data_err("no data rows".into()));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// GaussMean: yᵢ | θ ~ N(θ, 1), identity summary.

struct GaussMeanSimulator;

impl ChunkSimulator for GaussMeanSimulator {
    fn theta_dim(&self) -> usize {
        1
    }

    fn summary_dim(&self) -> usize {
        1
    }

    fn simulate(&self, theta: &[f64], _: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, SimulationFailure> {
        let z: f64 = rng.sample(StandardNormal);
        Ok(vec![theta[0] + z])
    }
}

/// Conjugate Gaussian-mean model with unit observation variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussMean {
    pub prior_mean: f64,
    pub prior_var: f64,
    pub observations: Vec<f64>,
}

impl GaussMean {
    pub fn new(prior_mean: f64, prior_var: f64, observations: Vec<f64>) -> Self {
        Self { prior_mean, prior_var, observations }
    }

    /// `n` observations drawn from `N(true_mean, 1)`.
    pub fn synthetic(n: usize, true_mean: f64, data_seed: u64) -> Vec<f64> {
        let key = StreamKey::new(data_seed, 0, 0, Purpose::SyntheticData);
        (0..n as u64)
            .map(|k| true_mean + key.draw_rng(k).sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn model(&self) -> Result<ModelSpec, ModelError> {
        if !(self.prior_var > 0.0 && self.prior_var.is_finite()) {
            return Err(ModelError::Invalid("prior_var must be positive".into()));
        }
        let prior = MomentParams::from_slices(&[self.prior_mean], &[self.prior_var])?.to_natural()?;
        let observed = self.observations.iter().map(|&y| vec![y]).collect::<Vec<_>>();
        let contexts = vec![Vec::new(); observed.len()];
        ModelSpec::new("gauss_mean", Arc::new(GaussMeanSimulator), prior, observed, contexts, true)
    }

    pub fn exact_posterior(&self) -> MomentParams {
        exact_posterior(self.prior_mean, self.prior_var, &self.observations)
    }
}

/// Conjugate posterior of the Gaussian mean with unit observation variance.
pub fn exact_posterior(prior_mean: f64, prior_var: f64, data: &[f64]) -> MomentParams {
    let var = 1.0 / (1.0 / prior_var + data.len() as f64);
    let mean = var * (prior_mean / prior_var + data.iter().sum::<f64>());
    MomentParams::from_slices(&[mean], &[var]).expect("positive variance")
}

// ---------------------------------------------------------------------------
// AR(1): yᵢ | yᵢ₋₁ ~ N(ρ yᵢ₋₁, σ²), θ = (artanh ρ, log σ).

struct Ar1Simulator;

impl ChunkSimulator for Ar1Simulator {
    fn theta_dim(&self) -> usize {
        2
    }

    fn summary_dim(&self) -> usize {
        1
    }

    fn simulate(&self, theta: &[f64], context: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, SimulationFailure> {
        let rho = theta[0].tanh();
        let sigma = theta[1].exp();
        if !sigma.is_finite() {
            return Err(SimulationFailure("sigma overflow".into()));
        }
        let z: f64 = rng.sample(StandardNormal);
        Ok(vec![rho * context[0] + sigma * z])
    }
}

/// Gaussian AR(1) chain conditioned on the observed previous value.
///
/// `series` holds `y₀, y₁, …, yₙ`; `y₀` is the initial state and the
/// remaining `n` values are the chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct Ar1 {
    pub prior: MomentParams,
    pub series: Vec<f64>,
}

impl Ar1 {
    pub fn new(prior: MomentParams, series: Vec<f64>) -> Self {
        Self { prior, series }
    }

    /// A chain of `n` steps after `y₀ = 0`.
    pub fn synthetic(n: usize, rho: f64, sigma: f64, data_seed: u64) -> Vec<f64> {
        let key = StreamKey::new(data_seed, 0, 0, Purpose::SyntheticData);
        let mut series = Vec::with_capacity(n + 1);
        series.push(0.0);
        for k in 0..n {
            let z: f64 = key.draw_rng(k as u64).sample(StandardNormal);
            series.push(rho * series[k] + sigma * z);
        }
        series
    }

    pub fn model(&self) -> Result<ModelSpec, ModelError> {
        if self.series.len() < 2 {
            return Err(ModelError::NoChunks);
        }
        let prior = self.prior.to_natural()?;
        let observed = self.series[1..].iter().map(|&y| vec![y]).collect();
        let contexts = self.series[..self.series.len() - 1].iter().map(|&y| vec![y]).collect();
        ModelSpec::new("ar1", Arc::new(Ar1Simulator), prior, observed, contexts, false)
    }
}
