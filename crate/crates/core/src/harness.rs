//! Configuration-driven runs and their file outputs.
//!
//! A run config is a TOML file; see the README for the schema. Relative paths
//! inside a config resolve against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abc::{
    calibrate_epsilon, pilot_records, AbcConfig, AbcError, AcceptanceRecord, Distance, RecycleDiagnostics,
    RecyclingEstimator, RejectionAbc, DEFAULT_ESS_THRESHOLD,
};
use crate::engine::{self, EpError, EpTrace, Schedule, UpdatePolicy};
use crate::extremes::{
    correlation_distance_grid, CorrelationModel, ExtremesError, MaxStableConfig, SpatialExtremes, StationLayout,
};
use crate::gauss::MomentParams;
use crate::model::{load_rows, Ar1, GaussMean, ModelError, ModelSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Parse(String),
    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },
}

impl ConfigError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Field { field: field.into(), message: message.into() }
    }

    /// Offending field path, when known.
    pub fn field_path(&self) -> Option<&str> {
        match self {
            ConfigError::Field { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Extremes(#[from] ExtremesError),
    #[error("epsilon calibration failed: {0}")]
    Calibration(#[from] AbcError),
    #[error("engine error: {0}")]
    Engine(#[from] EpError),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl HarnessError {
    /// Short machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Model(_) => "model",
            HarnessError::Extremes(_) => "extremes",
            HarnessError::Calibration(_) => "calibration",
            HarnessError::Engine(_) => "engine",
            HarnessError::Output { .. } => "output",
        }
    }

    pub fn field_path(&self) -> Option<&str> {
        match self {
            HarnessError::Config(c) => c.field_path(),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Config schema

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussMeanSynthetic {
    pub n: usize,
    pub true_mean: f64,
    pub data_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ar1Synthetic {
    pub n: usize,
    pub rho: f64,
    pub sigma: f64,
    pub data_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtremesSynthetic {
    pub stations: usize,
    pub extent: f64,
    pub replicates: usize,
    pub nu: f64,
    pub c: f64,
    pub data_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// One observation per chunk, `y ~ N(θ, 1)`.
    GaussMean {
        #[serde(default)]
        prior_mean: f64,
        #[serde(default = "one")]
        prior_var: f64,
        /// One observation per row.
        #[serde(default)]
        data: Option<PathBuf>,
        #[serde(default)]
        synthetic: Option<GaussMeanSynthetic>,
    },
    /// `θ = (artanh ρ, log σ)`.
    Ar1 {
        #[serde(default = "zeros2")]
        prior_mean: Vec<f64>,
        #[serde(default = "ones2")]
        prior_var: Vec<f64>,
        /// The series `y₀ … yₙ`, one value per row.
        #[serde(default)]
        data: Option<PathBuf>,
        #[serde(default)]
        synthetic: Option<Ar1Synthetic>,
    },
    /// `θ = (log ν, log c)`.
    Extremes {
        #[serde(default = "zeros2")]
        prior_mean: Vec<f64>,
        #[serde(default = "ones2")]
        prior_var: Vec<f64>,
        /// Two columns, one station per row.
        #[serde(default)]
        stations: Option<PathBuf>,
        /// One replicate per row, one column per station.
        #[serde(default)]
        data: Option<PathBuf>,
        #[serde(default)]
        synthetic: Option<ExtremesSynthetic>,
        #[serde(default)]
        maxstable: Option<MaxStableConfig>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Minimum acceptance fraction required at every site.
    pub floor: f64,
    /// Pilot simulations per site, drawn from the prior.
    pub draws_per_site: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub schedules: Vec<Schedule>,
    /// Defaults to the run seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Fixed tolerance; exclusive with `calibration`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub calibration: Option<CalibrationConfig>,
    #[serde(default = "sequential")]
    pub schedule: Schedule,
    #[serde(default = "one")]
    pub alpha: f64,
    pub m_target: usize,
    pub m_max: usize,
    #[serde(default = "default_min_accept")]
    pub min_accept: usize,
    #[serde(default)]
    pub use_qmc: bool,
    #[serde(default)]
    pub use_recycling: bool,
    /// Recycling pool size; defaults to `m_max`.
    #[serde(default)]
    pub pool_size: Option<usize>,
    #[serde(default = "default_ess")]
    pub ess_threshold: f64,
    #[serde(default = "default_max_passes")]
    pub max_passes: usize,
    #[serde(default = "default_tol")]
    pub convergence_tol: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub distance_weights: Vec<f64>,
    /// Also write per-update wall-clock times to `timing.csv`.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub compare: Option<CompareConfig>,
}

fn one() -> f64 {
    1.0
}
fn zeros2() -> Vec<f64> {
    vec![0.0, 0.0]
}
fn ones2() -> Vec<f64> {
    vec![1.0, 1.0]
}
fn sequential() -> Schedule {
    Schedule::Sequential
}
fn default_min_accept() -> usize {
    UpdatePolicy::default().min_accept
}
fn default_ess() -> f64 {
    DEFAULT_ESS_THRESHOLD
}
fn default_max_passes() -> usize {
    UpdatePolicy::default().max_passes
}
fn default_tol() -> f64 {
    UpdatePolicy::default().convergence_tol
}

fn read_text(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string().trim_end().to_string()))
}

fn base_dir(config_path: &Path) -> PathBuf {
    config_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_file(base: &Path, p: &Option<PathBuf>, field: &str) -> Result<(), ConfigError> {
    if let Some(p) = p {
        let full = resolve(base, p);
        if !full.is_file() {
            return Err(ConfigError::field(field, format!("file {} does not exist", full.display())));
        }
    }
    Ok(())
}

fn check_prior(mean: &[f64], var: &[f64]) -> Result<(), ConfigError> {
    if mean.len() != 2 {
        return Err(ConfigError::field("model.prior_mean", "expected 2 entries"));
    }
    if var.len() != 2 {
        return Err(ConfigError::field("model.prior_var", "expected 2 entries"));
    }
    if var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(ConfigError::field("model.prior_var", "variances must be positive"));
    }
    Ok(())
}

fn exactly_one<T, U>(a: &Option<T>, b: &Option<U>, field_a: &str, field_b: &str) -> Result<(), ConfigError> {
    match (a.is_some(), b.is_some()) {
        (true, false) | (false, true) => Ok(()),
        _ => Err(ConfigError::field(field_a, format!("give exactly one of `{field_a}` and `{field_b}`"))),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        parse_toml(text)
    }

    /// Parse and validate; relative paths are checked against `base`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg = Self::from_toml_str(&read_text(path)?)?;
        cfg.validate(&base_dir(path))?;
        Ok(cfg)
    }

    pub fn validate(&self, base: &Path) -> Result<(), ConfigError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(ConfigError::field("alpha", format!("must lie in (0, 1], got {}", self.alpha)));
        }
        exactly_one(&self.epsilon, &self.calibration, "epsilon", "calibration")?;
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) {
                return Err(ConfigError::field("epsilon", format!("must be positive, got {eps}")));
            }
        }
        if let Some(cal) = &self.calibration {
            if !(cal.floor > 0.0 && cal.floor < 1.0) {
                return Err(ConfigError::field("calibration.floor", format!("must lie in (0, 1), got {}", cal.floor)));
            }
            if cal.draws_per_site == 0 {
                return Err(ConfigError::field("calibration.draws_per_site", "must be positive"));
            }
        }
        if let Schedule::BlockParallel { n_core: 0 } = self.schedule {
            return Err(ConfigError::field("schedule.n_core", "must be at least 1"));
        }
        if self.m_target == 0 {
            return Err(ConfigError::field("m_target", "must be positive"));
        }
        if self.m_max < self.m_target {
            return Err(ConfigError::field("m_max", "must be at least m_target"));
        }
        if self.min_accept == 0 {
            return Err(ConfigError::field("min_accept", "must be positive"));
        }
        if self.pool_size == Some(0) {
            return Err(ConfigError::field("pool_size", "must be positive"));
        }
        if !(self.ess_threshold > 0.0 && self.ess_threshold <= 1.0) {
            return Err(ConfigError::field("ess_threshold", "must lie in (0, 1]"));
        }
        if self.max_passes == 0 {
            return Err(ConfigError::field("max_passes", "must be positive"));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(ConfigError::field("convergence_tol", "must be positive"));
        }
        if self.distance_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(ConfigError::field("distance_weights", "weights must be finite and non-negative"));
        }
        if let Some(cmp) = &self.compare {
            if cmp.schedules.is_empty() {
                return Err(ConfigError::field("compare.schedules", "must not be empty"));
            }
            if cmp.schedules.iter().any(|s| matches!(s, Schedule::BlockParallel { n_core: 0 })) {
                return Err(ConfigError::field("compare.schedules", "n_core must be at least 1"));
            }
        }
        match &self.model {
            ModelConfig::GaussMean { prior_var, data, synthetic, .. } => {
                if !(*prior_var > 0.0 && prior_var.is_finite()) {
                    return Err(ConfigError::field("model.prior_var", "must be positive"));
                }
                exactly_one(data, synthetic, "model.data", "model.synthetic")?;
                check_file(base, data, "model.data")?;
            }
            ModelConfig::Ar1 { prior_mean, prior_var, data, synthetic } => {
                check_prior(prior_mean, prior_var)?;
                exactly_one(data, synthetic, "model.data", "model.synthetic")?;
                check_file(base, data, "model.data")?;
                if self.use_recycling {
                    return Err(ConfigError::field("use_recycling", "recycling needs IID chunks; ar1 is not IID"));
                }
            }
            ModelConfig::Extremes { prior_mean, prior_var, stations, data, synthetic, maxstable } => {
                check_prior(prior_mean, prior_var)?;
                if synthetic.is_some() == (stations.is_some() || data.is_some()) {
                    return Err(ConfigError::field(
                        "model.synthetic",
                        "give either `synthetic` or both `stations` and `data`",
                    ));
                }
                if synthetic.is_none() && (stations.is_none() || data.is_none()) {
                    return Err(ConfigError::field("model.stations", "`stations` and `data` go together"));
                }
                check_file(base, stations, "model.stations")?;
                check_file(base, data, "model.data")?;
                if let Some(s) = synthetic {
                    if s.stations < 3 {
                        return Err(ConfigError::field("model.synthetic.stations", "need at least 3 stations"));
                    }
                    if s.replicates == 0 {
                        return Err(ConfigError::field("model.synthetic.replicates", "must be positive"));
                    }
                    if !(s.extent > 0.0 && s.nu > 0.0 && s.c > 0.0) {
                        return Err(ConfigError::field("model.synthetic", "extent, nu and c must be positive"));
                    }
                }
                if let Some(m) = maxstable {
                    if m.spike_cap == 0 || !(m.tail_factor > 0.0) {
                        return Err(ConfigError::field("model.maxstable", "spike_cap and tail_factor must be positive"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn policy(&self) -> UpdatePolicy {
        UpdatePolicy {
            alpha: self.alpha,
            min_accept: self.min_accept,
            max_passes: self.max_passes,
            convergence_tol: self.convergence_tol,
        }
    }

    pub fn distance(&self) -> Distance {
        Distance { weights: self.distance_weights.clone() }
    }
}

fn diag_prior(mean: &[f64], var: &[f64]) -> Result<MomentParams, ModelError> {
    let p = mean.len();
    let cov = DMatrix::from_fn(p, p, |i, j| if i == j { var[i] } else { 0.0 });
    Ok(MomentParams::new(nalgebra::DVector::from_column_slice(mean), cov)?)
}

fn column(rows: Vec<Vec<f64>>, path: &Path) -> Result<Vec<f64>, ModelError> {
    rows.into_iter()
        .map(|r| match r.as_slice() {
            [v] => Ok(*v),
            _ => Err(ModelError::Data { path: path.display().to_string(), message: "expected one column".into() }),
        })
        .collect()
}

/// Assemble the model described by `cfg`, loading or generating its data.
pub fn build_model(cfg: &ModelConfig, base: &Path) -> Result<ModelSpec, HarnessError> {
    let model = match cfg {
        ModelConfig::GaussMean { prior_mean, prior_var, data, synthetic } => {
            let obs = match (data, synthetic) {
                (Some(p), _) => {
                    let p = resolve(base, p);
                    column(load_rows(&p)?, &p)?
                }
                (None, Some(s)) => GaussMean::synthetic(s.n, s.true_mean, s.data_seed),
                (None, None) => return Err(ConfigError::field("model.data", "no data source").into()),
            };
            GaussMean::new(*prior_mean, *prior_var, obs).model()?
        }
        ModelConfig::Ar1 { prior_mean, prior_var, data, synthetic } => {
            let series = match (data, synthetic) {
                (Some(p), _) => {
                    let p = resolve(base, p);
                    column(load_rows(&p)?, &p)?
                }
                (None, Some(s)) => Ar1::synthetic(s.n, s.rho, s.sigma, s.data_seed),
                (None, None) => return Err(ConfigError::field("model.data", "no data source").into()),
            };
            Ar1::new(diag_prior(prior_mean, prior_var)?, series).model()?
        }
        ModelConfig::Extremes { prior_mean, prior_var, stations, data, synthetic, maxstable } => {
            let ms = maxstable.unwrap_or_default();
            let prior = diag_prior(prior_mean, prior_var)?;
            let (layout, replicates) = match (synthetic, stations, data) {
                (Some(s), _, _) => {
                    let layout = StationLayout::random(s.stations, s.extent, s.data_seed)?;
                    let truth = CorrelationModel::from_natural_scale(s.nu, s.c);
                    let reps = SpatialExtremes::synthetic_replicates(&layout, &truth, &ms, s.replicates, s.data_seed)?;
                    (layout, reps)
                }
                (None, Some(st), Some(d)) => {
                    let st = resolve(base, st);
                    let coords = load_rows(&st)?
                        .into_iter()
                        .map(|r| match r.as_slice() {
                            [x, y] => Ok([*x, *y]),
                            _ => Err(ModelError::Data {
                                path: st.display().to_string(),
                                message: "expected two columns".into(),
                            }),
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    (StationLayout::new(coords)?, load_rows(&resolve(base, d))?)
                }
                _ => return Err(ConfigError::field("model.data", "no data source").into()),
            };
            SpatialExtremes::new(layout, ms, prior, replicates).model()?
        }
    };
    Ok(model)
}

// ---------------------------------------------------------------------------
// Runs

/// Everything a run produced.
#[derive(Debug)]
pub struct RunReport {
    pub trace: EpTrace,
    pub epsilon: f64,
    pub recycling: Option<RecycleDiagnostics>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct RecyclingSummary {
    ess_history: Vec<f64>,
    refreshes: usize,
    pool_simulations: usize,
}

#[derive(Debug, Serialize)]
struct FinalSummary<'a> {
    mu: Option<Vec<f64>>,
    sigma: Option<Vec<Vec<f64>>>,
    r: Option<Vec<f64>>,
    q: Option<Vec<Vec<f64>>>,
    converged: bool,
    termination: Option<engine::Termination>,
    passes: usize,
    total_simulated: usize,
    epsilon: Option<f64>,
    seed: u64,
    recycling: Option<RecyclingSummary>,
    error: Option<String>,
    config: &'a RunConfig,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn output_err(path: &Path, e: impl ToString) -> HarnessError {
    HarnessError::Output { path: path.display().to_string(), message: e.to_string() }
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| output_err(path, e))?;
    w.write_record(header).map_err(|e| output_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| output_err(path, e))?;
    }
    w.flush().map_err(|e| output_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| output_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| output_err(path, e))
}

fn moment_header(p: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..=p).map(|j| format!("mu_{j}")).collect();
    for j in 1..=p {
        for k in 1..=p {
            h.push(format!("sigma_{j}_{k}"));
        }
    }
    h
}

fn trace_rows(trace: &EpTrace, p: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header: Vec<String> =
        ["pass", "site", "skipped", "reason", "n_accepted", "n_simulated"].iter().map(|s| s.to_string()).collect();
    header.extend(moment_header(p));
    let rows = trace
        .records
        .iter()
        .map(|r| {
            let mut row = vec![
                (r.pass + 1).to_string(),
                r.site.to_string(),
                r.skipped.is_some().to_string(),
                r.skipped.as_ref().map(|s| s.code().to_string()).unwrap_or_default(),
                r.n_accepted.to_string(),
                r.n_simulated.to_string(),
            ];
            match &r.global {
                Some(g) => {
                    row.extend(g.mean().iter().map(|v| v.to_string()));
                    for j in 0..p {
                        row.extend((0..p).map(|k| g.cov()[(j, k)].to_string()));
                    }
                }
                None => row.extend(std::iter::repeat_n(String::new(), p + p * p)),
            }
            row
        })
        .collect();
    (header, rows)
}

const QUANTILES: [f64; 7] = [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9];

fn order_stat(sorted: &[f64], q: f64) -> f64 {
    let k = ((q * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[k.min(sorted.len()) - 1]
}

fn acceptance_rows(records: &[AcceptanceRecord]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header: Vec<String> = ["site", "n_simulated", "n_accepted", "n_distances"].iter().map(|s| s.to_string()).collect();
    header.extend(QUANTILES.iter().map(|q| format!("q{q}")));
    let rows = records
        .iter()
        .map(|rec| {
            let mut sorted = rec.distances.clone();
            sorted.sort_by(f64::total_cmp);
            let mut row =
                vec![rec.site.to_string(), rec.n_simulated.to_string(), rec.n_accepted.to_string(), sorted.len().to_string()];
            row.extend(QUANTILES.iter().map(|&q| {
                if sorted.is_empty() {
                    String::new()
                } else {
                    order_stat(&sorted, q).to_string()
                }
            }));
            row
        })
        .collect();
    (header, rows)
}

fn resolve_epsilon(cfg: &RunConfig, model: &ModelSpec) -> Result<f64, HarnessError> {
    match (&cfg.calibration, cfg.epsilon) {
        (Some(cal), _) => {
            let prior = model.prior().to_moments().map_err(ModelError::from)?;
            let records = pilot_records(model, &prior, &cfg.distance(), cal.draws_per_site, cfg.use_qmc, cfg.seed);
            Ok(calibrate_epsilon(&records, cal.floor)?)
        }
        (None, Some(eps)) => Ok(eps),
        (None, None) => Err(ConfigError::field("epsilon", "missing").into()),
    }
}

/// Run EP with the estimator `cfg` selects, under an explicit schedule and seed.
pub fn execute(
    cfg: &RunConfig,
    model: &ModelSpec,
    epsilon: f64,
    schedule: Schedule,
    seed: u64,
) -> Result<(EpTrace, Option<RecycleDiagnostics>), HarnessError> {
    if !cfg.distance_weights.is_empty() && cfg.distance_weights.len() != model.summary_dim() {
        return Err(ConfigError::field(
            "distance_weights",
            format!("expected {} weights, got {}", model.summary_dim(), cfg.distance_weights.len()),
        )
        .into());
    }
    let abc = AbcConfig {
        epsilon,
        m_target: cfg.m_target,
        m_max: cfg.m_max,
        use_qmc: cfg.use_qmc,
        distance: cfg.distance(),
    };
    if cfg.use_recycling {
        let est = RecyclingEstimator::new(abc, cfg.pool_size.unwrap_or(cfg.m_max), cfg.ess_threshold);
        let trace = engine::run(model, &est, schedule, &cfg.policy(), seed)?;
        Ok((trace, Some(est.diagnostics())))
    } else {
        let est = RejectionAbc::new(abc);
        Ok((engine::run(model, &est, schedule, &cfg.policy(), seed)?, None))
    }
}

/// Run a validated config and write `trace.csv`, `final.json` and
/// `acceptance.csv` (plus `timing.csv` when requested) to its output dir.
/// Engine errors are recorded in `final.json` before being returned.
pub fn run_config(cfg: &RunConfig, base: &Path) -> Result<RunReport, HarnessError> {
    let out = resolve(base, &cfg.output_dir);
    fs::create_dir_all(&out).map_err(|e| output_err(&out, e))?;
    let final_path = out.join("final.json");

    let outcome = build_model(&cfg.model, base).and_then(|model| {
        let eps = resolve_epsilon(cfg, &model)?;
        let (trace, diag) = execute(cfg, &model, eps, cfg.schedule, cfg.seed)?;
        Ok((model, eps, trace, diag))
    });
    let (model, epsilon, trace, diag) = match outcome {
        Ok(v) => v,
        Err(e) => {
            let summary = FinalSummary {
                mu: None,
                sigma: None,
                r: None,
                q: None,
                converged: false,
                termination: None,
                passes: 0,
                total_simulated: 0,
                epsilon: cfg.epsilon,
                seed: cfg.seed,
                recycling: None,
                error: Some(e.to_string()),
                config: cfg,
            };
            write_json(&final_path, &summary)?;
            return Err(e);
        }
    };

    let p = model.theta_dim();
    let (header, rows) = trace_rows(&trace, p);
    write_csv(&out.join("trace.csv"), &header, &rows)?;
    let (header, rows) = acceptance_rows(&trace.acceptance);
    write_csv(&out.join("acceptance.csv"), &header, &rows)?;
    if cfg.record_timing {
        let header: Vec<String> = ["pass", "site", "elapsed_us"].iter().map(|s| s.to_string()).collect();
        let rows: Vec<Vec<String>> = trace
            .records
            .iter()
            .map(|r| vec![(r.pass + 1).to_string(), r.site.to_string(), r.elapsed.as_micros().to_string()])
            .collect();
        write_csv(&out.join("timing.csv"), &header, &rows)?;
    }

    let posterior = trace.posterior().ok();
    let global = trace.state.global();
    let summary = FinalSummary {
        mu: posterior.as_ref().map(|m| m.mean().iter().copied().collect()),
        sigma: posterior.as_ref().map(|m| rows_of(m.cov())),
        r: Some(global.r().iter().copied().collect()),
        q: Some(rows_of(global.q())),
        converged: trace.converged(),
        termination: Some(trace.termination),
        passes: trace.passes,
        total_simulated: trace.total_simulated,
        epsilon: Some(epsilon),
        seed: cfg.seed,
        recycling: diag.as_ref().map(|d| RecyclingSummary {
            ess_history: d.ess_history.clone(),
            refreshes: d.refreshes,
            pool_simulations: d.simulations,
        }),
        error: None,
        config: cfg,
    };
    write_json(&final_path, &summary)?;
    Ok(RunReport { trace, epsilon, recycling: diag, output_dir: out })
}

/// Load, validate and run the config at `path`.
pub fn run_from_config(path: &Path) -> Result<RunReport, HarnessError> {
    let cfg = RunConfig::load(path)?;
    run_config(&cfg, &base_dir(path))
}

// ---------------------------------------------------------------------------
// Schedule comparison

/// Posterior-mean trajectory of one (schedule, seed) run, one entry per pass
/// starting from the prior (pass 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub schedule: Schedule,
    pub seed: u64,
    pub means: Vec<Option<Vec<f64>>>,
}

/// Run the config's model under each schedule and seed, sharing one model
/// and one ε, and collect per-pass posterior means.
pub fn schedule_trajectories(
    cfg: &RunConfig,
    base: &Path,
    schedules: &[Schedule],
    seeds: &[u64],
) -> Result<Vec<Trajectory>, HarnessError> {
    if schedules.is_empty() {
        return Err(ConfigError::field("compare.schedules", "must not be empty").into());
    }
    let model = build_model(&cfg.model, base)?;
    let eps = resolve_epsilon(cfg, &model)?;
    let mut out = Vec::with_capacity(schedules.len() * seeds.len());
    for &seed in seeds {
        for &schedule in schedules {
            let (trace, _) = execute(cfg, &model, eps, schedule, seed)?;
            let means = trace
                .pass_means(model.prior())
                .into_iter()
                .map(|m| m.map(|v| v.iter().copied().collect()))
                .collect();
            out.push(Trajectory { schedule, seed, means });
        }
    }
    Ok(out)
}

/// Run the `[compare]` section of the config at `path` and write
/// `compare.csv` (schedule, seed, pass, mu_*) to the output dir.
pub fn compare_schedules(path: &Path) -> Result<PathBuf, HarnessError> {
    let cfg = RunConfig::load(path)?;
    let base = base_dir(path);
    let cmp = cfg.compare.clone().ok_or_else(|| ConfigError::field("compare", "missing section"))?;
    let seeds = if cmp.seeds.is_empty() { vec![cfg.seed] } else { cmp.seeds.clone() };
    let trajectories = schedule_trajectories(&cfg, &base, &cmp.schedules, &seeds)?;
    let out = resolve(&base, &cfg.output_dir);
    fs::create_dir_all(&out).map_err(|e| output_err(&out, e))?;
    let path = out.join("compare.csv");
    write_csv(&path, &trajectory_header(&trajectories), &trajectory_rows(&trajectories))?;
    Ok(path)
}

fn trajectory_header(trajectories: &[Trajectory]) -> Vec<String> {
    let p = trajectories.iter().flat_map(|t| t.means.iter().flatten()).map(Vec::len).next().unwrap_or(0);
    let mut header: Vec<String> = ["schedule", "seed", "pass"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=p).map(|j| format!("mu_{j}")));
    header
}

fn trajectory_rows(trajectories: &[Trajectory]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for t in trajectories {
        for (pass, m) in t.means.iter().enumerate() {
            let mut row = vec![t.schedule.label(), t.seed.to_string(), pass.to_string()];
            if let Some(m) = m {
                row.extend(m.iter().map(|v| v.to_string()));
            }
            rows.push(row);
        }
    }
    rows
}

// ---------------------------------------------------------------------------
// Heat map

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
    /// Space points evenly in log scale instead of linearly.
    #[serde(default)]
    pub log: bool,
}

impl GridAxis {
    fn validate(&self, name: &str) -> Result<(), ConfigError> {
        if !(self.min > 0.0 && self.max >= self.min && self.max.is_finite()) {
            return Err(ConfigError::field(name, "need 0 < min <= max"));
        }
        if self.steps == 0 {
            return Err(ConfigError::field(&format!("{name}.steps"), "must be positive"));
        }
        if self.steps == 1 && self.max != self.min {
            return Err(ConfigError::field(&format!("{name}.steps"), "a single step needs min == max"));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.min];
        }
        let last = (self.steps - 1) as f64;
        (0..self.steps)
            .map(|k| {
                let t = k as f64 / last;
                if k + 1 == self.steps {
                    self.max
                } else if self.log {
                    (self.min.ln() + t * (self.max.ln() - self.min.ln())).exp()
                } else {
                    self.min + t * (self.max - self.min)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapConfig {
    /// CSV path, relative to the config file.
    pub output: PathBuf,
    /// `(ν₀, c₀)`.
    pub reference: [f64; 2],
    pub nu: GridAxis,
    pub c: GridAxis,
    pub h_max: f64,
    pub n_quad: usize,
}

impl HeatmapConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.reference.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(ConfigError::field("reference", "nu and c must be positive"));
        }
        self.nu.validate("nu")?;
        self.c.validate("c")?;
        if !(self.h_max > 0.0 && self.h_max.is_finite()) {
            return Err(ConfigError::field("h_max", "must be positive"));
        }
        if self.n_quad < 2 {
            return Err(ConfigError::field("n_quad", "need at least 2 nodes"));
        }
        Ok(())
    }

    /// `(ν, c, log ν, log c, value)` rows, `ν` outermost.
    pub fn rows(&self) -> Vec<[f64; 5]> {
        let nus = self.nu.points();
        let cs = self.c.points();
        let grid = correlation_distance_grid(&nus, &cs, (self.reference[0], self.reference[1]), self.h_max, self.n_quad);
        let mut rows = Vec::with_capacity(nus.len() * cs.len());
        for (i, &nu) in nus.iter().enumerate() {
            for (j, &c) in cs.iter().enumerate() {
                rows.push([nu, c, nu.ln(), c.ln(), grid[(i, j)]]);
            }
        }
        rows
    }
}

/// Evaluate the correlation-distance grid described at `path` and write it
/// as CSV; returns the CSV path.
pub fn emit_heatmap(path: &Path) -> Result<PathBuf, HarnessError> {
    let cfg = HeatmapConfig::from_toml_str(&read_text(path)?)?;
    let out = resolve(&base_dir(path), &cfg.output);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(|e| output_err(dir, e))?;
    }
    let header: Vec<String> = ["nu", "c", "log_nu", "log_c", "value"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = cfg.rows().iter().map(|r| r.iter().map(|v| v.to_string()).collect()).collect();
    write_csv(&out, &header, &rows)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
output_dir = "out"
epsilon = 0.1
m_target = 50
m_max = 5000

[model]
kind = "gauss_mean"
synthetic = { n = 5, true_mean = 1.0, data_seed = 2 }
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::from_toml_str(BASE).unwrap();
        assert_eq!(cfg.schedule, Schedule::Sequential);
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.ess_threshold, 0.5);
        cfg.validate(Path::new(".")).unwrap();
    }

    #[test]
    fn block_parallel_schedule_parses() {
        let text = format!("{BASE}\n[schedule]\nkind = \"block_parallel\"\nn_core = 4\n");
        let cfg = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.schedule, Schedule::BlockParallel { n_core: 4 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = BASE.replace("epsilon = 0.1", "epsilom = 0.1");
        let err = RunConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("epsilom"), "{err}");
        let text = BASE.replace("data_seed = 2", "data_seed = 2, extra = 1");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn alpha_zero_names_alpha() {
        let text = format!("alpha = 0.0\n{BASE}");
        let cfg = RunConfig::from_toml_str(&text).unwrap();
        let err = cfg.validate(Path::new(".")).unwrap_err();
        assert_eq!(err.field_path(), Some("alpha"));
    }

    #[test]
    fn missing_data_file_is_a_config_error() {
        let text = BASE.replace("synthetic = { n = 5, true_mean = 1.0, data_seed = 2 }", "data = \"nope.csv\"");
        let cfg = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.validate(Path::new("/nonexistent")).unwrap_err().field_path(), Some("model.data"));
    }

    #[test]
    fn epsilon_and_calibration_are_exclusive() {
        let text = format!("{BASE}\n[calibration]\nfloor = 0.05\ndraws_per_site = 100\n");
        let cfg = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.validate(Path::new(".")).unwrap_err().field_path(), Some("epsilon"));
    }

    #[test]
    fn axis_points() {
        let lin = GridAxis { min: 2.0, max: 14.0, steps: 7, log: false };
        assert_eq!(lin.points(), vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0]);
        let lg = GridAxis { min: 1.0, max: 100.0, steps: 3, log: true };
        let pts = lg.points();
        assert!((pts[1] - 10.0).abs() < 1e-12 && pts[2] == 100.0);
    }

    #[test]
    fn single_cell_grid_at_reference() {
        let cfg = HeatmapConfig {
            output: "h.csv".into(),
            reference: [8.0, 4.0],
            nu: GridAxis { min: 8.0, max: 8.0, steps: 1, log: false },
            c: GridAxis { min: 4.0, max: 4.0, steps: 1, log: false },
            h_max: 30.0,
            n_quad: 50,
        };
        assert_eq!(cfg.rows(), vec![[8.0, 4.0, 8.0_f64.ln(), 4.0_f64.ln(), 0.0]]);
    }
}
