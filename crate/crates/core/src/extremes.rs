//! Max-stable spatial extremes.
//!
//! Realizations follow the spectral construction
//! `Y(x) = max_k s_k · max(0, Z_k(x))`, with `(s_k)` a Poisson process of
//! intensity `μ⁻¹ s⁻² ds` and `Z_k` IID unit-variance Gaussian fields with
//! Whittle-Matérn correlation. Marginals are unit Fréchet. Each replicate is
//! summarized by the OLS fit of the F-madogram against log distance.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::bessel::ln_bessel_k;
use crate::gauss::{cholesky, MomentParams};
use crate::model::{ChunkSimulator, ModelError, ModelSpec, SimulationFailure};
use crate::rng::{Purpose, StreamKey};

/// `E[max(0, Z)]` for a standard normal `Z`.
pub const POSITIVE_PART_MEAN: f64 = 0.398_942_280_401_432_7;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtremesError {
    #[error("station layout needs at least one station")]
    NoStations,
    #[error("stations {0} and {1} coincide")]
    DuplicateStations(usize, usize),
    #[error("non-finite station coordinate")]
    BadCoordinate,
    #[error("invalid correlation parameters nu={nu}, c={c}")]
    BadCorrelation { nu: f64, c: f64 },
    #[error("correlation matrix not factorizable even with jitter {JITTER_MAX}")]
    FactorizationFailure,
    #[error("value {0} outside the Fréchet support")]
    OutsideSupport(f64),
    #[error("regression design is degenerate ({usable} usable pairs)")]
    DegenerateDesign { usable: usize },
    #[error("replicate has {got} values for {expected} stations")]
    ReplicateLength { expected: usize, got: usize },
}

/// Whittle-Matérn correlation `2^{1−ν}/Γ(ν) (h/c)^ν K_ν(h/c)`, with `ρ(0) = 1`.
pub fn whittle_matern(h: f64, nu: f64, c: f64) -> f64 {
    if h == 0.0 {
        return 1.0;
    }
    let z = h.abs() / c;
    let log_rho = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * z.ln() + ln_bessel_k(nu, z);
    log_rho.exp().clamp(0.0, 1.0)
}

/// `θ = (log ν, log c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationModel {
    pub log_nu: f64,
    pub log_c: f64,
}

impl CorrelationModel {
    pub fn new(log_nu: f64, log_c: f64) -> Self {
        Self { log_nu, log_c }
    }

    pub fn from_natural_scale(nu: f64, c: f64) -> Self {
        Self { log_nu: nu.ln(), log_c: c.ln() }
    }

    pub fn nu(&self) -> f64 {
        self.log_nu.exp()
    }

    pub fn c(&self) -> f64 {
        self.log_c.exp()
    }

    fn validated(&self) -> Result<(f64, f64), ExtremesError> {
        let (nu, c) = (self.nu(), self.c());
        if nu.is_finite() && c.is_finite() && nu > 0.0 && c > 0.0 {
            Ok((nu, c))
        } else {
            Err(ExtremesError::BadCorrelation { nu, c })
        }
    }

    pub fn rho(&self, h: f64) -> f64 {
        whittle_matern(h, self.nu(), self.c())
    }
}

/// Station coordinates with precomputed pairwise (log) distances, pairs
/// ordered `(0,1), (0,2), …, (1,2), …`.
#[derive(Debug, Clone, PartialEq)]
pub struct StationLayout {
    coords: Vec<[f64; 2]>,
    dists: Vec<f64>,
    log_dists: Vec<f64>,
}

impl StationLayout {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self, ExtremesError> {
        if coords.is_empty() {
            return Err(ExtremesError::NoStations);
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ExtremesError::BadCoordinate);
        }
        let d = coords.len();
        let mut dists = Vec::with_capacity(d * (d - 1) / 2);
        for j in 0..d {
            for k in (j + 1)..d {
                let h = (coords[j][0] - coords[k][0]).hypot(coords[j][1] - coords[k][1]);
                if h <= 0.0 {
                    return Err(ExtremesError::DuplicateStations(j, k));
                }
                dists.push(h);
            }
        }
        let log_dists = dists.iter().map(|h| h.ln()).collect();
        Ok(Self { coords, dists, log_dists })
    }

    /// `d` stations uniformly placed in `[0, extent]²`.
    pub fn random(d: usize, extent: f64, seed: u64) -> Result<Self, ExtremesError> {
        let mut rng = StreamKey::new(seed, 0, 0, Purpose::Other(17)).draw_rng(0);
        let coords = (0..d).map(|_| [rng.random::<f64>() * extent, rng.random::<f64>() * extent]).collect();
        Self::new(coords)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn pair_distances(&self) -> &[f64] {
        &self.dists
    }

    pub fn pair_log_distances(&self) -> &[f64] {
        &self.log_dists
    }
}

/// Unit-variance Gaussian field at the stations, factorized once per θ.
#[derive(Debug, Clone)]
pub struct CorrelatedField {
    chol: DMatrix<f64>,
    jitter: f64,
}

impl CorrelatedField {
    pub fn new(layout: &StationLayout, corr: &CorrelationModel) -> Result<Self, ExtremesError> {
        let (nu, c) = corr.validated()?;
        let d = layout.len();
        let mut matrix = DMatrix::identity(d, d);
        let mut pair = 0;
        for j in 0..d {
            for k in (j + 1)..d {
                let rho = whittle_matern(layout.dists[pair], nu, c);
                matrix[(j, k)] = rho;
                matrix[(k, j)] = rho;
                pair += 1;
            }
        }
        let mut jitter = JITTER_START;
        while jitter <= JITTER_MAX * (1.0 + 1e-9) {
            let mut m = matrix.clone();
            for j in 0..d {
                m[(j, j)] += jitter;
            }
            if let Some(ch) = cholesky(&m) {
                return Ok(Self { chol: ch.l(), jitter });
            }
            jitter *= 10.0;
        }
        Err(ExtremesError::FactorizationFailure)
    }

    pub fn dim(&self) -> usize {
        self.chol.nrows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.chol * z
    }
}

/// One draw of the Gaussian field at the stations.
pub fn gp_sample(
    layout: &StationLayout,
    corr: &CorrelationModel,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>, ExtremesError> {
    Ok(CorrelatedField::new(layout, corr)?.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaxStableConfig {
    /// Hard bound on Poisson spikes per realization.
    pub spike_cap: usize,
    /// Stop once `s_k · tail_factor` drops below the smallest running maximum.
    pub tail_factor: f64,
}

impl Default for MaxStableConfig {
    fn default() -> Self {
        Self { spike_cap: 10_000, tail_factor: 5.0 }
    }
}

/// One max-stable realization at the stations of `field`.
///
/// Spikes arrive in decreasing order, `s_k = 1/(μ Γ_k)` with `Γ_k` the
/// partial sums of standard exponentials.
pub fn simulate_maxstable(field: &CorrelatedField, cfg: &MaxStableConfig, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let d = field.dim();
    let mut y = DVector::zeros(d);
    let mut arrival = 0.0;
    let mut floor = 0.0;
    for _ in 0..cfg.spike_cap {
        arrival += rng.sample::<f64, _>(Exp1);
        let spike = 1.0 / (POSITIVE_PART_MEAN * arrival);
        if spike * cfg.tail_factor < floor {
            break;
        }
        let z = field.sample(rng);
        for j in 0..d {
            let v = spike * z[j].max(0.0);
            if v > y[j] {
                y[j] = v;
            }
        }
        floor = y.min();
    }
    y
}

/// Unit Fréchet CDF.
pub fn frechet_cdf(y: f64) -> f64 {
    (-1.0 / y).exp()
}

/// OLS intercept and slope of `log|F(y_j) − F(y_k)|` on `log‖x_j − x_k‖`.
/// Pairs with tied `F` values are dropped.
pub fn fmadogram_summary(y: &[f64], layout: &StationLayout) -> Result<[f64; 2], ExtremesError> {
    if y.len() != layout.len() {
        return Err(ExtremesError::ReplicateLength { expected: layout.len(), got: y.len() });
    }
    if let Some(&bad) = y.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(ExtremesError::OutsideSupport(bad));
    }
    let f: Vec<f64> = y.iter().map(|&v| frechet_cdf(v)).collect();
    let d = y.len();
    let mut xs = Vec::with_capacity(layout.log_dists.len());
    let mut ys = Vec::with_capacity(layout.log_dists.len());
    let mut pair = 0;
    for j in 0..d {
        for k in (j + 1)..d {
            let diff = (f[j] - f[k]).abs();
            if diff > 0.0 {
                xs.push(layout.log_dists[pair]);
                ys.push(diff.ln());
            }
            pair += 1;
        }
    }
    let usable = xs.len();
    if usable < 2 {
        return Err(ExtremesError::DegenerateDesign { usable });
    }
    let n = usable as f64;
    let x_bar = xs.iter().sum::<f64>() / n;
    let y_bar = ys.iter().sum::<f64>() / n;
    let (sxx, sxy) = xs.iter().zip(&ys).fold((0.0, 0.0), |(sxx, sxy), (x, y)| {
        let dx = x - x_bar;
        (sxx + dx * dx, sxy + dx * (y - y_bar))
    });
    if !(sxx > 1e-12 * n) {
        return Err(ExtremesError::DegenerateDesign { usable });
    }
    let slope = sxy / sxx;
    Ok([y_bar - slope * x_bar, slope])
}

/// `∫₀^{h_max} |ρ_{ν,c}(h) − ρ_{ν₀,c₀}(h)| dh` by the trapezoid rule on
/// `n_quad` equispaced nodes, for every `(ν, c)` in `nus × cs`. Rows index
/// `nus`, columns `cs`.
pub fn correlation_distance_grid(nus: &[f64], cs: &[f64], reference: (f64, f64), h_max: f64, n_quad: usize) -> DMatrix<f64> {
    assert!(n_quad >= 2, "trapezoid rule needs two nodes");
    let step = h_max / (n_quad - 1) as f64;
    let nodes: Vec<f64> = (0..n_quad).map(|k| k as f64 * step).collect();
    let base: Vec<f64> = nodes.iter().map(|&h| whittle_matern(h, reference.0, reference.1)).collect();
    DMatrix::from_fn(nus.len(), cs.len(), |r, col| {
        let vals: Vec<f64> =
            nodes.iter().zip(&base).map(|(&h, b)| (whittle_matern(h, nus[r], cs[col]) - b).abs()).collect();
        let inner: f64 = vals[1..n_quad - 1].iter().sum();
        step * (inner + 0.5 * (vals[0] + vals[n_quad - 1]))
    })
}

// ---------------------------------------------------------------------------
// ModelSpec adapter

struct ExtremesSimulator {
    layout: Arc<StationLayout>,
    cfg: MaxStableConfig,
}

impl ChunkSimulator for ExtremesSimulator {
    fn theta_dim(&self) -> usize {
        2
    }

    fn summary_dim(&self) -> usize {
        2
    }

    fn simulate(&self, theta: &[f64], _: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, SimulationFailure> {
        let corr = CorrelationModel::new(theta[0], theta[1]);
        let field = CorrelatedField::new(&self.layout, &corr).map_err(|e| SimulationFailure(e.to_string()))?;
        let y = simulate_maxstable(&field, &self.cfg, rng);
        fmadogram_summary(y.as_slice(), &self.layout)
            .map(|s| s.to_vec())
            .map_err(|e| SimulationFailure(e.to_string()))
    }
}

/// Max-stable model over a station layout, one replicate per chunk.
#[derive(Debug, Clone)]
pub struct SpatialExtremes {
    pub layout: Arc<StationLayout>,
    pub cfg: MaxStableConfig,
    pub prior: MomentParams,
    pub replicates: Vec<Vec<f64>>,
}

impl SpatialExtremes {
    pub fn new(layout: StationLayout, cfg: MaxStableConfig, prior: MomentParams, replicates: Vec<Vec<f64>>) -> Self {
        Self { layout: Arc::new(layout), cfg, prior, replicates }
    }

    /// `n` replicates simulated at `truth`.
    pub fn synthetic_replicates(
        layout: &StationLayout,
        truth: &CorrelationModel,
        cfg: &MaxStableConfig,
        n: usize,
        data_seed: u64,
    ) -> Result<Vec<Vec<f64>>, ExtremesError> {
        let field = CorrelatedField::new(layout, truth)?;
        let key = StreamKey::new(data_seed, 0, 0, Purpose::SyntheticData);
        Ok((0..n as u64).map(|k| simulate_maxstable(&field, cfg, &mut key.draw_rng(k)).as_slice().to_vec()).collect())
    }

    pub fn model(&self) -> Result<ModelSpec, ModelError> {
        if self.layout.len() < 3 {
            return Err(ModelError::Invalid("the madogram regression needs at least 3 stations".into()));
        }
        if !(self.cfg.tail_factor > 0.0) || self.cfg.spike_cap == 0 {
            return Err(ModelError::Invalid("tail_factor and spike_cap must be positive".into()));
        }
        let observed = self
            .replicates
            .iter()
            .enumerate()
            .map(|(k, y)| {
                fmadogram_summary(y, &self.layout)
                    .map(|s| s.to_vec())
                    .map_err(|e| ModelError::Invalid(format!("replicate {}: {e}", k + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let contexts = vec![Vec::new(); observed.len()];
        let sim = ExtremesSimulator { layout: Arc::clone(&self.layout), cfg: self.cfg };
        ModelSpec::new("spatial_extremes", Arc::new(sim), self.prior.to_natural()?, observed, contexts, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matern_zero_lag_and_exponential_case() {
        assert_eq!(whittle_matern(0.0, 2.3, 1.7), 1.0);
        let v = whittle_matern(3.0, 0.5, 3.0);
        assert!((v / (-1.0_f64).exp() - 1.0).abs() < 1e-12);
        assert!((v - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn duplicate_stations_rejected() {
        assert_eq!(
            StationLayout::new(vec![[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]]),
            Err(ExtremesError::DuplicateStations(0, 2))
        );
        assert_eq!(StationLayout::new(vec![]), Err(ExtremesError::NoStations));
    }

    #[test]
    fn tied_values_are_degenerate() {
        let layout = StationLayout::new(vec![[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]).unwrap();
        assert!(matches!(
            fmadogram_summary(&[2.0, 2.0, 2.0], &layout),
            Err(ExtremesError::DegenerateDesign { usable: 0 })
        ));
        assert!(matches!(fmadogram_summary(&[2.0, 0.0, 1.0], &layout), Err(ExtremesError::OutsideSupport(_))));
    }

    #[test]
    fn matches_normal_equations() {
        // distances 1, 3, 2
        let layout = StationLayout::new(vec![[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]).unwrap();
        let fs = [0.5, 0.42, 0.61];
        let y: Vec<f64> = fs.iter().map(|f: &f64| -1.0 / f.ln()).collect();
        let got = fmadogram_summary(&y, &layout).unwrap();
        let xs = layout.pair_log_distances();
        let ys = [(fs[0] - fs[1]).abs().ln(), (fs[0] - fs[2]).abs().ln(), (fs[1] - fs[2]).abs().ln()];
        let design = DMatrix::from_fn(3, 2, |r, c| if c == 0 { 1.0 } else { xs[r] });
        let rhs = DVector::from_column_slice(&ys);
        let normal = design.transpose() * &design;
        let sol = normal.lu().solve(&(design.transpose() * rhs)).unwrap();
        assert!((got[0] - sol[0]).abs() < 1e-12 && (got[1] - sol[1]).abs() < 1e-12);
    }

    #[test]
    fn grid_is_zero_at_reference() {
        let g = correlation_distance_grid(&[8.0], &[4.0], (8.0, 4.0), 30.0, 100);
        assert_eq!(g[(0, 0)], 0.0);
    }

    #[test]
    fn small_jitter_suffices_for_moderate_layouts() {
        let layout = StationLayout::random(10, 50.0, 3).unwrap();
        let f = CorrelatedField::new(&layout, &CorrelationModel::from_natural_scale(8.0, 4.0)).unwrap();
        assert!(f.jitter() <= JITTER_MAX);
    }
}
