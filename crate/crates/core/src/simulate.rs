//! Moving-average random fields on the lattice and a Monte Carlo harness.
//!
//! Every field is a finite-range moving average: iid innovations on a
//! padded lattice are summed over the `(2ℓ+1)²` box around each site, so
//! values more than `2ℓ` apart in either coordinate are independent. The
//! regime field sums Uniform(0,1) innovations, standardises the sum and maps
//! it through the normal CDF, giving values in (0,1) with a (near) uniform
//! marginal. Covariate fields sum standard normal innovations and are
//! rescaled to unit variance. Errors are iid.
//!
//! Each field draws from its own ChaCha stream keyed by the seed, so a
//! dataset is a pure function of its configuration.

use crate::bandwidth::{select_bandwidth, CvConfig};
use crate::dataset::{Observation, Site, SpatialDataset, INTERCEPT};
use crate::detrend::{default_trend_bandwidth, detrend_dataset, estimate_trend};
use crate::inference::{bands, VarianceMode};
use crate::kernels::TrendKernelSpec;
use crate::localfit::{fit_curve, FitConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};
use std::f64::consts::PI;
use std::str::FromStr;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidConfig(msg.into())
}

/// Coefficient function of the regime variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaFn {
    Constant { a: f64 },
    /// `a + b u`
    Linear { a: f64, b: f64 },
    /// `amp · sin(2π · freq · u)`
    Sine { amp: f64, freq: f64 },
    /// `a + b u + c u²`
    Quadratic { a: f64, b: f64, c: f64 },
}

impl BetaFn {
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            BetaFn::Constant { a } => a,
            BetaFn::Linear { a, b } => a + b * u,
            BetaFn::Sine { amp, freq } => amp * (2.0 * PI * freq * u).sin(),
            BetaFn::Quadratic { a, b, c } => a + b * u + c * u * u,
        }
    }

    pub fn second_derivative(&self, u: f64) -> f64 {
        match *self {
            BetaFn::Constant { .. } | BetaFn::Linear { .. } => 0.0,
            BetaFn::Sine { amp, freq } => -amp * (2.0 * PI * freq).powi(2) * (2.0 * PI * freq * u).sin(),
            BetaFn::Quadratic { c, .. } => 2.0 * c,
        }
    }
}

fn params(body: Option<&str>, n: usize, defaults: &[f64]) -> Result<Vec<f64>, SimError> {
    let Some(body) = body else { return Ok(defaults.to_vec()) };
    let v: Vec<f64> = body
        .split([',', ':'])
        .map(|s| s.trim().parse::<f64>().map_err(|_| invalid(format!("bad number {s:?}"))))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(invalid(format!("expected {n} parameters, got {}", v.len())));
    }
    Ok(v)
}

/// Splits `name(p, q)` or `name:p:q` into the name and parameter text.
fn split_call(s: &str) -> (&str, Option<&str>) {
    let s = s.trim();
    if let (Some(open), true) = (s.find('('), s.ends_with(')')) {
        return (&s[..open], Some(&s[open + 1..s.len() - 1]));
    }
    match s.split_once(':') {
        Some((name, rest)) => (name, Some(rest)),
        None => (s, None),
    }
}

impl FromStr for BetaFn {
    type Err = SimError;

    /// `constant`, `linear`, `sine`, `quadratic`, optionally with parameters
    /// as `sine(0.5,1)` or `sine:0.5:1`.
    fn from_str(s: &str) -> Result<Self, SimError> {
        let (name, body) = split_call(s);
        Ok(match name {
            "constant" => {
                let p = params(body, 1, &[1.0])?;
                BetaFn::Constant { a: p[0] }
            }
            "linear" => {
                let p = params(body, 2, &[1.0, 0.5])?;
                BetaFn::Linear { a: p[0], b: p[1] }
            }
            "sine" => {
                let p = params(body, 2, &[1.0, 1.0])?;
                BetaFn::Sine { amp: p[0], freq: p[1] }
            }
            "quadratic" => {
                let p = params(body, 3, &[0.0, 0.0, 1.0])?;
                BetaFn::Quadratic { a: p[0], b: p[1], c: p[2] }
            }
            other => return Err(invalid(format!("unknown coefficient function {other:?}"))),
        })
    }
}

/// Splits a comma-separated list at top level, leaving commas inside parentheses.
pub fn split_list(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(s[start..].trim());
    out.into_iter().filter(|p| !p.is_empty()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorDist {
    Gaussian { sigma: f64 },
    StudentT { df: f64, scale: f64 },
    /// Gaussian with standard deviation `sigma0 + sigma1 · u`.
    Heteroscedastic { sigma0: f64, sigma1: f64 },
}

impl ErrorDist {
    fn validate(&self) -> Result<(), SimError> {
        let ok = match *self {
            ErrorDist::Gaussian { sigma } => sigma >= 0.0 && sigma.is_finite(),
            ErrorDist::StudentT { df, scale } => df > 0.0 && df.is_finite() && scale >= 0.0 && scale.is_finite(),
            ErrorDist::Heteroscedastic { sigma0, sigma1 } => sigma0 >= 0.0 && sigma0 + sigma1 >= 0.0 && sigma1.is_finite(),
        };
        ok.then_some(()).ok_or_else(|| invalid(format!("bad error distribution {self:?}")))
    }

    /// Unshifted draw.
    fn sample(&self, rng: &mut ChaCha8Rng, u: f64) -> f64 {
        match *self {
            ErrorDist::Gaussian { sigma } => sigma * rng.sample::<f64, _>(StandardNormal),
            ErrorDist::StudentT { df, scale } => scale * rng.sample::<f64, _>(StudentT::new(df).expect("validated")),
            ErrorDist::Heteroscedastic { sigma0, sigma1 } => (sigma0 + sigma1 * u) * rng.sample::<f64, _>(StandardNormal),
        }
    }

    /// `τ`-quantile of the unshifted error at regime value `u`.
    pub fn quantile(&self, tau: f64, u: f64) -> f64 {
        let z = Normal::standard().inverse_cdf(tau);
        match *self {
            ErrorDist::Gaussian { sigma } => sigma * z,
            ErrorDist::StudentT { df, scale } => scale * student_t_quantile(df, tau),
            ErrorDist::Heteroscedastic { sigma0, sigma1 } => (sigma0 + sigma1 * u) * z,
        }
    }

    /// CDF of the unshifted error at regime value `u`.
    pub fn cdf(&self, x: f64, u: f64) -> f64 {
        let std_normal = |s: f64| if s > 0.0 { Normal::standard().cdf(x / s) } else if x >= 0.0 { 1.0 } else { 0.0 };
        match *self {
            ErrorDist::Gaussian { sigma } => std_normal(sigma),
            ErrorDist::StudentT { df, scale } => {
                if scale > 0.0 {
                    StudentsT::new(0.0, 1.0, df).expect("validated").cdf(x / scale)
                } else {
                    std_normal(0.0)
                }
            }
            ErrorDist::Heteroscedastic { sigma0, sigma1 } => std_normal(sigma0 + sigma1 * u),
        }
    }

    /// Density at zero of the error shifted to have `τ`-quantile zero.
    pub fn density_at_quantile(&self, tau: f64, u: f64) -> f64 {
        let q = self.quantile(tau, u);
        match *self {
            ErrorDist::Gaussian { sigma } => Normal::new(0.0, sigma).map(|n| n.pdf(q)).unwrap_or(f64::INFINITY),
            ErrorDist::StudentT { df, scale } => StudentsT::new(0.0, scale, df).map(|t| t.pdf(q)).unwrap_or(f64::INFINITY),
            ErrorDist::Heteroscedastic { sigma0, sigma1 } => {
                Normal::new(0.0, sigma0 + sigma1 * u).map(|n| n.pdf(q)).unwrap_or(f64::INFINITY)
            }
        }
    }
}

/// Student-t quantile refined by Newton steps on the CDF.
fn student_t_quantile(df: f64, tau: f64) -> f64 {
    let t = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let mut x = t.inverse_cdf(tau);
    for _ in 0..4 {
        let step = (t.cdf(x) - tau) / t.pdf(x);
        if !step.is_finite() {
            break;
        }
        x -= step;
    }
    x
}

impl FromStr for ErrorDist {
    type Err = SimError;

    /// `gaussian:σ`, `student_t:df[:scale]`, `hetero:σ0:σ1`.
    fn from_str(s: &str) -> Result<Self, SimError> {
        let (name, body) = split_call(s);
        let d = match name {
            "gaussian" | "normal" => {
                let p = params(body, 1, &[1.0])?;
                ErrorDist::Gaussian { sigma: p[0] }
            }
            "student_t" | "t" => {
                let n = body.map_or(1, |b| b.split([',', ':']).count());
                let p = params(body, n.clamp(1, 2), &[3.0])?;
                ErrorDist::StudentT { df: p[0], scale: p.get(1).copied().unwrap_or(1.0) }
            }
            "hetero" | "heteroscedastic" => {
                let p = params(body, 2, &[0.5, 1.0])?;
                ErrorDist::Heteroscedastic { sigma0: p[0], sigma1: p[1] }
            }
            other => return Err(invalid(format!("unknown error distribution {other:?}"))),
        };
        d.validate()?;
        Ok(d)
    }
}

/// Polynomial `Σ c · s1^p · s2^q` in the rescaled location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Polynomial {
    pub terms: Vec<(f64, u32, u32)>,
}

impl Polynomial {
    pub fn eval(&self, s: &[f64]) -> f64 {
        self.terms.iter().map(|&(c, p, q)| c * s[0].powi(p as i32) * s[1].powi(q as i32)).sum()
    }
}

/// Deterministic trends added to the stationary fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trends {
    pub y: Polynomial,
    /// One per non-intercept covariate.
    pub x: Vec<Polynomial>,
    pub u: Polynomial,
}

impl Trends {
    /// Cubic surfaces for the response, `extra` covariates and the regime variable.
    pub fn cubic(extra: usize) -> Self {
        let p = |terms: &[(f64, u32, u32)]| Polynomial { terms: terms.to_vec() };
        Trends {
            y: p(&[(2.0, 3, 0), (-1.0, 0, 2), (1.5, 1, 1)]),
            x: (0..extra).map(|j| p(&[(1.0, 2, 1), (-0.5 * (j + 1) as f64, 0, 3), (0.5, 1, 0)])).collect(),
            u: p(&[(0.4, 3, 0), (0.3, 1, 2), (-0.2, 0, 1)]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub shape: [usize; 2],
    /// `β_r`; with an intercept the first multiplies the constant covariate.
    pub betas: Vec<BetaFn>,
    pub intercept: bool,
    /// Moving-average range `ℓ`.
    pub ma_range: usize,
    pub error: ErrorDist,
    /// Shift errors so their `τ`-quantile is zero given `U`.
    pub tau: Option<f64>,
    pub trends: Option<Trends>,
    pub seed: u64,
}

impl DgpConfig {
    pub fn new(shape: [usize; 2], betas: Vec<BetaFn>, error: ErrorDist, seed: u64) -> Self {
        DgpConfig { shape, betas, intercept: true, ma_range: 2, error, tau: None, trends: None, seed }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.shape.contains(&0) {
            return Err(invalid("shape must be positive"));
        }
        if self.betas.is_empty() {
            return Err(invalid("at least one coefficient function is required"));
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(invalid(format!("tau must lie in (0, 1), got {tau}")));
            }
        }
        if let Some(t) = &self.trends {
            if t.x.len() != self.betas.len() - usize::from(self.intercept) {
                return Err(invalid("one covariate trend per non-intercept covariate is required"));
            }
        }
        self.error.validate()
    }
}

/// The coefficient functions behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub betas: Vec<BetaFn>,
}

impl GroundTruth {
    pub fn beta(&self, u: f64) -> Vec<f64> {
        self.betas.iter().map(|b| b.eval(u)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// Observed data, trends included.
    pub dataset: SpatialDataset,
    /// Stationary fields before trends are added (present when trends are set).
    pub latent: Option<SpatialDataset>,
    pub truth: GroundTruth,
}

/// Stream ids: regime field, covariate fields from 1, errors.
const REGIME_STREAM: u64 = 0;
const ERROR_STREAM: u64 = 1 << 32;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Box sums of `(2ℓ+1)²` innovations, row-major over the lattice.
pub fn moving_average(shape: [usize; 2], range: usize, mut innovation: impl FnMut() -> f64) -> Vec<f64> {
    let (n1, n2) = (shape[0], shape[1]);
    let (p1, p2) = (n1 + 2 * range, n2 + 2 * range);
    // prefix sums with a zero border
    let mut pre = vec![0.0; (p1 + 1) * (p2 + 1)];
    for i in 0..p1 {
        for j in 0..p2 {
            let e = innovation();
            pre[(i + 1) * (p2 + 1) + j + 1] = e + pre[i * (p2 + 1) + j + 1] + pre[(i + 1) * (p2 + 1) + j] - pre[i * (p2 + 1) + j];
        }
    }
    let w = 2 * range + 1;
    let at = |i: usize, j: usize| pre[i * (p2 + 1) + j];
    let mut out = Vec::with_capacity(n1 * n2);
    for i in 0..n1 {
        for j in 0..n2 {
            out.push(at(i + w, j + w) - at(i, j + w) - at(i + w, j) + at(i, j));
        }
    }
    out
}

/// Regime field with values in (0,1).
pub fn regime_field(shape: [usize; 2], range: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, REGIME_STREAM);
    let m = ((2 * range + 1) * (2 * range + 1)) as f64;
    let sums = moving_average(shape, range, || rng.random::<f64>());
    let normal = Normal::standard();
    sums.into_iter().map(|s| normal.cdf((s - 0.5 * m) / (m / 12.0).sqrt())).collect()
}

/// Unit-variance Gaussian covariate field number `index` (from 1).
pub fn covariate_field(shape: [usize; 2], range: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = stream(seed, index);
    let m = ((2 * range + 1) * (2 * range + 1)) as f64;
    moving_average(shape, range, || rng.sample::<f64, _>(StandardNormal)).into_iter().map(|s| s / m.sqrt()).collect()
}

fn lattice_dataset(cfg: &DgpConfig, rows: Vec<Observation>) -> SpatialDataset {
    let d = cfg.betas.len();
    let skip = usize::from(cfg.intercept);
    let mut x_names: Vec<String> = if cfg.intercept { vec![INTERCEPT.to_string()] } else { vec![] };
    x_names.extend((1..=d - skip).map(|j| format!("x{j}")));
    SpatialDataset::new(cfg.shape.to_vec(), vec!["row".into(), "col".into()], "y".into(), x_names, vec!["u".into()], cfg.intercept, rows)
        .expect("generated lattice is valid")
}

pub fn generate(cfg: &DgpConfig) -> Result<Simulation, SimError> {
    cfg.validate()?;
    let [n1, n2] = cfg.shape;
    let skip = usize::from(cfg.intercept);
    let d = cfg.betas.len();
    let u = regime_field(cfg.shape, cfg.ma_range, cfg.seed);
    let covs: Vec<Vec<f64>> = (1..=(d - skip) as u64).map(|j| covariate_field(cfg.shape, cfg.ma_range, cfg.seed, j)).collect();
    let mut err_rng = stream(cfg.seed, ERROR_STREAM);
    let mut latent = Vec::with_capacity(n1 * n2);
    for idx in 0..n1 * n2 {
        let ui = u[idx];
        let mut x = if cfg.intercept { vec![1.0] } else { vec![] };
        x.extend(covs.iter().map(|c| c[idx]));
        let shift = cfg.tau.map_or(0.0, |t| cfg.error.quantile(t, ui));
        let e = cfg.error.sample(&mut err_rng, ui) - shift;
        let y = cfg.betas.iter().zip(&x).map(|(b, xr)| b.eval(ui) * xr).sum::<f64>() + e;
        latent.push(Observation { site: Site(vec![idx / n2 + 1, idx % n2 + 1]), y, x, u: vec![ui] });
    }
    let truth = GroundTruth { betas: cfg.betas.clone() };
    let Some(trends) = &cfg.trends else {
        return Ok(Simulation { dataset: lattice_dataset(cfg, latent), latent: None, truth });
    };
    let shape = cfg.shape.to_vec();
    let observed = latent
        .iter()
        .map(|o| {
            let s = o.site.rescaled(&shape);
            let mut x = o.x.clone();
            for (xj, t) in x[skip..].iter_mut().zip(&trends.x) {
                *xj += t.eval(&s);
            }
            Observation { site: o.site.clone(), y: o.y + trends.y.eval(&s), x, u: vec![o.u[0] + trends.u.eval(&s)] }
        })
        .collect();
    Ok(Simulation { dataset: lattice_dataset(cfg, observed), latent: Some(lattice_dataset(cfg, latent)), truth })
}

/// Mixes a replication index into a seed (SplitMix64 finaliser).
pub fn replication_seed(seed: u64, rep: usize) -> u64 {
    let mut z = seed ^ (rep as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BandwidthRule {
    Fixed { h: f64 },
    /// `h = c · ñ^{-1/5}`.
    Rate { c: f64 },
    CrossValidated { grid: Vec<f64>, leave_out: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetrendSettings {
    /// Trend bandwidth; `ñ^{-1/6}` when absent.
    pub g: Option<f64>,
    pub kernel: TrendKernelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub dgp: DgpConfig,
    pub reps: usize,
    /// Loss, kernel and solver; the bandwidth comes from `bandwidth`.
    pub fit: FitConfig,
    pub bandwidth: BandwidthRule,
    /// Regime points for RMSE.
    pub grid: Vec<f64>,
    /// Regime points for band coverage; ignored without `level`.
    pub probes: Vec<f64>,
    pub level: Option<f64>,
    pub mode: VarianceMode,
    /// Detrend before fitting and compare with a fit on the centred latent field.
    pub detrend: Option<DetrendSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub seed: u64,
    pub bandwidth: f64,
    /// RMSE over the grid, per coefficient.
    pub rmse: Vec<f64>,
    /// Squared error per grid point and coefficient.
    pub sq_err: Vec<Vec<f64>>,
    /// Estimates per grid point and coefficient.
    pub beta_hat: Vec<Vec<f64>>,
    /// Band covers the truth, per probe and coefficient.
    pub covered: Vec<Vec<bool>>,
    /// `max |β̂_detrended − β̂_latent|` over grid points and coefficients.
    pub detrend_gap: Option<f64>,
    pub latent_beta_hat: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub config: McConfig,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub mean_rmse: Vec<f64>,
    pub median_rmse: Vec<f64>,
    /// Root mean squared error across replications, per grid point and coefficient.
    pub pointwise_rmse: Vec<Vec<f64>>,
    /// Per probe and coefficient.
    pub coverage: Vec<Vec<f64>>,
    /// Pooled over probes, per coefficient.
    pub coverage_by_coefficient: Vec<f64>,
    /// Across-replication standard deviation of the latent-field estimates, per grid point and coefficient.
    pub latent_sd: Option<Vec<Vec<f64>>>,
    pub outcomes: Vec<RepOutcome>,
    pub elapsed_secs: f64,
}

impl McReport {
    pub fn median_detrend_gap(&self) -> Option<f64> {
        let mut g: Vec<f64> = self.outcomes.iter().filter_map(|o| o.detrend_gap).collect();
        if g.is_empty() {
            return None;
        }
        g.sort_by(f64::total_cmp);
        Some(crate::localfit::quantile(&g, 0.5))
    }
}

fn mean_columns(ds: &SpatialDataset) -> (f64, Vec<f64>, f64) {
    let n = ds.n_usable() as f64;
    let y = ds.usable().map(|o| o.y).sum::<f64>() / n;
    let d = ds.x_dim();
    let x = (0..d).map(|j| ds.usable().map(|o| o.x[j]).sum::<f64>() / n).collect();
    let u = ds.usable().map(|o| o.u[0]).sum::<f64>() / n;
    (y, x, u)
}

/// Subtracts sample means from the response, non-intercept covariates and regime variable.
fn centred(ds: &SpatialDataset) -> (SpatialDataset, f64) {
    let (my, mx, mu) = mean_columns(ds);
    let skip = usize::from(ds.has_intercept());
    let obs = ds
        .observations()
        .iter()
        .map(|o| {
            let mut x = o.x.clone();
            for (j, xj) in x.iter_mut().enumerate().skip(skip) {
                *xj -= mx[j];
            }
            Observation { site: o.site.clone(), y: o.y - my, x, u: vec![o.u[0] - mu] }
        })
        .collect::<Vec<_>>();
    (ds.with_observations(obs), mu)
}

fn one_replication(cfg: &McConfig, rep: usize) -> Result<RepOutcome, String> {
    let seed = replication_seed(cfg.dgp.seed, rep);
    let dgp = DgpConfig { seed, ..cfg.dgp.clone() };
    let sim = generate(&dgp).map_err(|e| e.to_string())?;
    let n = sim.dataset.n_usable();
    // detrended data live in centred regime coordinates
    let (analysed, offset, latent) = match &cfg.detrend {
        Some(settings) => {
            let g = settings.g.unwrap_or_else(|| default_trend_bandwidth(n));
            let model = estimate_trend(&sim.dataset, g, settings.kernel).map_err(|e| e.to_string())?;
            let det = detrend_dataset(&sim.dataset, &model).map_err(|e| e.to_string())?;
            let latent = sim.latent.as_ref().unwrap_or(&sim.dataset);
            let (lat, mu) = centred(latent);
            (det, mu, Some(lat))
        }
        None => (sim.dataset.clone(), 0.0, None),
    };
    let h = match &cfg.bandwidth {
        BandwidthRule::Fixed { h } => *h,
        BandwidthRule::Rate { c } => c * (n as f64).powf(-0.2),
        BandwidthRule::CrossValidated { grid, leave_out } => {
            let cv = CvConfig { h_grid: grid.clone(), leave_out: *leave_out, fit: cfg.fit, eval_subset: None };
            select_bandwidth(&analysed, &cv).map_err(|e| e.to_string())?.selected
        }
    };
    let fit = cfg.fit.with_bandwidth(h);
    let grid: Vec<Vec<f64>> = cfg.grid.iter().map(|&u| vec![u - offset]).collect();
    let curve = fit_curve(&analysed, grid.clone(), &fit).map_err(|e| e.to_string())?;
    if let Some(p) = curve.points.iter().find(|p| p.fit.is_none()) {
        return Err(format!("fit failed at u = {:?}: {}", p.u0, p.error.as_ref().map(|e| e.to_string()).unwrap_or_default()));
    }
    let beta_hat: Vec<Vec<f64>> = curve.fitted().map(|f| f.beta_hat.clone()).collect();
    // curve points are sorted; the configured grid may not be
    let mut order: Vec<usize> = (0..cfg.grid.len()).collect();
    order.sort_by(|&a, &b| cfg.grid[a].total_cmp(&cfg.grid[b]));
    let mut sorted_grid: Vec<f64> = order.iter().map(|&i| cfg.grid[i]).collect();
    sorted_grid.dedup();
    let sq_err: Vec<Vec<f64>> = sorted_grid
        .iter()
        .zip(&beta_hat)
        .map(|(&u, b)| sim.truth.beta(u).iter().zip(b).map(|(t, e)| (e - t) * (e - t)).collect())
        .collect();
    let d = cfg.dgp.betas.len();
    let rmse = (0..d).map(|r| (sq_err.iter().map(|s| s[r]).sum::<f64>() / sq_err.len() as f64).sqrt()).collect();

    let mut covered = Vec::new();
    if let Some(level) = cfg.level {
        if !cfg.probes.is_empty() {
            let probes: Vec<Vec<f64>> = cfg.probes.iter().map(|&u| vec![u - offset]).collect();
            let pc = fit_curve(&analysed, probes, &fit).map_err(|e| e.to_string())?;
            let b = bands(&pc, &analysed, &cfg.mode, level).map_err(|e| e.to_string())?;
            for p in &b.points {
                if let Some(e) = &p.error {
                    return Err(format!("band failed at u = {:?}: {e}", p.u0));
                }
                let truth = sim.truth.beta(p.u0[0] + offset);
                covered.push((0..d).map(|r| p.lower[r] <= truth[r] && truth[r] <= p.upper[r]).collect());
            }
        }
    }

    let (mut detrend_gap, mut latent_beta_hat) = (None, None);
    if let Some(lat) = &latent {
        let lc = fit_curve(lat, grid, &fit).map_err(|e| e.to_string())?;
        let lb: Vec<Vec<f64>> = lc.points.iter().map(|p| p.fit.as_ref().map(|f| f.beta_hat.clone()).unwrap_or_else(|| vec![f64::NAN; d])).collect();
        let gap = lb.iter().zip(&beta_hat).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max);
        detrend_gap = Some(gap);
        latent_beta_hat = Some(lb);
    }
    Ok(RepOutcome { rep, seed, bandwidth: h, rmse, sq_err, beta_hat, covered, detrend_gap, latent_beta_hat })
}

/// Runs the replications in parallel and aggregates in replication order.
pub fn run_mc(cfg: &McConfig) -> Result<McReport, SimError> {
    cfg.dgp.validate()?;
    if cfg.reps == 0 {
        return Err(invalid("reps must be at least 1"));
    }
    if cfg.grid.is_empty() {
        return Err(invalid("evaluation grid is empty"));
    }
    let start = Instant::now();
    let results: Vec<Result<RepOutcome, String>> = (0..cfg.reps).into_par_iter().map(|rep| one_replication(cfg, rep)).collect();
    let mut outcomes = Vec::new();
    let mut failure_messages = Vec::new();
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => failure_messages.push(format!("replication {rep}: {e}")),
        }
    }
    let d = cfg.dgp.betas.len();
    let ok = outcomes.len() as f64;
    let (mut mean_rmse, mut median_rmse) = (vec![f64::NAN; d], vec![f64::NAN; d]);
    let mut pointwise_rmse = Vec::new();
    let mut coverage: Vec<Vec<f64>> = Vec::new();
    let mut coverage_by_coefficient = Vec::new();
    let mut latent_sd = None;
    if !outcomes.is_empty() {
        for r in 0..d {
            let mut v: Vec<f64> = outcomes.iter().map(|o| o.rmse[r]).collect();
            mean_rmse[r] = v.iter().sum::<f64>() / ok;
            v.sort_by(f64::total_cmp);
            median_rmse[r] = crate::localfit::quantile(&v, 0.5);
        }
        let points = outcomes[0].sq_err.len();
        pointwise_rmse = (0..points)
            .map(|g| (0..d).map(|r| (outcomes.iter().map(|o| o.sq_err[g][r]).sum::<f64>() / ok).sqrt()).collect())
            .collect();
        let probes = outcomes[0].covered.len();
        coverage = (0..probes)
            .map(|p| (0..d).map(|r| outcomes.iter().filter(|o| o.covered[p][r]).count() as f64 / ok).collect())
            .collect();
        if probes > 0 {
            coverage_by_coefficient = (0..d).map(|r| (0..probes).map(|p| coverage[p][r]).sum::<f64>() / probes as f64).collect();
        }
        if outcomes[0].latent_beta_hat.is_some() && outcomes.len() > 1 {
            latent_sd = Some(
                (0..points)
                    .map(|g| {
                        (0..d)
                            .map(|r| {
                                let v: Vec<f64> = outcomes.iter().map(|o| o.latent_beta_hat.as_ref().expect("set")[g][r]).collect();
                                let m = v.iter().sum::<f64>() / ok;
                                (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (ok - 1.0)).sqrt()
                            })
                            .collect()
                    })
                    .collect(),
            );
        }
    }
    Ok(McReport {
        config: cfg.clone(),
        failures: failure_messages.len(),
        failure_messages,
        mean_rmse,
        median_rmse,
        pointwise_rmse,
        coverage,
        coverage_by_coefficient,
        latent_sd,
        outcomes,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// AMISE-optimal bandwidth for a check-loss local-linear fit with `k = 1`,
/// `U ~ U(0,1)` and `E[XXᵀ | U] = I`:
/// `h⁵ = d ν0 τ(1−τ) / (f_ε(0)² m2² ∫Σβ_r''² ñ)`.
pub fn amise_bandwidth(betas: &[BetaFn], tau: f64, f_eps0: f64, nu0: f64, m2: f64, n: usize) -> f64 {
    let curvature = crate::kernels::integrate(|u| betas.iter().map(|b| b.second_derivative(u).powi(2)).sum(), 0.0, 1.0);
    let d = betas.len() as f64;
    (d * nu0 * tau * (1.0 - tau) / (f_eps0 * f_eps0 * m2 * m2 * curvature * n as f64)).powf(0.2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use crate::localfit::fit_at;
    use crate::loss::LossSpec;

    fn base(seed: u64) -> DgpConfig {
        DgpConfig::new([12, 10], vec![BetaFn::Constant { a: 1.5 }, BetaFn::Constant { a: -0.7 }], ErrorDist::Gaussian { sigma: 0.0 }, seed)
    }

    #[test]
    fn noiseless_constant_coefficients_are_recovered() {
        let sim = generate(&base(1)).unwrap();
        for o in sim.dataset.observations() {
            assert!((o.y - (1.5 - 0.7 * o.x[1])).abs() <= 1e-15);
        }
        let cfg = FitConfig::new(LossSpec::Squared, KernelSpec::epanechnikov(1), 0.4);
        let fit = fit_at(&sim.dataset, &[0.5], &cfg).unwrap();
        assert!((fit.beta_hat[0] - 1.5).abs() <= 1e-8 && (fit.beta_hat[1] + 0.7).abs() <= 1e-8);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let mut cfg = base(7);
        cfg.error = ErrorDist::StudentT { df: 3.0, scale: 1.0 };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate(&DgpConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn regime_values_lie_in_the_unit_interval_with_uniform_spread() {
        let u = regime_field([60, 60], 2, 3);
        assert!(u.iter().all(|&v| v > 0.0 && v < 1.0));
        let mean = u.iter().sum::<f64>() / u.len() as f64;
        let var = u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / u.len() as f64;
        assert!((mean - 0.5).abs() < 0.05);
        assert!((var - 1.0 / 12.0).abs() < 0.02);
    }

    #[test]
    fn moving_average_sums_the_box() {
        let mut k = 0.0;
        let v = moving_average([2, 3], 1, || {
            k += 1.0;
            k
        });
        // padded lattice is 4 × 5 holding 1..=20 row-major; site (0,0) sums rows 0..3, cols 0..3
        assert_eq!(v[0], 1.0 + 2.0 + 3.0 + 6.0 + 7.0 + 8.0 + 11.0 + 12.0 + 13.0);
        assert_eq!(v[4], 7.0 + 8.0 + 9.0 + 12.0 + 13.0 + 14.0 + 17.0 + 18.0 + 19.0);
    }

    #[test]
    fn student_t_shift_puts_the_quantile_at_zero() {
        let e = ErrorDist::StudentT { df: 3.0, scale: 1.3 };
        for tau in [0.25, 0.5, 0.9] {
            let q = e.quantile(tau, 0.3);
            assert!((e.cdf(q, 0.3) - tau).abs() <= 1e-10);
        }
        let h = ErrorDist::Heteroscedastic { sigma0: 0.5, sigma1: 1.0 };
        assert!((h.cdf(h.quantile(0.25, 0.8), 0.8) - 0.25).abs() <= 1e-12);
    }

    #[test]
    fn parsing() {
        assert_eq!("sine".parse::<BetaFn>().unwrap(), BetaFn::Sine { amp: 1.0, freq: 1.0 });
        assert_eq!("sine(0.5,0.5)".parse::<BetaFn>().unwrap(), BetaFn::Sine { amp: 0.5, freq: 0.5 });
        assert_eq!("linear:1:2".parse::<BetaFn>().unwrap(), BetaFn::Linear { a: 1.0, b: 2.0 });
        assert!("cosine".parse::<BetaFn>().is_err());
        assert_eq!(split_list("sine(1,2), linear"), vec!["sine(1,2)", "linear"]);
        assert_eq!("gaussian:2".parse::<ErrorDist>().unwrap(), ErrorDist::Gaussian { sigma: 2.0 });
        assert_eq!("student_t:4".parse::<ErrorDist>().unwrap(), ErrorDist::StudentT { df: 4.0, scale: 1.0 });
        assert!("gaussian:-1".parse::<ErrorDist>().is_err());
    }

    #[test]
    fn trends_keep_the_latent_field() {
        let mut cfg = base(4);
        cfg.error = ErrorDist::Gaussian { sigma: 1.0 };
        cfg.trends = Some(Trends::cubic(1));
        let sim = generate(&cfg).unwrap();
        let latent = sim.latent.unwrap();
        let trends = cfg.trends.unwrap();
        for (a, b) in sim.dataset.observations().iter().zip(latent.observations()) {
            let s = a.site.rescaled(&[12, 10]);
            assert!((a.y - b.y - trends.y.eval(&s)).abs() < 1e-12);
            assert!((a.u[0] - b.u[0] - trends.u.eval(&s)).abs() < 1e-12);
            assert_eq!(a.x[0], 1.0);
        }
        cfg.trends = Some(Trends::cubic(3));
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn noiseless_mc_has_tiny_rmse() {
        let mut dgp = base(5);
        dgp.betas = vec![BetaFn::Linear { a: 1.0, b: 2.0 }, BetaFn::Linear { a: -1.0, b: 0.5 }];
        let cfg = McConfig {
            dgp,
            reps: 1,
            fit: FitConfig::new(LossSpec::quantile(0.5).unwrap(), KernelSpec::epanechnikov(1), 0.3),
            bandwidth: BandwidthRule::Fixed { h: 0.3 },
            grid: vec![0.3, 0.5, 0.7],
            probes: vec![],
            level: None,
            mode: VarianceMode::Independent,
            detrend: None,
        };
        let report = run_mc(&cfg).unwrap();
        assert_eq!(report.failures, 0);
        assert!(report.mean_rmse.iter().all(|&r| r <= 1e-6), "{:?}", report.mean_rmse);
    }

    #[test]
    fn amise_bandwidth_matches_hand_computation() {
        let betas = [BetaFn::Sine { amp: 1.0, freq: 1.0 }, BetaFn::Linear { a: 1.0, b: 0.5 }];
        let f0 = 1.0 / (2.0 * PI).sqrt();
        let h = amise_bandwidth(&betas, 0.5, f0, 0.6, 0.2, 400);
        // ∫(4π² sin 2πu)² du = 8π⁴
        let want = (2.0 * 0.6 * 0.25 / (f0 * f0 * 0.04 * 8.0 * PI.powi(4) * 400.0)).powf(0.2);
        assert!((h - want).abs() < 1e-9);
    }
}
