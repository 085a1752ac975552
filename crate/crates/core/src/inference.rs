//! Plug-in asymptotic variances and pointwise confidence bands.
//!
//! At an interior regime point the local-linear M-estimator satisfies
//!
//! ```text
//! √(ñ hᵏ) (β̂(u0) − β(u0) − bias) → N(0, ν0/(μ0² f(u0)) · Φ⁻¹ Σ Φ⁻¹)
//! ```
//!
//! with `Φ = E[ψ'(ε) XXᵀ | U = u0]` and `Σ = E[ψ(ε)² XXᵀ | U = u0]`. Both are
//! estimated by Nadaraya–Watson averages of per-observation weights times
//! `XXᵀ`. Within one bandwidth of the edge of the regime sample, `ν0/μ0²` is
//! replaced by the boundary constant `λ11` and the design density estimate is
//! divided by the kernel mass left inside the support. The bias is not
//! removed; undersmoothing is the intended remedy.

use crate::dataset::SpatialDataset;
use crate::kernels::{spd_condition, KernelError, KernelSpec};
use crate::localfit::{quantile, CoefficientCurve, FitError};
use crate::loss::LossSpec;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Fewest residuals accepted for density estimation.
pub const MIN_RESIDUALS: usize = 30;
/// Correlation above which the dependence diagnostic flags a column.
pub const DEPENDENCE_FLAG: f64 = 0.1;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum InferenceError {
    #[error("need at least {MIN_RESIDUALS} residuals, got {0}")]
    TooFewResiduals(usize),
    #[error("residuals have zero spread; the error density at zero is unbounded")]
    DegenerateResiduals,
    #[error("conditioning subset must name one or two covariate columns, got {0:?}")]
    InvalidSubset(Vec<usize>),
    #[error("curvature matrix is singular (condition number {0:.3e})")]
    SingularPhi(f64),
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("curve was fitted with {found} loss, expected {expected}")]
    WrongLoss { expected: &'static str, found: &'static str },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// How the error density at zero enters the quantile curvature matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "columns", rename_all = "snake_case")]
pub enum VarianceMode {
    /// Errors independent of `(X, U)`: one pooled density estimate.
    #[default]
    Independent,
    /// Density conditional on up to two covariate columns (indices into `X`).
    Conditional(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResidualDensity {
    Scalar { value: f64, bandwidth: f64 },
    PerObservation { values: Vec<f64>, bandwidths: Vec<f64> },
}

impl ResidualDensity {
    /// Density at observation `i`.
    pub fn at(&self, i: usize) -> f64 {
        match self {
            ResidualDensity::Scalar { value, .. } => *value,
            ResidualDensity::PerObservation { values, .. } => values[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub u0: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Estimated covariance of `β̂(u0)`.
    pub covariance: Vec<Vec<f64>>,
    pub boundary: bool,
    /// `ν0/μ0²` in the interior, `λ11` near the edge.
    pub variance_factor: f64,
    pub design_density: f64,
    pub error: Option<String>,
}

/// Correlation of `|ε̂|` with one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceCheck {
    pub column: String,
    pub pearson: f64,
    pub spearman: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub level: f64,
    pub z: f64,
    pub loss: LossSpec,
    pub mode: VarianceMode,
    pub bandwidth: f64,
    pub n: usize,
    pub x_names: Vec<String>,
    pub u_names: Vec<String>,
    /// Pooled error density at zero (Independent quantile mode).
    pub residual_density: Option<f64>,
    pub points: Vec<BandPoint>,
    pub diagnostics: Vec<DependenceCheck>,
}

/// `f̂(u0) = (ñ hᵏ)⁻¹ Σ K((U_i − u0)/h)`.
pub fn density_at(ds: &SpatialDataset, u0: &[f64], h: f64, kernel: &KernelSpec) -> f64 {
    let n = ds.n_usable() as f64;
    let s: f64 = ds.usable().map(|o| kernel.scaled_weight(&o.u, u0, h)).sum();
    s / (n * h.powi(u0.len() as i32))
}

/// Nadaraya–Watson estimate of `E[XXᵀ | U = u0]`.
pub fn design_moment(ds: &SpatialDataset, u0: &[f64], h: f64, kernel: &KernelSpec) -> Result<DMatrix<f64>, FitError> {
    let ones = vec![1.0; ds.observations().len()];
    weighted_moment(ds, u0, h, kernel, &ones).map(|(m, _)| m)
}

/// `Σ K_i a_i X_i X_iᵀ / Σ K_i` over usable observations, with `a` indexed
/// like [`SpatialDataset::observations`]; also returns `Σ K_i`.
fn weighted_moment(ds: &SpatialDataset, u0: &[f64], h: f64, kernel: &KernelSpec, a: &[f64]) -> Result<(DMatrix<f64>, f64), FitError> {
    let d = ds.x_dim();
    let mut m = DMatrix::<f64>::zeros(d, d);
    let mut total = 0.0;
    let mut count = 0;
    for (o, &ai) in ds.observations().iter().zip(a) {
        if !o.is_usable() {
            continue;
        }
        let w = kernel.scaled_weight(&o.u, u0, h);
        if w == 0.0 {
            continue;
        }
        count += 1;
        total += w;
        for r in 0..d {
            for s in r..d {
                m[(r, s)] += w * ai * o.x[r] * o.x[s];
            }
        }
    }
    if count == 0 {
        return Err(FitError::InsufficientSupport { n_local: 0, required: 1 });
    }
    for r in 0..d {
        for s in 0..r {
            m[(r, s)] = m[(s, r)];
        }
    }
    Ok((m / total, total))
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Gaussian-reference bandwidth `0.9 · min(sd, IQR/1.34) · n^{-1/5}`; falls
/// back to whichever spread measure is positive.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let (_, sd) = mean_sd(values);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = (quantile(&sorted, 0.75) - quantile(&sorted, 0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => 0.0,
    };
    0.9 * spread * (values.len() as f64).powf(-0.2)
}

fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Density of the errors at zero, pooled or conditional on covariates.
///
/// `aux[i]` holds the conditioning values of observation `i` and is only
/// read in conditional mode.
pub fn residual_density_zero(residuals: &[f64], mode: &VarianceMode, aux: &[Vec<f64>]) -> Result<ResidualDensity, InferenceError> {
    let n = residuals.len();
    if n < MIN_RESIDUALS {
        return Err(InferenceError::TooFewResiduals(n));
    }
    let b = silverman_bandwidth(residuals);
    if !(b > 0.0) {
        return Err(InferenceError::DegenerateResiduals);
    }
    let kde: Vec<f64> = residuals.iter().map(|e| phi(e / b) / b).collect();
    match mode {
        VarianceMode::Independent => Ok(ResidualDensity::Scalar { value: kde.iter().sum::<f64>() / n as f64, bandwidth: b }),
        VarianceMode::Conditional(cols) => {
            if cols.is_empty() || cols.len() > 2 || aux.len() != n || aux.iter().any(|a| a.len() != cols.len()) {
                return Err(InferenceError::InvalidSubset(cols.clone()));
            }
            let bw: Vec<f64> = (0..cols.len())
                .map(|l| silverman_bandwidth(&aux.iter().map(|a| a[l]).collect::<Vec<_>>()))
                .collect();
            let values = aux
                .par_iter()
                .map(|target| {
                    let (mut num, mut den) = (0.0, 0.0);
                    for (a, k0) in aux.iter().zip(&kde) {
                        // a column without spread carries no information
                        let w: f64 = (0..bw.len())
                            .filter(|&l| bw[l] > 0.0)
                            .map(|l| phi((a[l] - target[l]) / bw[l]))
                            .product();
                        num += w * k0;
                        den += w;
                    }
                    num / den
                })
                .collect();
            let mut bandwidths = vec![b];
            bandwidths.extend(bw);
            Ok(ResidualDensity::PerObservation { values, bandwidths })
        }
    }
}

/// `Y_i − X_iᵀβ̂(U_i)` for every observation (`NaN` where unusable), with
/// `U_i` clamped into the fitted grid.
pub fn curve_residuals(curve: &CoefficientCurve, ds: &SpatialDataset) -> Result<Vec<f64>, FitError> {
    ds.observations()
        .iter()
        .map(|o| {
            if !o.is_usable() {
                return Ok(f64::NAN);
            }
            let beta = curve.coefficients_clamped(&o.u)?;
            Ok(o.y - o.x.iter().zip(&beta).map(|(x, b)| x * b).sum::<f64>())
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0);
    cov / (sa * sb)
}

/// Absolute Pearson and Spearman correlations of `|ε̂|` with each
/// non-intercept covariate and each regime variable.
pub fn dependence_diagnostic(ds: &SpatialDataset, residuals: &[f64]) -> Vec<DependenceCheck> {
    let idx: Vec<usize> = ds.usable_indices().into_iter().filter(|&i| residuals[i].is_finite()).collect();
    if idx.len() < 3 {
        return Vec::new();
    }
    let abs_e: Vec<f64> = idx.iter().map(|&i| residuals[i].abs()).collect();
    let obs = ds.observations();
    let skip = usize::from(ds.has_intercept());
    let mut columns: Vec<(String, Vec<f64>)> = ds.x_names()[skip..]
        .iter()
        .enumerate()
        .map(|(j, n)| (n.clone(), idx.iter().map(|&i| obs[i].x[j + skip]).collect()))
        .collect();
    columns.extend(ds.u_names().iter().enumerate().map(|(l, n)| (n.clone(), idx.iter().map(|&i| obs[i].u[l]).collect())));
    let re = ranks(&abs_e);
    columns
        .into_iter()
        .map(|(column, v)| {
            let p = pearson(&abs_e, &v).abs();
            let s = pearson(&re, &ranks(&v)).abs();
            DependenceCheck { column, pearson: p, spearman: s, flagged: p > DEPENDENCE_FLAG || s > DEPENDENCE_FLAG }
        })
        .collect()
}

/// Standard normal quantile at `(1 + level)/2`.
pub fn critical_value(level: f64) -> Result<f64, InferenceError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(InferenceError::InvalidLevel(level));
    }
    Ok(Normal::standard().inverse_cdf(0.5 * (1.0 + level)))
}

/// Edge offsets `c_l = min(u0_l − min U_l, max U_l − u0_l)/h`, capped at one.
fn boundary_offsets(ds: &SpatialDataset, u0: &[f64], h: f64) -> Vec<f64> {
    (0..u0.len())
        .map(|l| {
            let lo = ds.usable().map(|o| o.u[l]).fold(f64::INFINITY, f64::min);
            let hi = ds.usable().map(|o| o.u[l]).fold(f64::NEG_INFINITY, f64::max);
            ((u0[l] - lo).min(hi - u0[l]) / h).clamp(0.0, 1.0)
        })
        .collect()
}

/// Sandwich bands with `Φ̂ = NW(a_i XXᵀ)` and `Σ̂ = NW(b_i XXᵀ)`.
fn sandwich_points(curve: &CoefficientCurve, ds: &SpatialDataset, z: f64, a: &[f64], b: &[f64]) -> Vec<BandPoint> {
    let cfg = &curve.config;
    let (h, kernel) = (cfg.bandwidth, &cfg.kernel);
    let n = ds.n_usable() as f64;
    let k = ds.u_dim() as i32;
    let interior = kernel.moments();
    curve
        .points
        .par_iter()
        .map(|p| {
            let d = curve.x_names.len();
            let empty = |error: String| BandPoint {
                u0: p.u0.clone(),
                beta_hat: p.fit.as_ref().map(|f| f.beta_hat.clone()).unwrap_or_default(),
                se: vec![],
                lower: vec![],
                upper: vec![],
                covariance: vec![],
                boundary: false,
                variance_factor: f64::NAN,
                design_density: f64::NAN,
                error: Some(error),
            };
            let Some(fit) = &p.fit else {
                return empty(p.error.as_ref().map(|e| e.to_string()).unwrap_or_default());
            };
            let result = (|| -> Result<BandPoint, InferenceError> {
                let (phi_hat, total) = weighted_moment(ds, &p.u0, h, kernel, a)?;
                let (sigma_hat, _) = weighted_moment(ds, &p.u0, h, kernel, b)?;
                let cond = spd_condition(&phi_hat);
                if !(cond <= 1e12) {
                    return Err(InferenceError::SingularPhi(cond));
                }
                let phi_inv = phi_hat.try_inverse().ok_or(InferenceError::SingularPhi(f64::INFINITY))?;
                let c = boundary_offsets(ds, &p.u0, h);
                let boundary = c.iter().any(|&v| v < 1.0);
                let raw_density = total / (n * h.powi(k));
                let (factor, mass) = if boundary {
                    let bm = kernel.boundary_matrices(&c)?;
                    (bm.lambda11, bm.delta_c[(0, 0)])
                } else {
                    (interior.variance_factor(), interior.mu0)
                };
                let density = raw_density / mass;
                let mut cov = &phi_inv * sigma_hat * &phi_inv * (factor / (density * n * h.powi(k)));
                cov = (&cov + cov.transpose()) * 0.5;
                let se: Vec<f64> = (0..d).map(|r| cov[(r, r)].max(0.0).sqrt()).collect();
                Ok(BandPoint {
                    u0: p.u0.clone(),
                    beta_hat: fit.beta_hat.clone(),
                    lower: fit.beta_hat.iter().zip(&se).map(|(b, s)| b - z * s).collect(),
                    upper: fit.beta_hat.iter().zip(&se).map(|(b, s)| b + z * s).collect(),
                    se,
                    covariance: (0..d).map(|r| (0..d).map(|s| cov[(r, s)]).collect()).collect(),
                    boundary,
                    variance_factor: factor,
                    design_density: density,
                    error: None,
                })
            })();
            result.unwrap_or_else(|e| empty(e.to_string()))
        })
        .collect()
}

fn assemble(curve: &CoefficientCurve, ds: &SpatialDataset, level: f64, mode: VarianceMode, residual_density: Option<f64>, points: Vec<BandPoint>, residuals: &[f64]) -> BandResult {
    BandResult {
        level,
        z: critical_value(level).expect("level checked by caller"),
        loss: curve.config.loss,
        mode,
        bandwidth: curve.config.bandwidth,
        n: ds.n_usable(),
        x_names: curve.x_names.clone(),
        u_names: curve.u_names.clone(),
        residual_density,
        points,
        diagnostics: dependence_diagnostic(ds, residuals),
    }
}

/// Bands for a check-loss curve: `Φ̂_τ = 2·NW(f̂_ε(0|·) XXᵀ)`, `Σ̂ = 4τ(1−τ) Ω̂`.
pub fn quantile_bands(curve: &CoefficientCurve, ds: &SpatialDataset, mode: &VarianceMode, level: f64) -> Result<BandResult, InferenceError> {
    let LossSpec::Quantile { tau } = curve.config.loss else {
        return Err(InferenceError::WrongLoss { expected: "quantile", found: curve.config.loss.name() });
    };
    let z = critical_value(level)?;
    let residuals = curve_residuals(curve, ds)?;
    let usable = ds.usable_indices();
    let pooled: Vec<f64> = usable.iter().map(|&i| residuals[i]).collect();
    let aux: Vec<Vec<f64>> = match mode {
        VarianceMode::Independent => vec![],
        VarianceMode::Conditional(cols) => {
            if cols.is_empty() || cols.len() > 2 || cols.iter().any(|&c| c >= ds.x_dim()) {
                return Err(InferenceError::InvalidSubset(cols.clone()));
            }
            usable.iter().map(|&i| cols.iter().map(|&c| ds.observations()[i].x[c]).collect()).collect()
        }
    };
    let dens = residual_density_zero(&pooled, mode, &aux)?;
    let mut a = vec![0.0; ds.observations().len()];
    for (j, &i) in usable.iter().enumerate() {
        a[i] = 2.0 * dens.at(j);
    }
    let b = vec![4.0 * tau * (1.0 - tau); a.len()];
    let points = sandwich_points(curve, ds, z, &a, &b);
    let scalar = match dens {
        ResidualDensity::Scalar { value, .. } => Some(value),
        ResidualDensity::PerObservation { .. } => None,
    };
    Ok(assemble(curve, ds, level, mode.clone(), scalar, points, &residuals))
}

/// Bands for a Huber-type curve: `Φ̂_c = NW(1{|ε̂| ≤ c} XXᵀ)/c`, `Σ̂ = NW(ψ_c(ε̂)² XXᵀ)`.
pub fn robust_bands(curve: &CoefficientCurve, ds: &SpatialDataset, level: f64) -> Result<BandResult, InferenceError> {
    let LossSpec::Huber { c } = curve.config.loss else {
        return Err(InferenceError::WrongLoss { expected: "huber", found: curve.config.loss.name() });
    };
    let z = critical_value(level)?;
    let residuals = curve_residuals(curve, ds)?;
    let a: Vec<f64> = residuals.iter().map(|e| if e.abs() <= c { 1.0 / c } else { 0.0 }).collect();
    let b: Vec<f64> = residuals.iter().map(|&e| curve.config.loss.score(e).powi(2)).collect();
    let points = sandwich_points(curve, ds, z, &a, &b);
    Ok(assemble(curve, ds, level, VarianceMode::Independent, None, points, &residuals))
}

/// Bands for a least-squares curve: `Φ̂ = 2Ω̂`, `Σ̂ = NW(4ε̂² XXᵀ)`.
pub fn squared_bands(curve: &CoefficientCurve, ds: &SpatialDataset, level: f64) -> Result<BandResult, InferenceError> {
    if curve.config.loss != LossSpec::Squared {
        return Err(InferenceError::WrongLoss { expected: "squared", found: curve.config.loss.name() });
    }
    let z = critical_value(level)?;
    let residuals = curve_residuals(curve, ds)?;
    let a = vec![2.0; residuals.len()];
    let b: Vec<f64> = residuals.iter().map(|e| 4.0 * e * e).collect();
    let points = sandwich_points(curve, ds, z, &a, &b);
    Ok(assemble(curve, ds, level, VarianceMode::Independent, None, points, &residuals))
}

/// Dispatches on the curve's loss.
pub fn bands(curve: &CoefficientCurve, ds: &SpatialDataset, mode: &VarianceMode, level: f64) -> Result<BandResult, InferenceError> {
    match curve.config.loss {
        LossSpec::Quantile { .. } => quantile_bands(curve, ds, mode, level),
        LossSpec::Huber { .. } => robust_bands(curve, ds, level),
        LossSpec::Squared => squared_bands(curve, ds, level),
    }
}

/// Smallest eigenvalue of a reported covariance.
pub fn min_eigenvalue(cov: &[Vec<f64>]) -> f64 {
    let d = cov.len();
    let m = DMatrix::from_fn(d, d, |r, s| cov[r][s]);
    SymmetricEigen::new(m).eigenvalues.min()
}
