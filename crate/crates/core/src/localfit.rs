//! Local-linear M-estimation of functional coefficients.
//!
//! At a regime point `u0` the coefficients are approximated by
//! `β_r(u) ≈ a_r + b_rᵀ(u − u0)` and `(a, b)` minimise
//!
//! ```text
//! Σ_i ρ(Y_i − Σ_r [a_r + (U_i − u0)ᵀ b_r] X_ir) · K((U_i − u0) / h)
//! ```
//!
//! The estimate is `β̂(u0) = â`. All three losses are handled by one
//! majorize–minimize loop: each step solves a weighted least-squares problem
//! whose quadratic majorises the (smoothed) loss at the current residuals.
//! For the check loss the kink is rounded with `√(z² + ε²)`; `ε` is annealed
//! by a factor of ten down to a floor, after which convergence is judged on
//! the unsmoothed objective. The check-loss fit is finished by an exact
//! descent over basic solutions, starting from the one nearest the smoothed
//! fit, and kept only when it lowers the objective.

use crate::dataset::SpatialDataset;
use crate::kernels::{spd_condition, KernelSpec};
use crate::loss::LossSpec;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Serialize, Deserialize)]
pub enum FitError {
    #[error("only {n_local} observations have positive kernel weight, need {required}")]
    InsufficientSupport { n_local: usize, required: usize },
    #[error("local design is rank deficient (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },
    #[error("regime point has dimension {got}, dataset has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("regime grid is empty or contains non-finite values")]
    InvalidGrid,
    #[error("every grid point failed")]
    AllPointsFailed,
    #[error("point {u:?} lies outside the fitted grid")]
    OutOfHull { u: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative objective change that ends a smoothing stage.
    pub rel_tol: f64,
    /// Iteration budget across all smoothing stages.
    pub max_iter: usize,
    /// Initial smoothing width, relative to the residual scale.
    pub eps_smooth: f64,
    /// Smallest smoothing width reached by annealing.
    pub eps_floor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { rel_tol: 1e-8, max_iter: 200, eps_smooth: 1e-6, eps_floor: 1e-10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub loss: LossSpec,
    pub kernel: KernelSpec,
    pub bandwidth: f64,
    pub solver: SolverOptions,
    /// Minimum number of observations with positive weight; defaults to `d(k+1) + 1`.
    pub min_support: Option<usize>,
}

impl FitConfig {
    pub fn new(loss: LossSpec, kernel: KernelSpec, bandwidth: f64) -> Self {
        FitConfig { loss, kernel, bandwidth, solver: SolverOptions::default(), min_support: None }
    }

    pub fn with_bandwidth(&self, bandwidth: f64) -> Self {
        FitConfig { bandwidth, ..*self }
    }

    pub fn required_support(&self, d: usize, k: usize) -> usize {
        self.min_support.unwrap_or(d * (k + 1) + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFitResult {
    pub u0: Vec<f64>,
    /// `β̂(u0)`, one entry per covariate.
    pub beta_hat: Vec<f64>,
    /// `b̂`, a `d × k` matrix stored row-wise.
    pub slope_hat: Vec<Vec<f64>>,
    /// Kernel-weighted loss at the solution.
    pub objective: f64,
    pub n_local: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Kernel-weighted local regression problem in scaled slope coordinates.
pub(crate) struct LocalProblem {
    /// Rows `[X_i, ((U_i − u0)/h)_1 X_i, …, ((U_i − u0)/h)_k X_i]`.
    pub design: DMatrix<f64>,
    /// `design` in row-major order.
    rows: Vec<f64>,
    pub y: DVector<f64>,
    pub w: DVector<f64>,
    pub d: usize,
    pub k: usize,
}

impl LocalProblem {
    pub(crate) fn build(ds: &SpatialDataset, u0: &[f64], cfg: &FitConfig, exclude: &[usize]) -> Result<Self, FitError> {
        let (d, k) = (ds.x_dim(), ds.u_dim());
        if u0.len() != k {
            return Err(FitError::DimensionMismatch { expected: k, got: u0.len() });
        }
        let h = cfg.bandwidth;
        if !(h > 0.0 && h.is_finite()) {
            return Err(FitError::InvalidBandwidth(h));
        }
        let mut rows = Vec::new();
        for (i, obs) in ds.observations().iter().enumerate() {
            if !obs.is_usable() || exclude.contains(&i) {
                continue;
            }
            let wt = cfg.kernel.scaled_weight(&obs.u, u0, h);
            if wt > 0.0 {
                rows.push((i, wt));
            }
        }
        let required = cfg.required_support(d, k);
        if rows.len() < required {
            return Err(FitError::InsufficientSupport { n_local: rows.len(), required });
        }
        let p = d * (k + 1);
        let n = rows.len();
        let obs = ds.observations();
        let design = DMatrix::from_fn(n, p, |row, col| {
            let o = &obs[rows[row].0];
            let r = col % d;
            let block = col / d;
            if block == 0 {
                o.x[r]
            } else {
                (o.u[block - 1] - u0[block - 1]) / h * o.x[r]
            }
        });
        let y = DVector::from_iterator(n, rows.iter().map(|&(i, _)| obs[i].y));
        let w = DVector::from_iterator(n, rows.iter().map(|&(_, wt)| wt));
        let rows = (0..n).flat_map(|i| design.row(i).iter().copied().collect::<Vec<_>>()).collect();
        Ok(LocalProblem { design, rows, y, w, d, k })
    }

    fn n(&self) -> usize {
        self.y.len()
    }

    fn p(&self) -> usize {
        self.design.ncols()
    }

    fn residuals(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.y - &self.design * theta
    }

    fn objective(&self, loss: &LossSpec, r: &DVector<f64>) -> f64 {
        r.iter().zip(self.w.iter()).map(|(&z, &w)| w * loss.value(z)).sum()
    }

    fn smoothed_objective(&self, loss: &LossSpec, r: &DVector<f64>, eps: f64) -> f64 {
        r.iter().zip(self.w.iter()).map(|(&z, &w)| w * loss.smoothed_value(z, eps)).sum()
    }

    /// Solves `Σ c_i D_i D_iᵀ θ = Σ D_i t_i`.
    fn weighted_solve(&self, c: &DVector<f64>, t: &DVector<f64>) -> Option<DVector<f64>> {
        let p = self.p();
        let mut upper = vec![0.0; p * p];
        let mut rhs = DVector::<f64>::zeros(p);
        for (i, row) in self.rows.chunks_exact(p).enumerate() {
            let (ci, ti) = (c[i], t[i]);
            for a in 0..p {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                rhs[a] += ra * ti;
                let s = ci * ra;
                let out = &mut upper[a * p..(a + 1) * p];
                for b in a..p {
                    out[b] += s * row[b];
                }
            }
        }
        let mut gram = DMatrix::<f64>::from_row_slice(p, p, &upper);
        for a in 0..p {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        // Jacobi scaling keeps Cholesky usable when weights span many decades
        let scale: Vec<f64> = (0..p).map(|a| gram[(a, a)].sqrt().max(f64::MIN_POSITIVE).recip()).collect();
        let scaled = DMatrix::from_fn(p, p, |a, b| gram[(a, b)] * scale[a] * scale[b]);
        let srhs = DVector::from_fn(p, |a, _| rhs[a] * scale[a]);
        let z = match scaled.clone().cholesky() {
            Some(ch) => ch.solve(&srhs),
            None => scaled.lu().solve(&srhs)?,
        };
        let theta = DVector::from_fn(p, |a, _| z[a] * scale[a]);
        theta.iter().all(|v| v.is_finite()).then_some(theta)
    }

    /// Condition number of the kernel-weighted Gram matrix after equilibration.
    fn condition(&self) -> f64 {
        let p = self.p();
        let mut gram = DMatrix::<f64>::zeros(p, p);
        for i in 0..self.n() {
            let row = self.design.row(i);
            gram += row.transpose() * row * self.w[i];
        }
        let scale: Vec<f64> = (0..p).map(|a| gram[(a, a)].sqrt()).collect();
        if scale.iter().any(|&s| s == 0.0) {
            return f64::INFINITY;
        }
        let eq = DMatrix::from_fn(p, p, |a, b| gram[(a, b)] / (scale[a] * scale[b]));
        spd_condition(&eq)
    }
}

pub(crate) struct Solution {
    pub theta: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// One recorded majorize–minimize step: smoothing width and surrogate objective after the step.
#[derive(Debug, Clone, Copy)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct TraceStep {
    pub eps: f64,
    pub smoothed_objective: f64,
}

/// IRLS stopping tolerance when an exact finishing step follows.
const WARM_START_TOL: f64 = 1e-6;

fn rel_change(old: f64, new: f64) -> f64 {
    (old - new).abs() / old.abs().max(new.abs()).max(f64::MIN_POSITIVE)
}

pub(crate) fn solve(problem: &LocalProblem, loss: &LossSpec, opts: &SolverOptions, mut trace: Option<&mut Vec<TraceStep>>) -> Result<Solution, FitError> {
    let cond = problem.condition();
    if !(cond <= 1e12) {
        return Err(FitError::RankDeficient { condition: cond });
    }
    let n = problem.n();
    let ones = DVector::from_element(n, 1.0);
    let wy = problem.w.component_mul(&problem.y);
    let mut theta = problem
        .weighted_solve(&problem.w.component_mul(&ones), &wy)
        .ok_or(FitError::RankDeficient { condition: cond })?;
    let mut r = problem.residuals(&theta);
    let mut objective = problem.objective(loss, &r);
    if matches!(loss, LossSpec::Squared) {
        return Ok(Solution { theta, objective, iterations: 1, converged: true });
    }

    let wsum = problem.w.sum();
    let scale = r.iter().zip(problem.w.iter()).map(|(z, w)| z.abs() * w).sum::<f64>() / wsum;
    if scale <= 1e-300 || objective == 0.0 {
        return Ok(Solution { theta, objective, iterations: 1, converged: true });
    }

    let smoothing = loss.needs_smoothing();
    let floor = opts.eps_floor * scale;
    let mut eps = if smoothing { opts.eps_smooth * scale } else { 0.0 };
    let mut surrogate = problem.smoothed_objective(loss, &r, eps);
    let mut iterations = 1;
    let mut converged = false;
    let mut c = DVector::zeros(n);
    let mut t = DVector::zeros(n);
    // the check loss is finished exactly by vertex descent, so IRLS only warm-starts it
    let exact_finish = matches!(loss, LossSpec::Quantile { .. });
    let tol = if exact_finish { opts.rel_tol.max(WARM_START_TOL) } else { opts.rel_tol };

    while iterations < opts.max_iter {
        for i in 0..n {
            let (a, b) = loss.majorizer(r[i], eps);
            c[i] = problem.w[i] * a;
            t[i] = problem.w[i] * (a * problem.y[i] + b);
        }
        let Some(next) = problem.weighted_solve(&c, &t) else { break };
        iterations += 1;
        let next_r = problem.residuals(&next);
        let next_surrogate = problem.smoothed_objective(loss, &next_r, eps);
        let next_objective = problem.objective(loss, &next_r);
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(TraceStep { eps, smoothed_objective: next_surrogate });
        }
        // guard against round-off pushing the surrogate upward
        if next_surrogate > surrogate * (1.0 + 1e-13) + 1e-300 {
            if !smoothing || eps <= floor {
                converged = true;
                break;
            }
            eps = (eps * 0.1).max(floor);
            surrogate = problem.smoothed_objective(loss, &r, eps);
            continue;
        }
        let final_stage = !smoothing || eps <= floor;
        let change = if final_stage {
            rel_change(objective, next_objective)
        } else {
            rel_change(surrogate, next_surrogate)
        };
        theta = next;
        r = next_r;
        surrogate = next_surrogate;
        objective = next_objective;
        if change < tol {
            if final_stage {
                converged = true;
                break;
            }
            eps = (eps * 0.1).max(floor);
            surrogate = problem.smoothed_objective(loss, &r, eps);
        }
    }

    if let LossSpec::Quantile { tau } = *loss {
        if let Some(basis) = basis_near(problem, &r) {
            if let Some((vertex, value, optimal)) = vertex_descent(problem, tau, basis) {
                if value <= objective {
                    theta = vertex;
                    objective = value;
                    converged = optimal;
                }
            }
        }
    }
    Ok(Solution { theta, objective, iterations, converged })
}

/// The `p` best-fitting linearly independent observations.
fn basis_near(problem: &LocalProblem, r: &DVector<f64>) -> Option<Vec<usize>> {
    let p = problem.p();
    let mut order: Vec<usize> = (0..problem.n()).collect();
    order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()).then(a.cmp(&b)));
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(p);
    let mut chosen = Vec::with_capacity(p);
    for &i in &order {
        let row = problem.design.row(i).transpose();
        let norm = row.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = row.clone();
        for q in &basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        let vn = v.norm();
        if vn > 1e-9 * norm {
            basis.push(v / vn);
            chosen.push(i);
            if chosen.len() == p {
                break;
            }
        }
    }
    (chosen.len() == p).then_some(chosen)
}

/// Edge descent over basic solutions of the weighted check-loss problem.
///
/// A basic solution interpolates `p` observations. Each edge frees one of
/// them, moving its residual up or down while the others stay at zero; the
/// objective is piecewise linear along the edge, so an exact line search
/// stops at the breakpoint where the slope turns nonnegative and that
/// observation enters the basis. Stops when no edge descends.
fn vertex_descent(problem: &LocalProblem, tau: f64, mut basis: Vec<usize>) -> Option<(DVector<f64>, f64, bool)> {
    let loss = LossSpec::Quantile { tau };
    let p = problem.p();
    let n = problem.n();
    let (up, down) = (2.0 * tau, 2.0 * (1.0 - tau));
    let mut in_basis = vec![false; n];
    for &i in &basis {
        in_basis[i] = true;
    }
    let solve_basis = |basis: &[usize]| {
        let a = DMatrix::from_fn(p, p, |i, j| problem.design[(basis[i], j)]);
        let b = DVector::from_fn(p, |i, _| problem.y[basis[i]]);
        let lu = a.lu();
        let theta = lu.solve(&b)?;
        Some((lu, theta))
    };
    let (mut lu, mut theta) = solve_basis(&basis)?;
    let mut r = problem.residuals(&theta);
    let mut value = problem.objective(&loss, &r);
    let tol = 1e-12 * (1.0 + r.amax());

    let mut optimal = false;
    for _ in 0..50 * (p + n) {
        // steepest descending edge
        let mut best: Option<(f64, usize, DVector<f64>, DVector<f64>)> = None;
        for (pos, _) in basis.iter().enumerate() {
            for s in [1.0, -1.0] {
                let mut e = DVector::zeros(p);
                e[pos] = s;
                let Some(dir) = lu.solve(&e) else { continue };
                let a = &problem.design * &dir;
                let mut slope = problem.w[basis[pos]] * if s > 0.0 { down } else { up };
                for i in 0..n {
                    if in_basis[i] || a[i] == 0.0 {
                        continue;
                    }
                    let wi = problem.w[i];
                    slope += if r[i] > tol {
                        -up * a[i] * wi
                    } else if r[i] < -tol {
                        down * a[i] * wi
                    } else if a[i] < 0.0 {
                        up * -a[i] * wi
                    } else {
                        down * a[i] * wi
                    };
                }
                if slope < -1e-14 * (1.0 + value) && best.as_ref().is_none_or(|b| slope < b.0) {
                    best = Some((slope, pos, dir, a));
                }
            }
        }
        let Some((mut slope, pos, dir, a)) = best else {
            optimal = true;
            break;
        };
        let mut breaks: Vec<(f64, usize)> = (0..n)
            .filter(|&i| !in_basis[i] && a[i] != 0.0)
            .map(|i| (r[i] / a[i], i))
            .filter(|&(t, _)| t > 0.0)
            .collect();
        breaks.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut entering = None;
        for &(t, i) in &breaks {
            slope += problem.w[i] * a[i].abs() * (up + down);
            if slope >= 0.0 {
                entering = Some((t, i));
                break;
            }
        }
        let Some((step, i)) = entering else { break };
        let candidate = &theta + &dir * step;
        let cand_r = problem.residuals(&candidate);
        let cand_value = problem.objective(&loss, &cand_r);
        if !(cand_value < value) {
            break;
        }
        in_basis[basis[pos]] = false;
        in_basis[i] = true;
        basis[pos] = i;
        let Some((new_lu, exact)) = solve_basis(&basis) else { break };
        lu = new_lu;
        theta = exact;
        r = problem.residuals(&theta);
        value = problem.objective(&loss, &r);
    }
    Some((theta, value, optimal))
}

fn assemble(problem: &LocalProblem, u0: &[f64], h: f64, sol: Solution) -> LocalFitResult {
    let (d, k) = (problem.d, problem.k);
    let beta_hat = sol.theta.rows(0, d).iter().copied().collect();
    let slope_hat = (0..d)
        .map(|r| (0..k).map(|l| sol.theta[d * (l + 1) + r] / h).collect())
        .collect();
    LocalFitResult {
        u0: u0.to_vec(),
        beta_hat,
        slope_hat,
        objective: sol.objective,
        n_local: problem.n(),
        iterations: sol.iterations,
        converged: sol.converged,
    }
}

/// Local-linear M-estimate at `u0`.
pub fn fit_at(ds: &SpatialDataset, u0: &[f64], cfg: &FitConfig) -> Result<LocalFitResult, FitError> {
    fit_at_excluding(ds, u0, cfg, &[])
}

/// As [`fit_at`], ignoring the observations at the given indices.
pub fn fit_at_excluding(ds: &SpatialDataset, u0: &[f64], cfg: &FitConfig, exclude: &[usize]) -> Result<LocalFitResult, FitError> {
    let problem = LocalProblem::build(ds, u0, cfg, exclude)?;
    let sol = solve(&problem, &cfg.loss, &cfg.solver, None)?;
    Ok(assemble(&problem, u0, cfg.bandwidth, sol))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub u0: Vec<f64>,
    pub fit: Option<LocalFitResult>,
    pub error: Option<FitError>,
}

/// Pointwise fits over an ordered grid of regime points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientCurve {
    pub config: FitConfig,
    pub x_names: Vec<String>,
    pub u_names: Vec<String>,
    pub points: Vec<CurvePoint>,
}

impl CoefficientCurve {
    pub fn grid(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.u0.clone()).collect()
    }

    pub fn fitted(&self) -> impl Iterator<Item = &LocalFitResult> {
        self.points.iter().filter_map(|p| p.fit.as_ref())
    }

    pub fn n_failed(&self) -> usize {
        self.points.iter().filter(|p| p.fit.is_none()).count()
    }

    /// `xᵀβ̂(u)`, interpolating linearly between bracketing grid points when `k = 1`
    /// and using the nearest fitted grid point otherwise.
    pub fn predict(&self, x: &[f64], u: &[f64]) -> Result<f64, FitError> {
        let beta = self.coefficients_at(u)?;
        if x.len() != beta.len() {
            return Err(FitError::DimensionMismatch { expected: beta.len(), got: x.len() });
        }
        Ok(x.iter().zip(&beta).map(|(a, b)| a * b).sum())
    }

    /// Interpolated `β̂(u)`.
    pub fn coefficients_at(&self, u: &[f64]) -> Result<Vec<f64>, FitError> {
        let fitted: Vec<&LocalFitResult> = self.fitted().collect();
        let k = self.u_names.len();
        if u.len() != k {
            return Err(FitError::DimensionMismatch { expected: k, got: u.len() });
        }
        let out_of_hull = || FitError::OutOfHull { u: u.to_vec() };
        if fitted.is_empty() {
            return Err(out_of_hull());
        }
        for l in 0..k {
            let lo = fitted.iter().map(|f| f.u0[l]).fold(f64::INFINITY, f64::min);
            let hi = fitted.iter().map(|f| f.u0[l]).fold(f64::NEG_INFINITY, f64::max);
            if !(u[l] >= lo && u[l] <= hi) {
                return Err(out_of_hull());
            }
        }
        if k == 1 {
            let t = u[0];
            let upper = fitted.partition_point(|f| f.u0[0] < t);
            let hi = fitted[upper.min(fitted.len() - 1)];
            if hi.u0[0] == t || upper == 0 {
                return Ok(hi.beta_hat.clone());
            }
            let lo = fitted[upper - 1];
            let frac = (t - lo.u0[0]) / (hi.u0[0] - lo.u0[0]);
            return Ok(lo.beta_hat.iter().zip(&hi.beta_hat).map(|(a, b)| a + frac * (b - a)).collect());
        }
        let nearest = fitted
            .iter()
            .min_by(|a, b| dist2(&a.u0, u).total_cmp(&dist2(&b.u0, u)))
            .expect("nonempty");
        Ok(nearest.beta_hat.clone())
    }
}

impl CoefficientCurve {
    /// [`coefficients_at`](Self::coefficients_at) after clamping `u` into the
    /// bounding box of the fitted grid points.
    pub fn coefficients_clamped(&self, u: &[f64]) -> Result<Vec<f64>, FitError> {
        let fitted: Vec<&LocalFitResult> = self.fitted().collect();
        if fitted.is_empty() || u.len() != self.u_names.len() {
            return self.coefficients_at(u);
        }
        let clamped: Vec<f64> = u
            .iter()
            .enumerate()
            .map(|(l, &v)| {
                let lo = fitted.iter().map(|f| f.u0[l]).fold(f64::INFINITY, f64::min);
                let hi = fitted.iter().map(|f| f.u0[l]).fold(f64::NEG_INFINITY, f64::max);
                v.clamp(lo, hi)
            })
            .collect();
        self.coefficients_at(&clamped)
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sorts a grid lexicographically and removes duplicates.
pub fn normalize_grid(mut grid: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>, FitError> {
    if grid.is_empty() || grid.iter().flatten().any(|v| !v.is_finite()) {
        return Err(FitError::InvalidGrid);
    }
    grid.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    grid.dedup();
    Ok(grid)
}

/// Fits at every grid point; failures are recorded per point.
pub fn fit_curve(ds: &SpatialDataset, grid: Vec<Vec<f64>>, cfg: &FitConfig) -> Result<CoefficientCurve, FitError> {
    let grid = normalize_grid(grid)?;
    let k = ds.u_dim();
    if let Some(bad) = grid.iter().find(|g| g.len() != k) {
        return Err(FitError::DimensionMismatch { expected: k, got: bad.len() });
    }
    let points: Vec<CurvePoint> = grid
        .into_par_iter()
        .map(|u0| match fit_at(ds, &u0, cfg) {
            Ok(fit) => CurvePoint { u0, fit: Some(fit), error: None },
            Err(e) => CurvePoint { u0, fit: None, error: Some(e) },
        })
        .collect();
    if points.iter().all(|p| p.fit.is_none()) {
        return Err(FitError::AllPointsFailed);
    }
    Ok(CoefficientCurve {
        config: *cfg,
        x_names: ds.x_names().to_vec(),
        u_names: ds.u_names().to_vec(),
        points,
    })
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `n` equally spaced points per regime axis between the 2.5% and 97.5%
/// sample quantiles, combined as a lexicographic product.
pub fn default_grid(ds: &SpatialDataset, n: usize) -> Vec<Vec<f64>> {
    let k = ds.u_dim();
    let axes: Vec<Vec<f64>> = (0..k)
        .map(|l| {
            let mut vals: Vec<f64> = ds.usable().map(|o| o.u[l]).collect();
            vals.sort_by(f64::total_cmp);
            linspace(quantile(&vals, 0.025), quantile(&vals, 0.975), n)
        })
        .collect();
    cartesian(&axes)
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5 * (a + b)],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub(crate) fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![vec![]], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}
