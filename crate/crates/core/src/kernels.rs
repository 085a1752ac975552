//! Product kernels on compact support.
//!
//! A [`KernelSpec`] is a product of identical univariate kernels supported on
//! `[-1, 1]`. Moment constants and the truncated-support matrices used for
//! boundary inference are obtained by adaptive Gauss–Legendre quadrature on
//! each axis; since the kernels factorise, every multivariate integral over a
//! box is a product of univariate ones.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Half-width of the support of every built-in univariate kernel.
pub const SUPPORT: f64 = 1.0;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum KernelError {
    #[error("expected a point of dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("kernel dimension must be at least 1")]
    ZeroDimension,
    #[error("boundary offset c[{axis}] = {value} outside [0, {max}]")]
    InvalidOffset { axis: usize, value: f64, max: f64 },
    #[error("truncated moment matrix is numerically singular (condition number {0:.3e})")]
    SingularDelta(f64),
    #[error("unsupported trend kernel order {0}; expected 2 or 4")]
    UnsupportedOrder(u32),
    #[error("unknown kernel family `{0}`")]
    UnknownFamily(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[default]
    Epanechnikov,
    Uniform,
    Biweight,
    Triweight,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Epanechnikov,
        KernelFamily::Uniform,
        KernelFamily::Biweight,
        KernelFamily::Triweight,
    ];

    /// Univariate kernel value, zero outside `[-1, 1]`.
    #[inline]
    pub fn univariate(self, t: f64) -> f64 {
        let a = t.abs();
        if a > SUPPORT {
            return 0.0;
        }
        let q = 1.0 - t * t;
        match self {
            KernelFamily::Epanechnikov => 0.75 * q,
            KernelFamily::Uniform => 0.5,
            KernelFamily::Biweight => 0.9375 * q * q,
            KernelFamily::Triweight => 1.09375 * q * q * q,
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KernelFamily::Epanechnikov => "epanechnikov",
            KernelFamily::Uniform => "uniform",
            KernelFamily::Biweight => "biweight",
            KernelFamily::Triweight => "triweight",
        };
        f.write_str(s)
    }
}

impl FromStr for KernelFamily {
    type Err = KernelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" | "epa" => Ok(KernelFamily::Epanechnikov),
            "uniform" | "box" => Ok(KernelFamily::Uniform),
            "biweight" | "quartic" => Ok(KernelFamily::Biweight),
            "triweight" => Ok(KernelFamily::Triweight),
            other => Err(KernelError::UnknownFamily(other.to_string())),
        }
    }
}

/// Product kernel `K(v) = Π_l k(v_l)` on `[-1, 1]^dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub dim: usize,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, dim: usize) -> Result<Self, KernelError> {
        if dim == 0 {
            return Err(KernelError::ZeroDimension);
        }
        Ok(KernelSpec { family, dim })
    }

    pub fn epanechnikov(dim: usize) -> Self {
        KernelSpec { family: KernelFamily::Epanechnikov, dim: dim.max(1) }
    }

    /// Support half-widths `M_l`, all equal to one for the built-in families.
    pub fn support(&self) -> Vec<f64> {
        vec![SUPPORT; self.dim]
    }

    pub fn eval(&self, v: &[f64]) -> Result<f64, KernelError> {
        if v.len() != self.dim {
            return Err(KernelError::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        Ok(self.weight(v))
    }

    /// Unchecked product evaluation; callers guarantee `v.len() == dim`.
    #[inline]
    pub(crate) fn weight(&self, v: &[f64]) -> f64 {
        let mut w = 1.0;
        for &t in v {
            w *= self.family.univariate(t);
            if w == 0.0 {
                return 0.0;
            }
        }
        w
    }

    /// Weight at `(u − u0) / h` without allocating.
    #[inline]
    pub(crate) fn scaled_weight(&self, u: &[f64], u0: &[f64], h: f64) -> f64 {
        let mut w = 1.0;
        for (a, b) in u.iter().zip(u0) {
            w *= self.family.univariate((a - b) / h);
            if w == 0.0 {
                return 0.0;
            }
        }
        w
    }

    pub fn moments(&self) -> KernelMoments {
        let f = self.family;
        let k = |t: f64| f.univariate(t);
        let mu = integrate(|t| k(t), -SUPPORT, SUPPORT);
        let nu = integrate(|t| k(t) * k(t), -SUPPORT, SUPPORT);
        let m2 = integrate(|t| t * t * k(t), -SUPPORT, SUPPORT);
        let m2sq = integrate(|t| t * t * k(t) * k(t), -SUPPORT, SUPPORT);
        let d = self.dim;
        let mu0 = mu.powi(d as i32);
        let nu0 = nu.powi(d as i32);
        let off = (d - 1) as i32;
        KernelMoments {
            mu0,
            nu0,
            m2: DMatrix::from_diagonal_element(d, d, m2 * mu.powi(off)),
            m2sq: DMatrix::from_diagonal_element(d, d, m2sq * nu.powi(off)),
        }
    }

    /// Moment matrices over the truncated support `Π_l [−c_l, M_l]`.
    ///
    /// `c_l = M_l` recovers the full support. The inverse of `Δ_c` is formed
    /// only when its condition number is below `1e12`.
    pub fn boundary_matrices(&self, c: &[f64]) -> Result<BoundaryMatrices, KernelError> {
        if c.len() != self.dim {
            return Err(KernelError::DimensionMismatch { expected: self.dim, got: c.len() });
        }
        for (axis, &value) in c.iter().enumerate() {
            if !(0.0..=SUPPORT).contains(&value) {
                return Err(KernelError::InvalidOffset { axis, value, max: SUPPORT });
            }
        }
        let f = self.family;
        // per-axis table of ∫ t^p k(t)^q over [−c_l, M]
        let table: Vec<[[f64; 3]; 2]> = c
            .iter()
            .map(|&cl| {
                let mut t = [[0.0; 3]; 2];
                for (q, row) in t.iter_mut().enumerate() {
                    for (p, cell) in row.iter_mut().enumerate() {
                        *cell = integrate(
                            |x| x.powi(p as i32) * f.univariate(x).powi(q as i32 + 1),
                            -cl,
                            SUPPORT,
                        );
                    }
                }
                t
            })
            .collect();
        let n = self.dim + 1;
        let build = |q: usize| {
            DMatrix::from_fn(n, n, |i, j| {
                // power of each axis contributed by the (i, j) entry
                (0..self.dim)
                    .map(|l| {
                        let p = usize::from(i == l + 1) + usize::from(j == l + 1);
                        table[l][q][p]
                    })
                    .product::<f64>()
            })
        };
        let delta_c = build(0);
        let delta_bar_c = build(1);
        let cond = spd_condition(&delta_c);
        if !(cond < 1e12) {
            return Err(KernelError::SingularDelta(cond));
        }
        let inv = delta_c
            .clone()
            .try_inverse()
            .ok_or(KernelError::SingularDelta(f64::INFINITY))?;
        let sandwich = &inv * &delta_bar_c * &inv;
        Ok(BoundaryMatrices {
            delta_row: inv.row(0).iter().copied().collect(),
            lambda11: sandwich[(0, 0)],
            delta_c,
            delta_bar_c,
        })
    }
}

/// `μ0 = ∫K`, `ν0 = ∫K²`, `∫uuᵀK` and `∫uuᵀK²`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMoments {
    pub mu0: f64,
    pub nu0: f64,
    pub m2: DMatrix<f64>,
    pub m2sq: DMatrix<f64>,
}

impl KernelMoments {
    /// Interior variance constant `ν0 / μ0²`.
    pub fn variance_factor(&self) -> f64 {
        self.nu0 / (self.mu0 * self.mu0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMatrices {
    pub delta_c: DMatrix<f64>,
    pub delta_bar_c: DMatrix<f64>,
    /// First row of `Δ_c⁻¹`.
    pub delta_row: Vec<f64>,
    /// `(1,1)` entry of `Δ_c⁻¹ Δ̄_c Δ_c⁻¹`.
    pub lambda11: f64,
}

/// Kernel `W` on the plane used to estimate spatial trends.
///
/// Order 2 is the plain product kernel. Order 4 multiplies each univariate
/// factor by `a − b t²`, with `a, b` solved so that the factor integrates to
/// one and has vanishing second moment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendKernelSpec {
    pub family: KernelFamily,
    pub order: u32,
    a: f64,
    b: f64,
}

impl TrendKernelSpec {
    pub fn new(family: KernelFamily, order: u32) -> Result<Self, KernelError> {
        let f = |t: f64| family.univariate(t);
        let (a, b) = match order {
            // the built-in families already integrate to one
            2 => (1.0, 0.0),
            4 => {
                let mu = integrate(f, -SUPPORT, SUPPORT);
                let m2 = integrate(|t| t * t * f(t), -SUPPORT, SUPPORT);
                let m4 = integrate(|t| t.powi(4) * f(t), -SUPPORT, SUPPORT);
                // a μ − b m2 = 1, a m2 − b m4 = 0
                let a = m4 / (mu * m4 - m2 * m2);
                (a, a * m2 / m4)
            }
            other => return Err(KernelError::UnsupportedOrder(other)),
        };
        Ok(TrendKernelSpec { family, order, a, b })
    }

    #[inline]
    pub fn univariate(&self, t: f64) -> f64 {
        let k = self.family.univariate(t);
        if k == 0.0 {
            0.0
        } else {
            (self.a - self.b * t * t) * k
        }
    }

    pub fn eval(&self, s: &[f64]) -> Result<f64, KernelError> {
        if s.len() != 2 {
            return Err(KernelError::DimensionMismatch { expected: 2, got: s.len() });
        }
        Ok(self.univariate(s[0]) * self.univariate(s[1]))
    }
}

impl Default for TrendKernelSpec {
    fn default() -> Self {
        TrendKernelSpec::new(KernelFamily::Epanechnikov, 2).expect("order 2 is supported")
    }
}

/// Condition number of a symmetric positive (semi)definite matrix.
pub(crate) fn spd_condition(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn gl_panel(f: &impl Fn(f64) -> f64, a: f64, b: f64, nodes: &[f64], weights: &[f64]) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    nodes.iter().zip(weights).map(|(&x, &w)| w * f(mid + half * x)).sum::<f64>() * half
}

/// Adaptive Gauss–Legendre quadrature on `[a, b]`.
///
/// Each panel is accepted when the 20-point rule agrees with the sum over its
/// two halves to `1e-13`. Every kernel integrand here is a polynomial on the
/// support, which the 20-point rule integrates exactly.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    thread_local! {
        static RULE: (Vec<f64>, Vec<f64>) = gauss_legendre(20);
    }
    RULE.with(|(nodes, weights)| adaptive(&f, a, b, nodes, weights, 0))
}

fn adaptive(f: &impl Fn(f64) -> f64, a: f64, b: f64, nodes: &[f64], weights: &[f64], depth: u32) -> f64 {
    if b <= a {
        return 0.0;
    }
    let whole = gl_panel(f, a, b, nodes, weights);
    let mid = 0.5 * (a + b);
    let left = gl_panel(f, a, mid, nodes, weights);
    let right = gl_panel(f, mid, b, nodes, weights);
    if (left + right - whole).abs() <= 1e-13 * (1.0 + whole.abs()) || depth >= 30 {
        left + right
    } else {
        adaptive(f, a, mid, nodes, weights, depth + 1) + adaptive(f, mid, b, nodes, weights, depth + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eval_examples() {
        let k1 = KernelSpec::epanechnikov(1);
        assert_eq!(k1.eval(&[0.0]).unwrap(), 0.75);
        assert_eq!(k1.eval(&[2.0]).unwrap(), 0.0);
        let k2 = KernelSpec::epanechnikov(2);
        assert!((k2.eval(&[0.0, 0.5]).unwrap() - 0.421875).abs() < 1e-15);
        assert_eq!(
            k2.eval(&[0.0]),
            Err(KernelError::DimensionMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn legendre_rule_is_exact_for_polynomials() {
        let (x, w) = gauss_legendre(20);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        let i38: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(38)).sum();
        assert!((i38 - 2.0 / 39.0).abs() < 1e-14);
    }

    #[test]
    fn integrate_handles_non_polynomials() {
        let v = integrate(|t: f64| t.exp(), 0.0, 1.0);
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-13);
    }

    #[test]
    fn one_dimensional_moments() {
        let m = KernelSpec::epanechnikov(1).moments();
        assert!((m.mu0 - 1.0).abs() < 1e-12);
        assert!((m.nu0 - 0.6).abs() < 1e-12);
        assert!((m.m2[(0, 0)] - 0.2).abs() < 1e-12);
        let u = KernelSpec::new(KernelFamily::Uniform, 1).unwrap().moments();
        assert!((u.nu0 - 0.5).abs() < 1e-12);
        assert!((u.m2[(0, 0)] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bivariate_epanechnikov_moments() {
        let m = KernelSpec::epanechnikov(2).moments();
        assert!((m.mu0 - 1.0).abs() < 1e-12);
        assert!((m.nu0 - 0.36).abs() < 1e-12);
        assert!((&m.m2 - DMatrix::from_diagonal_element(2, 2, 0.2)).amax() < 1e-12);
    }

    #[test]
    fn uniform_boundary_examples() {
        let spec = KernelSpec::new(KernelFamily::Uniform, 1).unwrap();
        let full = spec.boundary_matrices(&[1.0]).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0 / 3.0]);
        assert!((&full.delta_c - want).amax() < 1e-12);
        assert!((full.lambda11 - 0.5).abs() < 1e-12);

        let edge = spec.boundary_matrices(&[0.0]).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, 1.0 / 6.0]);
        assert!((&edge.delta_c - want).amax() < 1e-12);
    }

    #[test]
    fn epanechnikov_half_support() {
        let b = KernelSpec::epanechnikov(1).boundary_matrices(&[0.0]).unwrap();
        assert!((b.delta_c[(0, 0)] - 0.5).abs() < 1e-12);
        // one-sided estimation is noisier than two-sided
        assert!(b.lambda11 > 0.6);
    }

    #[test]
    fn boundary_rejects_bad_offsets() {
        let k = KernelSpec::epanechnikov(2);
        assert!(matches!(k.boundary_matrices(&[0.5]), Err(KernelError::DimensionMismatch { .. })));
        assert!(matches!(k.boundary_matrices(&[0.5, 1.5]), Err(KernelError::InvalidOffset { axis: 1, .. })));
        assert!(matches!(k.boundary_matrices(&[-0.1, 0.5]), Err(KernelError::InvalidOffset { axis: 0, .. })));
    }

    #[test]
    fn full_support_recovers_interior_constants() {
        for family in KernelFamily::ALL {
            for dim in 1..=2 {
                let spec = KernelSpec::new(family, dim).unwrap();
                let m = spec.moments();
                let b = spec.boundary_matrices(&vec![1.0; dim]).unwrap();
                assert!((b.delta_row[0] - 1.0 / m.mu0).abs() < 1e-6);
                assert!((b.lambda11 - m.variance_factor()).abs() < 1e-6);
                let block = b.delta_c.view((1, 1), (dim, dim)).into_owned();
                assert!((block - &m.m2).amax() < 1e-8);
                assert!((b.delta_c.clone() - b.delta_c.transpose()).amax() == 0.0);
            }
        }
    }

    #[test]
    fn trend_kernels() {
        let w2 = TrendKernelSpec::new(KernelFamily::Epanechnikov, 2).unwrap();
        let v = w2.eval(&[0.0, 0.0]).unwrap();
        assert!((v - 0.5625).abs() < 1e-15, "{v}");
        assert_eq!(
            TrendKernelSpec::new(KernelFamily::Epanechnikov, 3),
            Err(KernelError::UnsupportedOrder(3))
        );
        let w4 = TrendKernelSpec::new(KernelFamily::Epanechnikov, 4).unwrap();
        // the classic fourth-order Epanechnikov: (15/8 − 35/8 t²)·(3/4)(1 − t²)
        assert!((w4.a - 15.0 / 8.0).abs() < 1e-12);
        assert!((w4.b - 35.0 / 8.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kernel_is_symmetric(v in proptest::collection::vec(-1.5f64..1.5, 1..4), fam in 0usize..4) {
            let spec = KernelSpec::new(KernelFamily::ALL[fam], v.len()).unwrap();
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            prop_assert_eq!(spec.eval(&v).unwrap(), spec.eval(&neg).unwrap());
            prop_assert!(spec.eval(&v).unwrap() >= 0.0);
        }

        #[test]
        fn kernel_vanishes_off_support(
            v in proptest::collection::vec(-0.99f64..0.99, 1..4),
            axis in 0usize..3, excess in 1e-9f64..10.0, fam in 0usize..4
        ) {
            let mut v = v;
            let axis = axis % v.len();
            v[axis] = v[axis].signum().max(0.0) * 2.0 - 1.0;
            v[axis] *= 1.0 + excess;
            let spec = KernelSpec::new(KernelFamily::ALL[fam], v.len()).unwrap();
            prop_assert_eq!(spec.eval(&v).unwrap(), 0.0);
        }
    }
}
