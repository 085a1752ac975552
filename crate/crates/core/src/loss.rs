//! Convex losses and their score functions.
//!
//! Three variants are shipped: the quantile check loss
//! `ρ_τ(z) = |z| + (2τ − 1) z`, the Huber-type loss whose derivative is the
//! clamp `ψ_c(z) = max(−1, min(z/c, 1))`, and squared error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("quantile level must lie in (0, 1), got {0}")]
    InvalidTau(f64),
    #[error("Huber threshold must be positive and finite, got {0}")]
    InvalidHuberC(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Quantile { tau: f64 },
    Huber { c: f64 },
    Squared,
}

impl LossSpec {
    pub fn quantile(tau: f64) -> Result<Self, LossError> {
        if tau > 0.0 && tau < 1.0 {
            Ok(LossSpec::Quantile { tau })
        } else {
            Err(LossError::InvalidTau(tau))
        }
    }

    pub fn huber(c: f64) -> Result<Self, LossError> {
        if c > 0.0 && c.is_finite() {
            Ok(LossSpec::Huber { c })
        } else {
            Err(LossError::InvalidHuberC(c))
        }
    }

    /// Loss value `ρ(z)`. Always nonnegative with `ρ(0) = 0`.
    pub fn value(&self, z: f64) -> f64 {
        match *self {
            LossSpec::Quantile { tau } => z.abs() + (2.0 * tau - 1.0) * z,
            LossSpec::Huber { c } => {
                let a = z.abs();
                if a <= c {
                    0.5 * z * z / c
                } else {
                    a - 0.5 * c
                }
            }
            LossSpec::Squared => z * z,
        }
    }

    /// An element of the subdifferential of `ρ` at `z`.
    ///
    /// At the kink of the check loss the midpoint `2τ − 1` is returned.
    pub fn score(&self, z: f64) -> f64 {
        match *self {
            LossSpec::Quantile { tau } => {
                if z > 0.0 {
                    2.0 * tau
                } else if z < 0.0 {
                    2.0 * (tau - 1.0)
                } else {
                    2.0 * tau - 1.0
                }
            }
            LossSpec::Huber { c } => (z / c).clamp(-1.0, 1.0),
            LossSpec::Squared => 2.0 * z,
        }
    }

    /// `true` when minimisers scale with the response (`ρ(cz) = cρ(z)` up to a constant factor).
    pub fn is_scale_equivariant(&self) -> bool {
        !matches!(self, LossSpec::Huber { .. })
    }

    pub fn tau(&self) -> Option<f64> {
        match *self {
            LossSpec::Quantile { tau } => Some(tau),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Quantile { .. } => "quantile",
            LossSpec::Huber { .. } => "huber",
            LossSpec::Squared => "squared",
        }
    }

    /// Smoothed loss used inside the reweighting solver.
    ///
    /// The kink of the check loss is rounded with `√(z² + ε²) − ε`; the other
    /// variants are already differentiable and are returned unchanged.
    pub(crate) fn smoothed_value(&self, z: f64, eps: f64) -> f64 {
        match *self {
            LossSpec::Quantile { tau } => {
                (z * z + eps * eps).sqrt() - eps + (2.0 * tau - 1.0) * z
            }
            _ => self.value(z),
        }
    }

    /// Quadratic majoriser of the smoothed loss at residual `r`.
    ///
    /// Returns `(a, b)` such that `½ a z² + b z` (plus a constant) touches the
    /// smoothed loss at `z = r` and lies above it everywhere.
    pub(crate) fn majorizer(&self, r: f64, eps: f64) -> (f64, f64) {
        match *self {
            LossSpec::Quantile { tau } => ((r * r + eps * eps).sqrt().recip(), 2.0 * tau - 1.0),
            LossSpec::Huber { c } => {
                let a = r.abs();
                if a <= c {
                    (1.0 / c, 0.0)
                } else {
                    (1.0 / a, 0.0)
                }
            }
            LossSpec::Squared => (2.0, 0.0),
        }
    }

    pub(crate) fn needs_smoothing(&self) -> bool {
        matches!(self, LossSpec::Quantile { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_specs() -> Vec<LossSpec> {
        vec![
            LossSpec::quantile(0.25).unwrap(),
            LossSpec::quantile(0.5).unwrap(),
            LossSpec::quantile(0.9).unwrap(),
            LossSpec::huber(0.7).unwrap(),
            LossSpec::huber(2.0).unwrap(),
            LossSpec::Squared,
        ]
    }

    #[test]
    fn quantile_values() {
        assert_eq!(LossSpec::quantile(0.5).unwrap().value(-3.0), 3.0);
        assert_eq!(LossSpec::quantile(0.25).unwrap().value(2.0), 1.0);
    }

    #[test]
    fn huber_value_matches_integrated_score() {
        let spec = LossSpec::huber(1.0).unwrap();
        assert!((spec.value(3.0) - 2.5).abs() < 1e-15);
        // trapezoid integral of the clamp score from 0 to z
        for &z in &[-4.0, -0.3, 0.8, 3.0] {
            let n = 200_000;
            let dz = z / n as f64;
            let mut acc = 0.0;
            for i in 0..n {
                let a = spec.score(i as f64 * dz);
                let b = spec.score((i + 1) as f64 * dz);
                acc += 0.5 * (a + b) * dz;
            }
            assert!((acc - spec.value(z)).abs() < 1e-8, "z={z}: {acc} vs {}", spec.value(z));
        }
    }

    #[test]
    fn score_examples() {
        let q = LossSpec::quantile(0.25).unwrap();
        assert_eq!(q.score(1.0), 0.5);
        assert_eq!(q.score(-1.0), -1.5);
        let h = LossSpec::huber(2.0).unwrap();
        assert_eq!(h.score(1.0), 0.5);
        assert_eq!(h.score(5.0), 1.0);
        assert_eq!(h.score(-5.0), -1.0);
        for tau in [0.1, 0.33, 0.5, 0.8] {
            assert_eq!(LossSpec::quantile(tau).unwrap().score(0.0), 2.0 * tau - 1.0);
        }
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert_eq!(LossSpec::quantile(0.0), Err(LossError::InvalidTau(0.0)));
        assert_eq!(LossSpec::quantile(1.0), Err(LossError::InvalidTau(1.0)));
        assert!(LossSpec::huber(0.0).is_err());
        assert!(LossSpec::huber(f64::INFINITY).is_err());
    }

    #[test]
    fn zero_at_origin() {
        for s in all_specs() {
            assert_eq!(s.value(0.0), 0.0);
        }
    }

    #[test]
    fn quantile_score_second_moment() {
        // E ψ_τ(ε)² = 4τ(1−τ) when P(ε < 0) = τ
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for tau in [0.15, 0.5, 0.85] {
            let spec = LossSpec::quantile(tau).unwrap();
            let n = 200_000;
            let mut acc = 0.0;
            for _ in 0..n {
                // ε = V − τ with V ~ U(0,1) has P(ε < 0) = τ
                let e: f64 = rng.random::<f64>() - tau;
                acc += spec.score(e).powi(2);
            }
            let m = acc / n as f64;
            let target = 4.0 * tau * (1.0 - tau);
            // sd of ψ² is bounded by 4 so 5 standard errors is below 0.05
            assert!((m - target).abs() < 0.05, "tau={tau}: {m} vs {target}");
        }
    }

    proptest! {
        #[test]
        fn divided_differences_nondecreasing(
            a in -10.0f64..10.0, gap1 in 1e-3f64..5.0, gap2 in 1e-3f64..5.0, which in 0usize..6
        ) {
            let s = all_specs()[which];
            let (z1, z2, z3) = (a, a + gap1, a + gap1 + gap2);
            let d1 = (s.value(z2) - s.value(z1)) / (z2 - z1);
            let d2 = (s.value(z3) - s.value(z2)) / (z3 - z2);
            prop_assert!(d2 >= d1 - 1e-9);
        }

        #[test]
        fn score_is_subgradient(z in -10.0f64..10.0, delta in -10.0f64..10.0, which in 0usize..6) {
            let s = all_specs()[which];
            prop_assert!(s.value(z + delta) >= s.value(z) + s.score(z) * delta - 1e-9);
        }

        #[test]
        fn quantile_positive_part_identity(z in -1e3f64..1e3, tau in 0.01f64..0.99) {
            let s = LossSpec::quantile(tau).unwrap();
            let pos = z.max(0.0);
            let neg = (-z).max(0.0);
            let rhs = 2.0 * (tau * pos + (1.0 - tau) * neg);
            prop_assert!((s.value(z) - rhs).abs() <= 1e-12 * (1.0 + z.abs()));
        }

        #[test]
        fn majorizer_lies_above_smoothed_loss(
            r in -5.0f64..5.0, z in -5.0f64..5.0, which in 0usize..6
        ) {
            let s = all_specs()[which];
            let eps = 1e-3;
            let (a, b) = s.majorizer(r, eps);
            let surrogate = |t: f64| 0.5 * a * t * t + b * t;
            // the surrogate minus its value at r, plus the loss at r
            let bound = s.smoothed_value(r, eps) + surrogate(z) - surrogate(r);
            prop_assert!(bound >= s.smoothed_value(z, eps) - 1e-9);
        }
    }
}
