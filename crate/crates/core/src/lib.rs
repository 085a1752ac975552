//! Robust functional-coefficient regression for spatial lattice data.
//!
//! Coefficient curves `β(u)` in `Y = Σ_r β_r(U) X_r + ε` are estimated by
//! local-linear M-estimation under quantile, Huber-type or squared loss.
//! Around the solver sit kernel detrending for nonstationary fields,
//! cross-validated bandwidth choice, asymptotic pointwise confidence bands,
//! and a moving-average random-field simulator for Monte Carlo checks.

pub mod dataset;
pub mod detrend;
pub mod inference;
pub mod bandwidth;
pub mod kernels;
pub mod localfit;
pub mod simulate;
pub mod loss;

pub use dataset::{ColumnSchema, DatasetError, Direction, Observation, Site, SpatialDataset};
pub use kernels::{BoundaryMatrices, KernelFamily, KernelMoments, KernelSpec, TrendKernelSpec};
pub use localfit::{fit_at, fit_curve, CoefficientCurve, FitConfig, FitError, LocalFitResult};
pub use loss::LossSpec;
