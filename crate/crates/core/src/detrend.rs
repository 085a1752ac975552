//! Kernel estimation and removal of deterministic spatial trends.
//!
//! Each observed column is modelled as `Ṽ_i = α_V(s_i) + V_i` with a smooth
//! trend `α_V` of the rescaled location `s_i = (i_1/n_1, i_2/n_2)` and a
//! stationary part `V_i`. The trend is estimated by a normalised kernel
//! average over sites,
//!
//! ```text
//! α̂_V(s) = Σ_i Ṽ_i W((s_i − s)/g) / Σ_j W((s_j − s)/g)
//! ```
//!
//! and the detrended dataset holds `Ṽ_i − α̂_V(s_i)`. The intercept column is
//! left untouched.

use crate::dataset::{Observation, Site, SpatialDataset};
use crate::kernels::TrendKernelSpec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DetrendError {
    #[error("trend estimation needs a planar lattice, got {0} coordinates")]
    NotPlanar(usize),
    #[error("no observed site within the trend window at s = {s:?}")]
    EmptyWindow { s: Vec<f64> },
    #[error("trend bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("trend model was fitted on a different lattice or column layout")]
    ShapeMismatch,
}

/// Fitted trend surfaces tabulated at every site of the source dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendModel {
    pub g: f64,
    pub kernel: TrendKernelSpec,
    pub shape: Vec<usize>,
    /// Names of the detrended columns: response, non-intercept covariates, regime variables.
    pub columns: Vec<String>,
    pub sites: Vec<Site>,
    /// `fitted[i][c]` is the trend of column `c` at `sites[i]`.
    pub fitted: Vec<Vec<f64>>,
    #[serde(skip)]
    source: Vec<(Vec<f64>, Vec<f64>)>,
    /// Lattice position → index into `source`.
    #[serde(skip)]
    lookup: Vec<Option<usize>>,
}

/// `ñ^{-1/6}`.
pub fn default_trend_bandwidth(n: usize) -> f64 {
    (n.max(1) as f64).powf(-1.0 / 6.0)
}

/// Values of the detrended columns for one observation.
fn trend_values(ds: &SpatialDataset, obs: &Observation) -> Vec<f64> {
    let skip = usize::from(ds.has_intercept());
    let mut v = vec![obs.y];
    v.extend(&obs.x[skip..]);
    v.extend(&obs.u);
    v
}

fn column_names(ds: &SpatialDataset) -> Vec<String> {
    let skip = usize::from(ds.has_intercept());
    let mut names = vec![ds.y_name().to_string()];
    names.extend(ds.x_names()[skip..].iter().cloned());
    names.extend(ds.u_names().iter().cloned());
    names
}

impl TrendModel {
    /// Normalised weights `w(s_i, s)` over the usable source sites, in site order.
    pub fn weights_at(&self, s: &[f64]) -> Result<Vec<f64>, DetrendError> {
        let raw: Vec<f64> = self
            .source
            .iter()
            .map(|(si, _)| self.kernel.univariate((si[0] - s[0]) / self.g) * self.kernel.univariate((si[1] - s[1]) / self.g))
            .collect();
        let total: f64 = raw.iter().sum();
        if raw.iter().all(|&w| w == 0.0) || !(total > 0.0) {
            return Err(DetrendError::EmptyWindow { s: s.to_vec() });
        }
        Ok(raw.into_iter().map(|w| w / total).collect())
    }

    /// Trend of every column at an arbitrary rescaled location.
    pub fn evaluate(&self, s: &[f64]) -> Result<Vec<f64>, DetrendError> {
        if s.len() != 2 {
            return Err(DetrendError::NotPlanar(s.len()));
        }
        let (n1, n2) = (self.shape[0], self.shape[1]);
        let range = |c: f64, n: usize| {
            let lo = ((c - self.g) * n as f64).ceil().max(1.0);
            let hi = ((c + self.g) * n as f64).floor().min(n as f64);
            lo as usize..=hi as usize
        };
        let mut out = vec![0.0; self.columns.len()];
        let mut total = 0.0;
        let mut any = false;
        for i1 in range(s[0], n1) {
            let w1 = self.kernel.univariate((i1 as f64 / n1 as f64 - s[0]) / self.g);
            for i2 in range(s[1], n2) {
                let Some(idx) = self.lookup.get((i1 - 1) * n2 + i2 - 1).copied().flatten() else { continue };
                let w = w1 * self.kernel.univariate((i2 as f64 / n2 as f64 - s[1]) / self.g);
                if w == 0.0 {
                    continue;
                }
                any = true;
                total += w;
                for (o, v) in out.iter_mut().zip(&self.source[idx].1) {
                    *o += w * v;
                }
            }
        }
        if !any || !(total > 0.0) {
            return Err(DetrendError::EmptyWindow { s: s.to_vec() });
        }
        for o in &mut out {
            *o /= total;
        }
        Ok(out)
    }

    /// Tabulated trend of a named column, in site order.
    pub fn surface(&self, column: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == column)?;
        Some(self.fitted.iter().map(|row| row[c]).collect())
    }
}

/// Estimates the trends of the response, each non-intercept covariate and
/// each regime variable at every site of `ds`.
pub fn estimate_trend(ds: &SpatialDataset, g: f64, kernel: TrendKernelSpec) -> Result<TrendModel, DetrendError> {
    if ds.shape().len() != 2 {
        return Err(DetrendError::NotPlanar(ds.shape().len()));
    }
    if !(g > 0.0 && g.is_finite()) {
        return Err(DetrendError::InvalidBandwidth(g));
    }
    let shape = ds.shape().to_vec();
    let source: Vec<_> = ds.usable().map(|o| (o.site.rescaled(&shape), trend_values(ds, o))).collect();
    let mut lookup = vec![None; shape[0] * shape[1]];
    for (idx, o) in ds.usable().enumerate() {
        lookup[(o.site.0[0] - 1) * shape[1] + o.site.0[1] - 1] = Some(idx);
    }
    let mut model = TrendModel {
        g,
        kernel,
        shape: shape.clone(),
        columns: column_names(ds),
        sites: ds.observations().iter().map(|o| o.site.clone()).collect(),
        fitted: Vec::new(),
        source,
        lookup,
    };
    model.fitted = model
        .sites
        .par_iter()
        .map(|site| model.evaluate(&site.rescaled(&shape)))
        .collect::<Result<_, _>>()?;
    Ok(model)
}

/// Subtracts the fitted trends site by site.
pub fn detrend_dataset(ds: &SpatialDataset, model: &TrendModel) -> Result<SpatialDataset, DetrendError> {
    if ds.shape() != model.shape.as_slice()
        || column_names(ds) != model.columns
        || ds.observations().len() != model.sites.len()
        || ds.observations().iter().zip(&model.sites).any(|(o, s)| &o.site != s)
    {
        return Err(DetrendError::ShapeMismatch);
    }
    let skip = usize::from(ds.has_intercept());
    let d = ds.x_dim() - skip;
    let obs = ds
        .observations()
        .iter()
        .zip(&model.fitted)
        .map(|(o, trend)| {
            let mut x = o.x.clone();
            for (xj, t) in x[skip..].iter_mut().zip(&trend[1..=d]) {
                *xj -= t;
            }
            Observation {
                site: o.site.clone(),
                y: o.y - trend[0],
                x,
                u: o.u.iter().zip(&trend[1 + d..]).map(|(u, t)| u - t).collect(),
            }
        })
        .collect();
    Ok(ds.with_observations(obs))
}
