//! Cross-validated bandwidth selection.
//!
//! The CV criterion is the fitting loss itself: each evaluation site is
//! predicted from a fit at its own regime value with a block of sites held
//! out, and the loss of the prediction error is averaged. A block holds the
//! site and its `leave_out − 1` nearest lattice neighbours.

use crate::dataset::SpatialDataset;
use crate::localfit::{fit_at_excluding, FitConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest share of failed held-out fits a candidate may have and still be selected.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CvError {
    #[error("no held-out fit succeeded at h = {0}")]
    NoEvaluableSites(f64),
    #[error("every candidate bandwidth failed")]
    AllCandidatesFailed,
    #[error("candidate bandwidths must be positive, finite and strictly increasing")]
    InvalidGrid,
    #[error("leave-out block size must be at least 1")]
    InvalidLeaveOut,
    #[error("evaluation subset refers to observation {0}, which is missing or unusable")]
    InvalidSubset(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub h_grid: Vec<f64>,
    /// `1` is leave-one-out; `j` removes the site and its `j − 1` nearest neighbours.
    pub leave_out: usize,
    /// Loss, kernel and solver settings; its bandwidth is ignored.
    pub fit: FitConfig,
    /// Observation indices to score; all usable sites when `None`.
    pub eval_subset: Option<Vec<usize>>,
}

impl CvConfig {
    pub fn new(h_grid: Vec<f64>, fit: FitConfig) -> Self {
        CvConfig { h_grid, leave_out: 1, fit, eval_subset: None }
    }

    fn validate(&self) -> Result<(), CvError> {
        if self.leave_out == 0 {
            return Err(CvError::InvalidLeaveOut);
        }
        let ok = !self.h_grid.is_empty()
            && self.h_grid.iter().all(|h| *h > 0.0 && h.is_finite())
            && self.h_grid.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(CvError::InvalidGrid)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    pub h: f64,
    /// Mean held-out loss; `None` when no held-out fit succeeded.
    pub score: Option<f64>,
    pub failures: usize,
    pub evaluated: usize,
}

impl CvScore {
    pub fn failure_fraction(&self) -> f64 {
        let total = self.failures + self.evaluated;
        if total == 0 {
            1.0
        } else {
            self.failures as f64 / total as f64
        }
    }

    fn eligible(&self) -> bool {
        self.score.is_some() && self.failure_fraction() <= MAX_FAILURE_FRACTION
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub candidates: Vec<CvScore>,
    pub selected: f64,
    pub leave_out: usize,
}

/// Equally spaced candidates `start, start + step, …` up to `stop` inclusive.
pub fn range_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || stop < start {
        return vec![];
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| start + step * i as f64).collect()
}

/// Held-out observation indices for every site to be scored.
pub fn leave_out_blocks(ds: &SpatialDataset, sites: &[usize], leave_out: usize) -> Vec<Vec<usize>> {
    let usable = ds.usable_indices();
    let obs = ds.observations();
    sites
        .par_iter()
        .map(|&i| {
            if leave_out == 1 {
                return vec![i];
            }
            let centre = &obs[i].site.0;
            let mut cand: Vec<(i64, usize)> = usable
                .iter()
                .map(|&j| {
                    let d2 = obs[j]
                        .site
                        .0
                        .iter()
                        .zip(centre)
                        .map(|(&a, &b)| (a as i64 - b as i64).pow(2))
                        .sum::<i64>();
                    (d2, j)
                })
                .collect();
            // observations are stored in lexicographic site order, so index order breaks ties
            let take = leave_out.min(cand.len());
            if take < cand.len() {
                cand.select_nth_unstable(take);
            }
            cand.truncate(take);
            cand.sort_unstable();
            let mut block: Vec<usize> = cand.into_iter().map(|(_, j)| j).collect();
            if !block.contains(&i) {
                block.insert(0, i);
                block.truncate(leave_out);
            }
            block
        })
        .collect()
}

fn eval_sites(ds: &SpatialDataset, cfg: &CvConfig) -> Result<Vec<usize>, CvError> {
    match &cfg.eval_subset {
        None => Ok(ds.usable_indices()),
        Some(s) => {
            for &i in s {
                if ds.observations().get(i).is_none_or(|o| !o.is_usable()) {
                    return Err(CvError::InvalidSubset(i));
                }
            }
            Ok(s.clone())
        }
    }
}

fn score_with_blocks(ds: &SpatialDataset, h: f64, cfg: &CvConfig, sites: &[usize], blocks: &[Vec<usize>]) -> CvScore {
    let fit_cfg = cfg.fit.with_bandwidth(h);
    let obs = ds.observations();
    let losses: Vec<Option<f64>> = sites
        .par_iter()
        .zip(blocks.par_iter())
        .map(|(&i, block)| {
            let o = &obs[i];
            let fit = fit_at_excluding(ds, &o.u, &fit_cfg, block).ok()?;
            let pred: f64 = o.x.iter().zip(&fit.beta_hat).map(|(x, b)| x * b).sum();
            Some(cfg.fit.loss.value(o.y - pred))
        })
        .collect();
    let evaluated = losses.iter().flatten().count();
    let failures = losses.len() - evaluated;
    let score = (evaluated > 0).then(|| losses.iter().flatten().sum::<f64>() / evaluated as f64);
    CvScore { h, score, failures, evaluated }
}

/// Mean held-out loss at bandwidth `h` and the number of failed held-out fits.
pub fn cv_score(ds: &SpatialDataset, h: f64, cfg: &CvConfig) -> Result<(f64, usize), CvError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(CvError::InvalidGrid);
    }
    if cfg.leave_out == 0 {
        return Err(CvError::InvalidLeaveOut);
    }
    let sites = eval_sites(ds, cfg)?;
    let blocks = leave_out_blocks(ds, &sites, cfg.leave_out);
    let s = score_with_blocks(ds, h, cfg, &sites, &blocks);
    match s.score {
        Some(v) => Ok((v, s.failures)),
        None => Err(CvError::NoEvaluableSites(h)),
    }
}

/// Scores every candidate and selects the smallest CV score among those with
/// at most [`MAX_FAILURE_FRACTION`] failed sites; ties go to the larger bandwidth.
pub fn select_bandwidth(ds: &SpatialDataset, cfg: &CvConfig) -> Result<CvReport, CvError> {
    cfg.validate()?;
    let sites = eval_sites(ds, cfg)?;
    let blocks = leave_out_blocks(ds, &sites, cfg.leave_out);
    let candidates: Vec<CvScore> = cfg
        .h_grid
        .iter()
        .map(|&h| score_with_blocks(ds, h, cfg, &sites, &blocks))
        .collect();
    let mut best: Option<&CvScore> = None;
    for c in candidates.iter().filter(|c| c.eligible()) {
        if best.is_none_or(|b| c.score <= b.score) {
            best = Some(c);
        }
    }
    let selected = best.ok_or(CvError::AllCandidatesFailed)?.h;
    Ok(CvReport { candidates, selected, leave_out: cfg.leave_out })
}
