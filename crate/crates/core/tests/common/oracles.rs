//! Brute-force reference solutions for the local fitting problem.
//!
//! Everything here is written from the defining formulas and shares no code
//! with the solver: its own design construction, its own Gaussian
//! elimination, its own loss expressions.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqfc::dataset::{Observation, Site, SpatialDataset, INTERCEPT};

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-11 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

pub fn epanechnikov(v: &[f64]) -> f64 {
    v.iter().map(|t| if t.abs() <= 1.0 { 0.75 * (1.0 - t * t) } else { 0.0 }).product()
}

pub fn check_loss(tau: f64, z: f64) -> f64 {
    if z >= 0.0 {
        2.0 * tau * z
    } else {
        2.0 * (tau - 1.0) * z
    }
}

/// Local rows `(y, design, weight)` with the unscaled slope parametrisation
/// `[X, (U − u0)_1 X, …, (U − u0)_k X]`.
pub fn local_rows(ds: &SpatialDataset, u0: &[f64], h: f64) -> Vec<(f64, Vec<f64>, f64)> {
    ds.usable()
        .filter_map(|o| {
            let scaled: Vec<f64> = o.u.iter().zip(u0).map(|(a, b)| (a - b) / h).collect();
            let w = epanechnikov(&scaled);
            if w <= 0.0 {
                return None;
            }
            let mut row = o.x.clone();
            for l in 0..u0.len() {
                row.extend(o.x.iter().map(|x| x * (o.u[l] - u0[l])));
            }
            Some((o.y, row, w))
        })
        .collect()
}

pub fn objective(rows: &[(f64, Vec<f64>, f64)], theta: &[f64], loss: impl Fn(f64) -> f64) -> f64 {
    rows.iter()
        .map(|(y, d, w)| w * loss(y - d.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>()))
        .sum()
}

/// Minimum check-loss objective over all basic solutions, i.e. fits that
/// interpolate some `p`-subset of the local observations.
pub fn basic_solution_minimum(rows: &[(f64, Vec<f64>, f64)], tau: f64) -> f64 {
    let p = rows[0].1.len();
    let n = rows.len();
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..p).collect();
    loop {
        let a: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].1.clone()).collect();
        let b: Vec<f64> = idx.iter().map(|&i| rows[i].0).collect();
        if let Some(theta) = gauss_solve(a, b) {
            best = best.min(objective(rows, &theta, |z| check_loss(tau, z)));
        }
        // next combination in lexicographic order
        let mut i = p;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if idx[i] < n - p + i {
                idx[i] += 1;
                for j in i + 1..p {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Weighted least squares via the normal equations.
pub fn wls(rows: &[(f64, Vec<f64>, f64)]) -> Vec<f64> {
    let p = rows[0].1.len();
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for (y, d, w) in rows {
        for i in 0..p {
            b[i] += w * d[i] * y;
            for j in 0..p {
                a[i][j] += w * d[i] * d[j];
            }
        }
    }
    gauss_solve(a, b).expect("nonsingular normal equations")
}

/// `min_a Σ w_i |y_i − a|` over the data points and midpoints of neighbours.
pub fn weighted_median_objective(values: &[(f64, f64)]) -> f64 {
    let mut ys: Vec<f64> = values.iter().map(|v| v.0).collect();
    ys.sort_by(f64::total_cmp);
    let mut cands = ys.clone();
    cands.extend(ys.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cands
        .iter()
        .map(|&a| values.iter().map(|(y, w)| w * (y - a).abs()).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Random dataset on a line of sites with `d` covariates (first is the
/// intercept) and `k` regime variables drawn from U(0,1).
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize, heavy_tails: bool) -> SpatialDataset {
    let obs = (0..n)
        .map(|i| {
            let mut x = vec![1.0];
            x.extend((1..d).map(|_| rng.random::<f64>() * 4.0 - 2.0));
            let u: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let signal: f64 = x.iter().enumerate().map(|(r, xr)| xr * (r as f64 + 1.0) * (1.0 + u[0])).sum();
            let e: f64 = if heavy_tails {
                let v: f64 = rng.random::<f64>() - 0.5;
                v / (1.0 - 2.0 * v.abs()).max(0.05)
            } else {
                rng.random::<f64>() - 0.5
            };
            Observation { site: Site(vec![i + 1, 1]), y: signal + e, x, u }
        })
        .collect();
    let mut x_names = vec![INTERCEPT.to_string()];
    x_names.extend((1..d).map(|j| format!("x{j}")));
    SpatialDataset::new(
        vec![n, 1],
        vec!["row".into(), "col".into()],
        "y".into(),
        x_names,
        (1..=k).map(|l| format!("u{l}")).collect(),
        true,
        obs,
    )
    .unwrap()
}

/// Intercept-only data mirrored about `u0`: each `(U, Y)` appears together
/// with `(2u0 − U, Y)`. The local objective is then even in the slope, so its
/// minimum is attained with zero slope and equals the weighted-median objective.
pub fn mirrored_dataset(rng: &mut ChaCha8Rng, pairs: usize, u0: f64, heavy_tails: bool) -> SpatialDataset {
    let mut obs = Vec::new();
    for i in 0..pairs {
        let off: f64 = rng.random_range(0.01..0.5);
        let v: f64 = rng.random::<f64>() - 0.5;
        let y = if heavy_tails { v / (1.0 - 2.0 * v.abs()).max(0.05) } else { 3.0 * v };
        for (j, u) in [u0 - off, u0 + off].into_iter().enumerate() {
            obs.push(Observation { site: Site(vec![2 * i + j + 1, 1]), y, x: vec![1.0], u: vec![u] });
        }
    }
    SpatialDataset::new(
        vec![2 * pairs, 1],
        vec!["row".into(), "col".into()],
        "y".into(),
        vec![INTERCEPT.to_string()],
        vec!["u1".into()],
        true,
        obs,
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
