//! End-to-end soil-style analysis on bundled synthetic data.
//!
//! A 25×10 lattice carries a response `ctc`, three chemistry covariates and a
//! regime index `ph`, each with a smooth spatial trend. The pipeline detrends
//! every column, adds the four nearest-neighbour values of the detrended
//! response as covariates, picks `h` by leave-one-out CV with the check loss
//! at τ ∈ {0.15, 0.5, 0.85}, fits the coefficient curves and computes 95%
//! pointwise bands.

use crate::args::DemoArgs;
use crate::commands::{bands_csv, curve_csv, curve_rows, cv_csv, fit_grid, Context};
use crate::error::CliError;
use crate::output::{write_csv, write_json};
use serde::{Deserialize, Serialize};
use sqfc::bandwidth::{range_grid, select_bandwidth, CvConfig};
use sqfc::dataset::Direction;
use sqfc::detrend::{default_trend_bandwidth, detrend_dataset, estimate_trend};
use sqfc::inference::{bands, VarianceMode};
use sqfc::localfit::default_grid;
use sqfc::simulate::covariate_field;
use sqfc::{ColumnSchema, FitConfig, KernelSpec, LossSpec, SpatialDataset, TrendKernelSpec};
use std::fs::{self, File};
use std::path::{Path, PathBuf};

pub const SOIL_CSV: &str = include_str!("../demo/soil_synthetic.csv");
pub const SHAPE: [usize; 2] = [25, 10];
pub const TAUS: [f64; 3] = [0.15, 0.5, 0.85];
pub const LEVEL: f64 = 0.95;
const SEED: u64 = 250;
const GRID_POINTS: usize = 41;

/// Bundled data as produced by [`synthetic_soil_csv`].
pub fn soil_schema() -> ColumnSchema {
    ColumnSchema::new(&["row", "col"], "ctc", &["ca", "mg", "k"], &["ph"])
}

/// Regenerates the bundled CSV, values rounded to four decimals.
pub fn synthetic_soil_csv() -> String {
    let [n1, n2] = SHAPE;
    let field = |index| covariate_field(SHAPE, 1, SEED, index);
    let (z_ph, z_ca, z_mg, z_k, z_e) = (field(1), field(2), field(3), field(4), field(5));
    let mut out = String::from("row,col,ctc,ph,ca,mg,k\n");
    for i in 1..=n1 {
        for j in 1..=n2 {
            let idx = (i - 1) * n2 + j - 1;
            let (s1, s2) = (i as f64 / n1 as f64, j as f64 / n2 as f64);
            let u = 0.35 * z_ph[idx];
            let (ca, mg, k) = (z_ca[idx], 0.8 * z_mg[idx], 0.6 * z_k[idx]);
            let stationary = 0.6 * u + (1.0 + 3.0 * u * u) * ca + (0.5 - 1.2 * u) * mg + 0.4 * k + 0.5 * z_e[idx];
            let ctc = 10.0 + 2.0 * s1 - 1.5 * s2 * s2 + stationary;
            let ph = 5.0 + 0.6 * s1 - 0.4 * s2 + 0.3 * s1 * s2 + u;
            let ca = 3.0 + 0.8 * s1 * s2 + ca;
            let mg = 1.5 - 0.5 * s2 + mg;
            let k = 0.8 + 0.3 * s1 * s1 + k;
            out.push_str(&format!("{i},{j},{ctc:.4},{ph:.4},{ca:.4},{mg:.4},{k:.4}\n"));
        }
    }
    out
}

pub fn soil_dataset() -> Result<SpatialDataset, CliError> {
    Ok(SpatialDataset::from_csv_reader(SOIL_CSV.as_bytes(), &soil_schema(), Some(&SHAPE))?)
}

/// CV candidates: a narrow range for the median, a wider one for the tails.
pub fn cv_grid(tau: f64) -> Vec<f64> {
    if tau == 0.5 {
        range_grid(0.15, 0.30, 0.01)
    } else {
        range_grid(0.25, 0.60, 0.01)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub tau: f64,
    pub bandwidth: f64,
    pub failed_points: usize,
    pub flagged_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub trend_bandwidth: f64,
    pub n_sites: usize,
    pub n_usable: usize,
    pub covariates: Vec<String>,
    pub quantiles: Vec<QuantileSummary>,
}

fn tag(tau: f64) -> String {
    format!("tau{:03}", (tau * 100.0).round() as u32)
}

pub fn run(ctx: &Context, a: &DemoArgs) -> Result<(), CliError> {
    let out = &a.out;
    fs::create_dir_all(out)?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut push = |p: PathBuf| {
        outputs.push(p.clone());
        p
    };
    let raw = soil_dataset()?;
    fs::write(push(out.join("soil_synthetic.csv")), SOIL_CSV)?;

    let g = default_trend_bandwidth(raw.n_usable());
    let trend = estimate_trend(&raw, g, TrendKernelSpec::default())?;
    let detrended = detrend_dataset(&raw, &trend)?;
    detrended.write_csv(File::create(push(out.join("detrended.csv")))?)?;
    write_json(&push(out.join("detrended.trend.json")), &trend)?;
    ctx.log.info("demo", format!("detrended {} sites with g = {g:.4}", raw.n_usable()));

    let ds = detrended.augment_neighbors("ctc", &Direction::ALL)?;
    let mut quantiles = Vec::new();
    for tau in TAUS {
        let t = tag(tau);
        let fit = FitConfig::new(LossSpec::quantile(tau)?, KernelSpec::epanechnikov(1), 1.0);
        let cv = CvConfig { h_grid: cv_grid(tau), leave_out: 1, fit, eval_subset: None };
        let report = select_bandwidth(&ds, &cv)?;
        write_json(&push(out.join(format!("cv_{t}.json"))), &report)?;
        let (head, rows) = cv_csv(&report);
        write_csv(&push(out.join(format!("cv_{t}.csv"))), &head, &rows)?;

        let h = report.selected;
        let curve = fit_grid(&ds, default_grid(&ds, GRID_POINTS), &fit.with_bandwidth(h))?;
        write_json(&push(out.join(format!("curve_{t}.json"))), &curve_rows(&curve))?;
        let (head, rows) = curve_csv(&curve);
        write_csv(&push(out.join(format!("curve_{t}.csv"))), &head, &rows)?;

        let b = bands(&curve, &ds, &VarianceMode::Independent, LEVEL)?;
        write_json(&push(out.join(format!("bands_{t}.json"))), &b)?;
        let (head, rows) = bands_csv(&b);
        write_csv(&push(out.join(format!("bands_{t}.csv"))), &head, &rows)?;
        ctx.log.info("demo", format!("tau = {tau}: CV selected h = {h}"));
        quantiles.push(QuantileSummary {
            tau,
            bandwidth: h,
            failed_points: curve.n_failed(),
            flagged_columns: b.diagnostics.iter().filter(|d| d.flagged).map(|d| d.column.clone()).collect(),
        });
    }
    let summary = DemoSummary {
        trend_bandwidth: g,
        n_sites: ds.observations().len(),
        n_usable: ds.n_usable(),
        covariates: ds.x_names().to_vec(),
        quantiles,
    };
    let summary_path = push(out.join("summary.json"));
    write_json(&summary_path, &summary)?;
    let config = serde_json::json!({
        "shape": SHAPE,
        "trend_bandwidth": g,
        "taus": TAUS,
        "cv_grids": TAUS.map(cv_grid),
        "grid_points": GRID_POINTS,
        "level": LEVEL,
    });
    ctx.manifest("demo", &summary_path, config, vec![], outputs)?;

    if let Some(reference) = &a.compare {
        let diffs = compare_dirs(out, reference, 1e-10)?;
        if !diffs.is_empty() {
            for d in &diffs {
                ctx.log.error("demo", d);
            }
            return Err(CliError::Numerical(format!("{} differences from {}", diffs.len(), reference.display())));
        }
        ctx.log.info("demo", format!("outputs match {}", reference.display()));
    }
    Ok(())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn compare_json(path: &str, a: &serde_json::Value, b: &serde_json::Value, tol: f64, diffs: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
            if !close(x, y, tol) {
                diffs.push(format!("{path}: {x} vs {y}"));
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                compare_json(&format!("{path}[{i}]"), p, q, tol, diffs);
            }
        }
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => {
            for (k, p) in x {
                match y.get(k) {
                    Some(q) => compare_json(&format!("{path}.{k}"), p, q, tol, diffs),
                    None => diffs.push(format!("{path}.{k}: missing")),
                }
            }
        }
        _ if a == b => {}
        _ => diffs.push(format!("{path}: structure differs")),
    }
}

fn compare_csv(path: &str, a: &str, b: &str, tol: f64, diffs: &mut Vec<String>) {
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    if la.len() != lb.len() {
        diffs.push(format!("{path}: {} lines vs {}", la.len(), lb.len()));
        return;
    }
    for (n, (x, y)) in la.iter().zip(&lb).enumerate() {
        let (cx, cy): (Vec<&str>, Vec<&str>) = (x.split(',').collect(), y.split(',').collect());
        let same = cx.len() == cy.len()
            && cx.iter().zip(&cy).all(|(p, q)| match (p.parse::<f64>(), q.parse::<f64>()) {
                (Ok(p), Ok(q)) => close(p, q, tol),
                _ => p == q,
            });
        if !same {
            diffs.push(format!("{path}:{}: `{x}` vs `{y}`", n + 1));
        }
    }
}

/// Differences between the outputs in `dir` and those in `reference`,
/// numbers compared to a relative tolerance. Manifests are skipped.
pub fn compare_dirs(dir: &Path, reference: &Path, tol: f64) -> Result<Vec<String>, CliError> {
    let mut names: Vec<String> = fs::read_dir(reference)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !n.ends_with(".manifest.json"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::data(format!("{} holds no reference outputs", reference.display())));
    }
    let mut diffs = Vec::new();
    for name in names {
        let (ours, theirs) = (dir.join(&name), reference.join(&name));
        let Ok(a) = fs::read_to_string(&ours) else {
            diffs.push(format!("{name}: missing"));
            continue;
        };
        let b = fs::read_to_string(&theirs)?;
        if name.ends_with(".json") {
            let (va, vb): (serde_json::Value, serde_json::Value) = (serde_json::from_str(&a)?, serde_json::from_str(&b)?);
            compare_json(&name, &va, &vb, tol, &mut diffs);
        } else if a != b {
            compare_csv(&name, &a, &b, tol, &mut diffs);
        }
    }
    Ok(diffs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_data_matches_the_generator() {
        let generated = synthetic_soil_csv();
        if std::env::var_os("SQFC_REGENERATE").is_some() {
            fs::write(concat!(env!("CARGO_MANIFEST_DIR"), "/demo/soil_synthetic.csv"), &generated).unwrap();
            return;
        }
        assert_eq!(SOIL_CSV, generated);
        let ds = soil_dataset().unwrap();
        assert_eq!(ds.n_usable(), 250);
        let aug = ds.augment_neighbors("ctc", &Direction::ALL).unwrap();
        assert_eq!(aug.n_usable(), 23 * 8);
    }

    #[test]
    fn comparison_respects_the_tolerance() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        fs::write(a.path().join("x.json"), r#"{"v": [1.0, 2.0], "s": "k"}"#).unwrap();
        fs::write(b.path().join("x.json"), r#"{"v": [1.0, 2.00000000000001], "s": "k"}"#).unwrap();
        fs::write(a.path().join("t.csv"), "h,score\n0.1,3.5\n").unwrap();
        fs::write(b.path().join("t.csv"), "h,score\n0.1,3.5\n").unwrap();
        fs::write(b.path().join("x.json.manifest.json"), "{}").unwrap();
        assert!(compare_dirs(a.path(), b.path(), 1e-10).unwrap().is_empty());
        fs::write(b.path().join("t.csv"), "h,score\n0.1,3.5000001\n").unwrap();
        fs::write(b.path().join("x.json"), r#"{"v": [1.0, 2.0], "s": "j"}"#).unwrap();
        assert_eq!(compare_dirs(a.path(), b.path(), 1e-10).unwrap().len(), 2);
    }
}
