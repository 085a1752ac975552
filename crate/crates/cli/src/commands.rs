use crate::args::*;
use crate::error::CliError;
use crate::output::*;
use serde::{Deserialize, Serialize};
use sqfc::bandwidth::{range_grid, select_bandwidth, CvConfig, CvReport};
use sqfc::dataset::{format_value, Direction};
use sqfc::detrend::{default_trend_bandwidth, detrend_dataset, estimate_trend};
use sqfc::inference::{bands, BandResult, VarianceMode};
use sqfc::localfit::{default_grid, fit_at, linspace, normalize_grid, CurvePoint};
use sqfc::simulate::{generate, run_mc, split_list, BandwidthRule, BetaFn, DetrendSettings, DgpConfig, ErrorDist, McConfig, McReport, Trends};
use sqfc::{CoefficientCurve, ColumnSchema, FitConfig, FitError, KernelFamily, KernelSpec, LocalFitResult, LossSpec, SpatialDataset, TrendKernelSpec};
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Per-run state shared by the subcommands.
pub struct Context {
    pub log: Logger,
    pub argv: Vec<String>,
    pub start: Instant,
}

impl Context {
    /// Writes `<primary>.manifest.json` describing this run.
    pub fn manifest(
        &self,
        subcommand: &str,
        primary: &Path,
        config: impl Serialize,
        inputs: Vec<InputDigest>,
        outputs: Vec<PathBuf>,
    ) -> Result<RunManifest, CliError> {
        let m = RunManifest {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            argv: self.argv.clone(),
            config: serde_json::to_value(config)?,
            inputs,
            outputs,
            threads: rayon::current_num_threads(),
            wall_time_secs: self.start.elapsed().as_secs_f64(),
        };
        write_json(&manifest_path(primary), &m)?;
        Ok(m)
    }
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| CliError::usage(format!("bad number `{t}`"))))
        .collect()
}

fn names(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

pub fn parse_shape(s: &str) -> Result<Vec<usize>, CliError> {
    let dims: Result<Vec<usize>, _> = s.split(['x', 'X']).map(|t| t.trim().parse::<usize>()).collect();
    match dims {
        Ok(d) if !d.is_empty() && d.iter().all(|&n| n > 0) => Ok(d),
        _ => Err(CliError::usage(format!("bad shape `{s}`, expected e.g. 30x30"))),
    }
}

/// `independent` or `conditional:COLS`, columns by covariate name or index.
pub fn parse_mode(s: &str, x_names: &[String]) -> Result<VarianceMode, CliError> {
    let s = s.trim();
    if s == "independent" {
        return Ok(VarianceMode::Independent);
    }
    let Some(cols) = s.strip_prefix("conditional:") else {
        return Err(CliError::usage(format!("bad variance mode `{s}`")));
    };
    let idx = names(cols)
        .iter()
        .map(|c| {
            x_names
                .iter()
                .position(|n| n == c)
                .or_else(|| c.parse::<usize>().ok().filter(|&i| i < x_names.len()))
                .ok_or_else(|| CliError::usage(format!("unknown covariate `{c}` in variance mode")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VarianceMode::Conditional(idx))
}

fn header(path: &Path) -> Result<Vec<String>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(r.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

pub fn load_data(a: &DataArgs) -> Result<SpatialDataset, CliError> {
    let coords = names(&a.coords);
    let u = names(&a.u);
    let x = match &a.x {
        Some(x) => names(x),
        None => header(&a.input)?.into_iter().filter(|h| !coords.contains(h) && h != &a.y && !u.contains(h)).collect(),
    };
    let schema = ColumnSchema { coords, y: a.y.clone(), x, u, intercept: !a.no_intercept };
    let shape = a.shape.as_deref().map(parse_shape).transpose()?;
    let mut ds = SpatialDataset::load_csv(&a.input, &schema, shape.as_deref())?;
    if let Some(spec) = &a.neighbors {
        let (source, dirs) = match spec.split_once(':') {
            Some((s, d)) => (s, d.split(',').map(str::parse).collect::<Result<Vec<Direction>, _>>()?),
            None => (spec.as_str(), Direction::ALL.to_vec()),
        };
        ds = ds.augment_neighbors(source, &dirs)?;
    }
    Ok(ds)
}

pub fn loss_spec(a: &LossArgs) -> Result<LossSpec, CliError> {
    Ok(match a.loss {
        LossKind::Quantile => LossSpec::quantile(a.tau)?,
        LossKind::Huber => LossSpec::huber(a.huber_c)?,
        LossKind::Squared => LossSpec::Squared,
    })
}

pub fn fit_config(a: &LossArgs, bandwidth: f64, k: usize) -> Result<FitConfig, CliError> {
    let family: KernelFamily = a.kernel.parse()?;
    Ok(FitConfig::new(loss_spec(a)?, KernelSpec::new(family, k)?, bandwidth))
}

fn read_grid(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| parse_f64_list(l).map_err(|e| CliError::data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Variant name and message, e.g. `InsufficientSupport: only 0 observations …`.
fn describe(e: &FitError) -> String {
    let dbg = format!("{e:?}");
    let name = dbg.split([' ', '(']).next().unwrap_or_default();
    format!("{name}: {e}")
}

/// Fits a curve; when every point fails the first failure is reported.
pub fn fit_grid(ds: &SpatialDataset, grid: Vec<Vec<f64>>, cfg: &FitConfig) -> Result<CoefficientCurve, CliError> {
    match sqfc::fit_curve(ds, grid.clone(), cfg) {
        Ok(c) => Ok(c),
        Err(FitError::AllPointsFailed) => {
            let u0 = normalize_grid(grid)?.swap_remove(0);
            let cause = fit_at(ds, &u0, cfg).err().map(|e| describe(&e)).unwrap_or_default();
            Err(CliError::Numerical(format!("every grid point failed; at u0 = {u0:?}: {cause}")))
        }
        Err(e) => Err(e.into()),
    }
}

/// One grid point of a fitted curve as written by `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub u0: Vec<f64>,
    pub beta: Option<Vec<f64>>,
    pub slope: Option<Vec<Vec<f64>>>,
    pub objective: Option<f64>,
    pub n_local: usize,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<FitError>,
}

pub fn curve_rows(curve: &CoefficientCurve) -> Vec<CurveRow> {
    curve
        .points
        .iter()
        .map(|p| match &p.fit {
            Some(f) => CurveRow {
                u0: p.u0.clone(),
                beta: Some(f.beta_hat.clone()),
                slope: Some(f.slope_hat.clone()),
                objective: Some(f.objective),
                n_local: f.n_local,
                iterations: f.iterations,
                converged: f.converged,
                error: None,
            },
            None => CurveRow {
                u0: p.u0.clone(),
                beta: None,
                slope: None,
                objective: None,
                n_local: 0,
                iterations: 0,
                converged: false,
                error: p.error.clone(),
            },
        })
        .collect()
}

fn rows_to_curve(rows: Vec<CurveRow>, plan: &FitPlan) -> CoefficientCurve {
    let points = rows
        .into_iter()
        .map(|r| {
            let fit = r.beta.map(|beta_hat| LocalFitResult {
                u0: r.u0.clone(),
                beta_hat,
                slope_hat: r.slope.unwrap_or_default(),
                objective: r.objective.unwrap_or(f64::NAN),
                n_local: r.n_local,
                iterations: r.iterations,
                converged: r.converged,
            });
            CurvePoint { u0: r.u0, fit, error: r.error }
        })
        .collect();
    CoefficientCurve { config: plan.fit, x_names: plan.x_names.clone(), u_names: plan.u_names.clone(), points }
}

pub fn curve_csv(curve: &CoefficientCurve) -> (Vec<String>, Vec<Vec<String>>) {
    let mut head = curve.u_names.clone();
    head.push("coefficient".into());
    head.push("beta".into());
    head.extend(curve.u_names.iter().map(|u| format!("slope_{u}")));
    head.extend(["n_local".into(), "converged".into()]);
    let mut rows = Vec::new();
    for p in &curve.points {
        for (r, name) in curve.x_names.iter().enumerate() {
            let mut row: Vec<String> = p.u0.iter().map(|&v| format_value(v)).collect();
            row.push(name.clone());
            match &p.fit {
                Some(f) => {
                    row.push(format_value(f.beta_hat[r]));
                    row.extend(f.slope_hat[r].iter().map(|&v| format_value(v)));
                    row.push(f.n_local.to_string());
                    row.push(f.converged.to_string());
                }
                None => {
                    row.extend(std::iter::repeat_n("NA".to_string(), 1 + curve.u_names.len()));
                    row.push("0".into());
                    row.push("false".into());
                }
            }
            rows.push(row);
        }
    }
    (head, rows)
}

pub fn bands_csv(b: &BandResult) -> (Vec<String>, Vec<Vec<String>>) {
    let mut head = b.u_names.clone();
    head.extend(["coefficient", "estimate", "se", "lower", "upper"].map(String::from));
    let mut rows = Vec::new();
    for p in &b.points {
        for (r, name) in b.x_names.iter().enumerate() {
            let mut row: Vec<String> = p.u0.iter().map(|&v| format_value(v)).collect();
            row.push(name.clone());
            for v in [&p.beta_hat, &p.se, &p.lower, &p.upper] {
                row.push(v.get(r).map_or("NA".into(), |&x| format_value(x)));
            }
            rows.push(row);
        }
    }
    (head, rows)
}

pub fn cv_csv(r: &CvReport) -> (Vec<String>, Vec<Vec<String>>) {
    let head = ["h", "score", "failures", "evaluated"].map(String::from).to_vec();
    let rows = r
        .candidates
        .iter()
        .map(|c| vec![format_value(c.h), c.score.map_or("NA".into(), format_value), c.failures.to_string(), c.evaluated.to_string()])
        .collect();
    (head, rows)
}

/// Resolved configuration of a `fit` run; `infer` and `curve` read it back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitPlan {
    pub data: DataArgs,
    pub fit: FitConfig,
    pub grid: Vec<Vec<f64>>,
    pub x_names: Vec<String>,
    pub u_names: Vec<String>,
}

pub fn fit(ctx: &Context, a: &FitArgs) -> Result<(), CliError> {
    let ds = load_data(&a.data)?;
    let cfg = fit_config(&a.loss, a.bandwidth, ds.u_dim())?;
    let grid = match &a.grid_points {
        Some(p) => read_grid(p)?,
        None => default_grid(&ds, a.grid.unwrap_or(100)),
    };
    let curve = fit_grid(&ds, grid, &cfg)?;
    let failed = curve.n_failed();
    if failed > 0 {
        ctx.log.warn("fit", format!("{failed} of {} grid points failed", curve.points.len()));
    }
    let unconverged = curve.fitted().filter(|f| !f.converged).count();
    if unconverged > 0 {
        ctx.log.warn("fit", format!("{unconverged} grid points hit the iteration limit"));
    }
    write_json(&a.out, &curve_rows(&curve))?;
    let csv_path = sibling(&a.out, "csv");
    let (head, rows) = curve_csv(&curve);
    write_csv(&csv_path, &head, &rows)?;
    let plan = FitPlan { data: a.data.clone(), fit: cfg, grid: curve.grid(), x_names: curve.x_names.clone(), u_names: curve.u_names.clone() };
    ctx.manifest("fit", &a.out, &plan, vec![digest(&a.data.input)?], vec![a.out.clone(), csv_path])?;
    ctx.log.info("fit", format!("wrote {} ({} grid points, h = {})", a.out.display(), curve.points.len(), a.bandwidth));
    Ok(())
}

/// Reads a curve written by `fit` together with its manifest.
pub fn load_curve(path: &Path) -> Result<(CoefficientCurve, FitPlan, RunManifest), CliError> {
    let manifest: RunManifest = read_json(&manifest_path(path))?;
    if manifest.subcommand != "fit" {
        return Err(CliError::data(format!("{} was not written by `fit`", path.display())));
    }
    let plan: FitPlan = serde_json::from_value(manifest.config.clone())?;
    let rows: Vec<CurveRow> = read_json(path)?;
    Ok((rows_to_curve(rows, &plan), plan, manifest))
}

#[derive(Debug, Serialize)]
struct NamedValue {
    name: String,
    value: f64,
}

#[derive(Debug, Serialize)]
struct CurveValue {
    u: Vec<f64>,
    coefficients: Vec<NamedValue>,
    prediction: Option<f64>,
}

pub fn curve(ctx: &Context, a: &CurveArgs) -> Result<(), CliError> {
    let (curve, _, _) = load_curve(&a.curve)?;
    let u = parse_f64_list(&a.at)?;
    let beta = curve.coefficients_at(&u)?;
    let prediction = match &a.x {
        Some(x) => Some(curve.predict(&parse_f64_list(x)?, &u)?),
        None => None,
    };
    let value = CurveValue {
        u,
        coefficients: curve.x_names.iter().zip(beta).map(|(n, v)| NamedValue { name: n.clone(), value: v }).collect(),
        prediction,
    };
    match &a.out {
        Some(out) => {
            write_json(out, &value)?;
            ctx.manifest("curve", out, serde_json::json!({ "at": value.u, "x": a.x }), vec![digest(&a.curve)?], vec![out.clone()])?;
        }
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    Ok(())
}

pub fn bandwidth(ctx: &Context, a: &BandwidthArgs) -> Result<(), CliError> {
    let h_grid = match (&a.range, &a.candidates) {
        (Some(r), _) => {
            let v = r.split(':').map(|t| t.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>();
            match v.as_deref() {
                Ok([start, stop, step]) => range_grid(*start, *stop, *step),
                _ => return Err(CliError::usage(format!("bad range `{r}`, expected start:stop:step"))),
            }
        }
        (None, Some(c)) => parse_f64_list(c)?,
        (None, None) => return Err(CliError::usage("one of --range or --candidates is required")),
    };
    let ds = load_data(&a.data)?;
    let first = h_grid.first().copied().unwrap_or(f64::NAN);
    let cv = CvConfig { h_grid, leave_out: a.leave_out, fit: fit_config(&a.loss, first, ds.u_dim())?, eval_subset: None };
    let report = select_bandwidth(&ds, &cv)?;
    write_json(&a.out, &report)?;
    let csv_path = sibling(&a.out, "csv");
    let (head, rows) = cv_csv(&report);
    write_csv(&csv_path, &head, &rows)?;
    ctx.manifest("bandwidth", &a.out, serde_json::json!({ "data": a.data, "cv": cv }), vec![digest(&a.data.input)?], vec![a.out.clone(), csv_path])?;
    ctx.log.info("bandwidth", format!("selected h = {} over {} candidates", report.selected, report.candidates.len()));
    Ok(())
}

pub fn detrend(ctx: &Context, a: &DetrendArgs) -> Result<(), CliError> {
    let ds = load_data(&a.data)?;
    let g = a.g.unwrap_or_else(|| default_trend_bandwidth(ds.n_usable()));
    let kernel = TrendKernelSpec::new(a.kernel.parse()?, a.trend_kernel_order)?;
    let model = estimate_trend(&ds, g, kernel)?;
    let out = detrend_dataset(&ds, &model)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    out.write_csv(File::create(&a.out)?)?;
    let trend_path = sibling(&a.out, "trend.json");
    write_json(&trend_path, &model)?;
    ctx.manifest(
        "detrend",
        &a.out,
        serde_json::json!({ "data": a.data, "g": g, "kernel": kernel }),
        vec![digest(&a.data.input)?],
        vec![a.out.clone(), trend_path],
    )?;
    ctx.log.info("detrend", format!("wrote {} (g = {g})", a.out.display()));
    Ok(())
}

pub fn infer(ctx: &Context, a: &InferArgs) -> Result<(), CliError> {
    let (mut curve, mut plan, manifest) = load_curve(&a.curve)?;
    if let Some(input) = &a.input {
        plan.data.input = input.clone();
    }
    let recorded = manifest.inputs.first().ok_or_else(|| CliError::data("curve manifest lists no input"))?;
    let input = digest(&plan.data.input)?;
    if input.sha256 != recorded.sha256 {
        return Err(CliError::data(format!("{} differs from the data the curve was fitted on", plan.data.input.display())));
    }
    let ds = load_data(&plan.data)?;
    if !(a.undersmooth > 0.0 && a.undersmooth.is_finite()) {
        return Err(CliError::usage(format!("--undersmooth must be positive, got {}", a.undersmooth)));
    }
    if a.undersmooth != 1.0 {
        let h = plan.fit.bandwidth * a.undersmooth;
        ctx.log.info("infer", format!("refitting at h = {h}"));
        curve = fit_grid(&ds, plan.grid.clone(), &plan.fit.with_bandwidth(h))?;
    }
    let mode = parse_mode(&a.variance_mode, ds.x_names())?;
    let result = bands(&curve, &ds, &mode, a.level)?;
    for d in result.diagnostics.iter().filter(|d| d.flagged) {
        ctx.log.warn(
            "infer",
            format!("|residual| correlates with {} (Spearman {:.3}); consider --variance-mode conditional", d.column, d.spearman),
        );
    }
    let failed = result.points.iter().filter(|p| p.error.is_some()).count();
    if failed > 0 {
        ctx.log.warn("infer", format!("no band at {failed} grid points"));
    }
    write_json(&a.out, &result)?;
    let csv_path = sibling(&a.out, "csv");
    let (head, rows) = bands_csv(&result);
    write_csv(&csv_path, &head, &rows)?;
    ctx.manifest(
        "infer",
        &a.out,
        serde_json::json!({ "fit": plan, "level": a.level, "mode": mode, "undersmooth": a.undersmooth }),
        vec![digest(&a.curve)?, input],
        vec![a.out.clone(), csv_path],
    )?;
    ctx.log.info("infer", format!("wrote {} ({} points, level {})", a.out.display(), result.points.len(), a.level));
    Ok(())
}

pub fn dgp_config(a: &DgpArgs, tau: Option<f64>) -> Result<DgpConfig, CliError> {
    let shape = parse_shape(&a.shape)?;
    let [n1, n2] = shape[..] else {
        return Err(CliError::usage("simulation needs a two-dimensional shape"));
    };
    let betas = split_list(&a.beta).into_iter().map(str::parse).collect::<Result<Vec<BetaFn>, _>>()?;
    let error: ErrorDist = a.error.parse()?;
    let mut cfg = DgpConfig::new([n1, n2], betas, error, a.seed);
    cfg.ma_range = a.ma_range;
    cfg.tau = tau;
    if a.trends {
        cfg.trends = Some(Trends::cubic(cfg.betas.len().saturating_sub(1)));
    }
    Ok(cfg)
}

pub fn simulate(ctx: &Context, a: &SimulateArgs) -> Result<(), CliError> {
    let cfg = dgp_config(&a.dgp, a.tau)?;
    let sim = generate(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    sim.dataset.write_csv(File::create(&a.out)?)?;
    let mut outputs = vec![a.out.clone()];
    if let (Some(latent), true) = (&sim.latent, a.dgp.trends) {
        let path = sibling(&a.out, "latent.csv");
        latent.write_csv(File::create(&path)?)?;
        outputs.push(path);
    }
    ctx.manifest("simulate", &a.out, &cfg, vec![], outputs)?;
    ctx.log.info("simulate", format!("wrote {} ({}x{} sites)", a.out.display(), cfg.shape[0], cfg.shape[1]));
    Ok(())
}

pub fn mc(ctx: &Context, a: &McArgs) -> Result<(), CliError> {
    let dgp = dgp_config(&a.dgp, Some(a.tau))?;
    let d = dgp.betas.len();
    let mut x_names = vec![sqfc::dataset::INTERCEPT.to_string()];
    x_names.extend((1..d).map(|j| format!("x{j}")));
    let bandwidth = match (a.bandwidth, a.bandwidth_rate) {
        (Some(h), _) => BandwidthRule::Fixed { h },
        (None, c) => BandwidthRule::Rate { c: c.unwrap_or(1.0) },
    };
    let cfg = McConfig {
        dgp,
        reps: a.reps,
        fit: FitConfig::new(LossSpec::quantile(a.tau)?, KernelSpec::epanechnikov(1), 1.0),
        bandwidth,
        grid: linspace(0.05, 0.95, a.grid),
        probes: parse_f64_list(&a.probes)?,
        level: a.level,
        mode: parse_mode(&a.variance_mode, &x_names)?,
        detrend: a.detrend.then(|| DetrendSettings { g: None, kernel: TrendKernelSpec::default() }),
    };
    let report: McReport = run_mc(&cfg)?;
    for m in &report.failure_messages {
        ctx.log.warn("mc", m);
    }
    write_json(&a.report, &report)?;
    let csv_path = sibling(&a.report, "csv");
    let mut head = ["rep", "seed", "bandwidth"].map(String::from).to_vec();
    head.extend(x_names.iter().map(|n| format!("rmse_{n}")));
    let rows: Vec<Vec<String>> = report
        .outcomes
        .iter()
        .map(|o| {
            let mut r = vec![o.rep.to_string(), o.seed.to_string(), format_value(o.bandwidth)];
            r.extend(o.rmse.iter().map(|&v| format_value(v)));
            r
        })
        .collect();
    write_csv(&csv_path, &head, &rows)?;
    ctx.manifest("mc", &a.report, &cfg, vec![], vec![a.report.clone(), csv_path])?;
    ctx.log.info(
        "mc",
        format!(
            "{} replications ({} failed) in {:.1}s; median RMSE {:?}; coverage {:?}",
            a.reps, report.failures, report.elapsed_secs, report.median_rmse, report.coverage_by_coefficient
        ),
    );
    Ok(())
}
