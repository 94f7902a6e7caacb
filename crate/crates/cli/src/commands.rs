use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regcopula::dependence::{dependence_surface, Metric};
use regcopula::design::DesignMatrices;
use regcopula::evaluation::{cross_validate, default_alphas, score_external, CvOptions, ScoreReport};
use regcopula::pipeline::{fit as fit_model, parse_kv_text, BasisModel, FitConfig, FittedModel};
use regcopula::prediction::{moment_functions, predictive_density_mc, MomentConfig, PredictivePoint};

use crate::error::CliError;
use crate::ingest::{ingest_csv, read_covariates, read_table, Mapping, MAPPING_KEYS};
use crate::ConfigArgs;

const MAPPING_FILE: &str = "mapping.txt";

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Config file, then `--model`/`--estimator`/`--seed`, then `--set` pairs.
pub fn build_config(args: &ConfigArgs) -> Result<(FitConfig, Mapping), CliError> {
    let mut kv = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            parse_kv_text(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => BTreeMap::new(),
    };
    if let Some(m) = &args.model {
        kv.insert("model".into(), m.clone());
    }
    if let Some(e) = &args.estimator {
        kv.insert("estimator".into(), e.clone());
    }
    if let Some(s) = args.seed {
        kv.insert("seed".into(), s.to_string());
    }
    for pair in &args.set {
        let (k, v) = pair.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        kv.insert(k.trim().into(), v.trim().into());
    }
    let cfg = FitConfig::from_kv(&kv, &MAPPING_KEYS)?;
    Ok((cfg, Mapping::from_kv(&kv)))
}

fn load_archive(dir: &Path) -> Result<(FittedModel, Mapping), CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("archive {} does not exist", dir.display())));
    }
    let model = FittedModel::load(dir)?;
    let mapping = match fs::read_to_string(dir.join(MAPPING_FILE)) {
        Ok(t) => Mapping::from_kv(&parse_kv_text(&t)?),
        Err(_) => Mapping::from_kv(&BTreeMap::new()),
    };
    Ok((model, mapping))
}

fn parse_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<f64>().map_err(|_| usage(format!("expected a number, got {t:?}"))))
        .collect()
}

pub fn fit(args: &ConfigArgs, data: &Path, out: &Path) -> Result<(), CliError> {
    let (cfg, mut mapping) = build_config(args)?;
    let dataset = ingest_csv(data, &mapping, cfg.pre_transform)?;
    let fitted = fit_model(&cfg, &dataset).map_err(|e| CliError::from(e).context("fit"))?;
    fitted.save(out)?;
    mapping.x_cols = dataset.x_names.clone();
    fs::write(out.join(MAPPING_FILE), mapping.to_text())?;
    println!("fitted {} by {} on {} observations -> {}", cfg.model.name(), cfg.estimator.name(), dataset.n(), out.display());
    Ok(())
}

pub fn predict(
    archive: &Path,
    points: &Path,
    out: &Path,
    outputs: &str,
    alphas: &str,
    total_variance: bool,
) -> Result<(), CliError> {
    let (model, mapping) = load_archive(archive)?;
    let wanted: Vec<&str> = outputs.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if let Some(bad) = wanted.iter().find(|w| !["density", "moments", "quantiles"].contains(w)) {
        return Err(usage(format!("unknown output {bad:?}")));
    }
    let alphas = parse_list(alphas)?;
    if alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(usage("quantile levels must lie in (0, 1)"));
    }
    let (x, w) = read_covariates(points, &mapping)?;
    let draws = model.posterior_draws();
    fs::create_dir_all(out)?;
    let mcfg = MomentConfig { total_variance, ..Default::default() };
    let mut moments = String::from("point_id,f_hat,v_hat\n");
    let mut quantiles = String::from("point_id,alpha,quantile\n");
    for i in 0..x.nrows() {
        let xr: Vec<f64> = x.row(i).iter().cloned().collect();
        let wr: Vec<f64> = w.row(i).iter().cloned().collect();
        let point = model.point(&xr, &wr)?;
        let grid = predictive_density_mc(&point, &draws, &model.margin, None)?;
        if wanted.contains(&"density") {
            fs::write(out.join(format!("density_{i}.csv")), grid.to_csv())?;
        }
        if wanted.contains(&"moments") {
            let m = moment_functions(&point, &draws, &model.margin, &mcfg)?;
            writeln!(moments, "{i},{},{}", m.f_hat, m.v_hat).unwrap();
        }
        if wanted.contains(&"quantiles") {
            for (a, q) in alphas.iter().zip(grid.quantiles(&alphas)) {
                writeln!(quantiles, "{i},{a},{q}").unwrap();
            }
        }
    }
    if wanted.contains(&"moments") {
        fs::write(out.join("moments.csv"), moments)?;
    }
    if wanted.contains(&"quantiles") {
        fs::write(out.join("quantiles.csv"), quantiles)?;
    }
    Ok(())
}

fn write_report(out: &Path, report: &ScoreReport) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("report.txt"), report.to_text())?;
    let mut qs = String::from("alpha,quantile_score\n");
    for (a, v) in &report.quantile_score_curve {
        writeln!(qs, "{a},{v}").unwrap();
    }
    fs::write(out.join("qs_curve.csv"), qs)?;
    let mut obs = String::from("obs_id,log_score,crps,floored\n");
    for s in &report.per_obs {
        writeln!(obs, "{},{},{},{}", s.obs_id, s.log_score, s.crps, s.floored).unwrap();
    }
    fs::write(out.join("per_obs.csv"), obs)?;
    Ok(())
}

pub fn score(
    args: &ConfigArgs,
    archive: Option<&Path>,
    forecasts: Option<&Path>,
    data: &Path,
    k: usize,
    out: &Path,
    opts: &CvOptions,
) -> Result<(), CliError> {
    let (mut cfg, mapping) = match archive {
        Some(dir) => {
            let (m, map) = load_archive(dir)?;
            (m.config, map)
        }
        None => build_config(args)?,
    };
    if let Some(path) = forecasts {
        let table = read_table(data)?;
        let yi = table.column_index(&mapping.response)?;
        let y = table
            .rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let v = row[yi].ok_or_else(|| CliError::Data(format!("{} line {}: missing response", data.display(), r + 2)))?;
                cfg.pre_transform.apply(v).map_err(CliError::from)
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        let report = score_external(&text, &y, &default_alphas())?;
        return write_report(out, &report);
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    let dataset = ingest_csv(data, &mapping, cfg.pre_transform)?;
    let (report, text) = cross_validate(&dataset, &cfg, k, seed, opts).map_err(|e| CliError::from(e).context("cross-validation"))?;
    write_report(out, &report)?;
    if let Some(t) = text {
        fs::write(out.join("forecasts.txt"), t)?;
    }
    println!("mean_log_score = {}\nmean_crps = {}", report.mean_log_score, report.mean_crps);
    Ok(())
}

/// Training range of covariate column `dim`, and the midpoint row used for
/// the columns held fixed.
fn covariate_frame(basis: &BasisModel, dim: usize) -> Result<((f64, f64), Vec<f64>), CliError> {
    match basis {
        BasisModel::Bspline(b) => {
            if dim != 0 {
                return Err(usage("B-spline models use a single covariate; --dim must be 0"));
            }
            Ok(((b.lo, b.hi), vec![0.5 * (b.lo + b.hi)]))
        }
        BasisModel::Rbf { scaling, .. } => {
            if dim >= scaling.min.len() {
                return Err(usage(format!("--dim {dim} out of range for {} covariates", scaling.min.len())));
            }
            let mid = scaling.min.iter().zip(&scaling.max).map(|(a, b)| 0.5 * (a + b)).collect();
            Ok(((scaling.min[dim], scaling.max[dim]), mid))
        }
    }
}

pub fn dependence(
    archive: &Path,
    metric: &str,
    grid_size: usize,
    dim: usize,
    lo: Option<f64>,
    hi: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let (model, mapping) = load_archive(archive)?;
    let metric = Metric::parse(metric).map_err(|e| usage(e.to_string()))?;
    if grid_size < 2 {
        return Err(usage("--grid-size must be at least 2"));
    }
    let ((rlo, rhi), x_mid) = covariate_frame(&model.basis_b, dim)?;
    let clip = |v: f64, what: &str| {
        if v < rlo || v > rhi {
            log::warn!("{what} {v} outside training range [{rlo}, {rhi}]; clipped");
        }
        v.clamp(rlo, rhi)
    };
    let lo = clip(lo.unwrap_or(rlo), "--lo");
    let hi = clip(hi.unwrap_or(rhi), "--hi");
    if !(hi > lo) {
        return Err(usage("grid range is empty"));
    }
    let w_mid = match (&model.basis_v, mapping.w_cols.is_empty()) {
        (Some(bv), false) => Some(covariate_frame(bv, 0)?.1),
        _ => None,
    };
    let grid: Vec<f64> = (0..grid_size).map(|i| lo + (hi - lo) * i as f64 / (grid_size - 1) as f64).collect();
    let draws = model.posterior_draws();
    let surface = dependence_surface(metric, &grid, &draws, |v| -> regcopula::Result<PredictivePoint> {
        let mut x = x_mid.clone();
        x[dim] = v;
        let w = match &w_mid {
            Some(m) => {
                let mut w = m.clone();
                if dim < w.len() {
                    w[dim] = v;
                }
                w
            }
            None => x.clone(),
        };
        model.point(&x, &w)
    })?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, surface.to_csv())?;
    Ok(())
}

pub fn simulate(archive: &Path, data: &Path, replicates: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let (model, mapping) = load_archive(archive)?;
    let dataset = ingest_csv(data, &mapping, model.config.pre_transform)?;
    let b = model.basis_b.design(&dataset.x)?;
    let v = match &model.basis_v {
        Some(bv) => bv.design(&dataset.w)?,
        None => nalgebra::DMatrix::zeros(dataset.n(), 0),
    };
    let design = DesignMatrices::new(b, v)?;
    let state = model.point_estimate();
    fs::create_dir_all(out)?;
    // replicate r uses stream r of the seed, so any replicate can be
    // regenerated alone; the held-out replicate is number replicates + 1
    for r in 1..=replicates + 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let z = regcopula::prediction::simulate_replicate(&state, &design, &model.margin, &mut rng)?;
        let mut s = dataset.x_names.join(",");
        writeln!(s, ",{}", mapping.response).unwrap();
        for (i, y) in z.iter().enumerate() {
            for val in dataset.x.row(i).iter() {
                write!(s, "{val},").unwrap();
            }
            writeln!(s, "{}", model.config.pre_transform.invert(*y)).unwrap();
        }
        let name = if r > replicates { "heldout.csv".to_string() } else { format!("replicate_{r:03}.csv") };
        fs::write(out.join(name), s)?;
    }
    Ok(())
}
