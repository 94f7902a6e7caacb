//! Proper scoring rules and k-fold cross-validation. All scores are
//! oriented so that higher is better.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::margins::fit_kde_margin;
use crate::pipeline::{fit_with_margin, Dataset, FitConfig};
use crate::prediction::{predictive_density_point, DensityGrid};

/// Densities below this are floored before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Convention recorded in every report.
pub const QS_CONVENTION: &str = "-2 (1{y <= q} - alpha) (q - y)";

/// Natural log of the density, floored; the flag reports flooring.
pub fn log_score(density_at_y: f64) -> (f64, bool) {
    if density_at_y < DENSITY_FLOOR || density_at_y.is_nan() {
        (DENSITY_FLOOR.ln(), true)
    } else {
        (density_at_y.ln(), false)
    }
}

/// Negative CRPS `-int (F(t) - 1{y <= t})^2 dt` by the trapezoid rule on the
/// grid, with the cell holding `y` split at `y`. Outside the grid `F` is 0
/// below and 1 above.
pub fn crps(grid: &DensityGrid, y: f64) -> f64 {
    let g = &grid.y_grid;
    let c = grid.cdf();
    let n = g.len();
    let mut total = 0.0;
    if y < g[0] {
        total += g[0] - y;
    }
    if y > g[n - 1] {
        total += y - g[n - 1];
    }
    let sq = |f: f64, t: f64| {
        let ind = if y <= t { 1.0 } else { 0.0 };
        (f - ind) * (f - ind)
    };
    for i in 0..n - 1 {
        let (a, b) = (g[i], g[i + 1]);
        if y > a && y < b {
            let fy = grid.cdf_at(y);
            // left piece: indicator 0, right piece: indicator 1
            total += 0.5 * (y - a) * (c[i] * c[i] + fy * fy);
            total += 0.5 * (b - y) * ((fy - 1.0).powi(2) + (c[i + 1] - 1.0).powi(2));
        } else {
            total += 0.5 * (b - a) * (sq(c[i], a) + sq(c[i + 1], b));
        }
    }
    -total
}

pub fn quantile_score(q_alpha: f64, y: f64, alpha: f64) -> f64 {
    let ind = if y <= q_alpha { 1.0 } else { 0.0 };
    -2.0 * (ind - alpha) * (q_alpha - y)
}

/// Quantile levels `0.01, 0.02, ..., 0.99`.
pub fn default_alphas() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    /// Fold index in `1..=k` per observation.
    pub assignments: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldPlan {
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 || n < k {
            return Err(Error::Config(format!("cannot split {n} observations into {k} folds")));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut assignments = vec![0; n];
        for (pos, &i) in perm.iter().enumerate() {
            assignments[i] = pos % k + 1;
        }
        Ok(Self { assignments, k, seed })
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsScore {
    pub obs_id: usize,
    pub log_score: f64,
    pub crps: f64,
    pub floored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldScore {
    pub fold: usize,
    pub n: usize,
    pub mean_log_score: f64,
    pub mean_crps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    /// Mean over folds of the within-fold means.
    pub mean_log_score: f64,
    pub mean_crps: f64,
    pub per_fold: Vec<FoldScore>,
    pub per_obs: Vec<ObsScore>,
    /// `(alpha, mean quantile score)`.
    pub quantile_score_curve: Vec<(f64, f64)>,
    pub floored: usize,
    /// Held-out responses clamped into the training margin's range.
    pub clamped: usize,
}

impl ScoreReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "qs_convention = {QS_CONVENTION}").unwrap();
        writeln!(s, "mean_log_score = {}", self.mean_log_score).unwrap();
        writeln!(s, "mean_crps = {}", self.mean_crps).unwrap();
        writeln!(s, "floored = {}", self.floored).unwrap();
        writeln!(s, "clamped = {}", self.clamped).unwrap();
        for f in &self.per_fold {
            writeln!(s, "fold.{} = n {} log_score {} crps {}", f.fold, f.n, f.mean_log_score, f.mean_crps).unwrap();
        }
        for (a, q) in &self.quantile_score_curve {
            writeln!(s, "qs.{a} = {q}").unwrap();
        }
        s
    }
}

/// Forecast grid including `y` as a node when `y` lies inside the grid.
fn grid_with_point(grid: &[f64], y: f64) -> Vec<f64> {
    let mut g = grid.to_vec();
    if y > g[0] && y < g[g.len() - 1] {
        let j = g.partition_point(|v| *v < y);
        if g[j] != y {
            g.insert(j, y);
        }
    }
    g
}

fn score_grid(obs_id: usize, grid: &DensityGrid, y: f64, alphas: &[f64], qs_acc: &mut [f64]) -> ObsScore {
    let (ls, floored) = log_score(grid.density_at(y));
    for ((acc, q), &a) in qs_acc.iter_mut().zip(grid.quantiles(alphas)).zip(alphas) {
        *acc += quantile_score(q, y, a);
    }
    ObsScore { obs_id, log_score: ls, crps: crps(grid, y), floored }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub alphas: Vec<f64>,
    /// Also return the per-observation forecast grids in exchange format.
    pub export_forecasts: bool,
    /// Re-estimate the margin on each training split. When false one margin
    /// fitted to all responses is shared by every fold.
    pub refit_margin: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { alphas: default_alphas(), export_forecasts: false, refit_margin: true }
    }
}

/// k-fold cross-validation with the copula (and by default the margin)
/// refit on each training split and held-out points scored by the point-estimate
/// predictive density. Returns the report and, when requested, the
/// forecasts in exchange format.
pub fn cross_validate(data: &Dataset, cfg: &FitConfig, k: usize, seed: u64, opts: &CvOptions) -> Result<(ScoreReport, Option<String>)> {
    if data.n() < 2 * k && k != data.n() {
        return Err(Error::Config(format!("cross-validation needs n >= 2k (n = {}, k = {k})", data.n())));
    }
    let plan = FoldPlan::new(data.n(), k, seed)?;
    let mut per_fold = Vec::with_capacity(k);
    let mut per_obs = Vec::with_capacity(data.n());
    let mut qs_acc = vec![0.0; opts.alphas.len()];
    let mut clamped = 0;
    let mut export = opts.export_forecasts.then(String::new);
    let shared_margin = if opts.refit_margin {
        None
    } else {
        let y: Vec<f64> = data.y.iter().map(|&v| cfg.pre_transform.apply(v)).collect::<Result<_>>()?;
        Some(fit_kde_margin(&y, cfg.grid_size, cfg.pre_transform)?)
    };
    for fold in 1..=k {
        let train = data.select(&plan.train_indices(fold));
        let fitted = fit_with_margin(cfg, &train, shared_margin.as_ref()).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("fold {fold}: {m}")),
            other => other,
        })?;
        let theta = fitted.point_estimate();
        let mut fold_scores = Vec::new();
        for i in plan.test_indices(fold) {
            let mut y = fitted.model_scale(data.y[i])?;
            if !fitted.margin.contains(y) {
                clamped += 1;
                y = y.clamp(fitted.margin.lo(), fitted.margin.hi());
            }
            let point = fitted.point(&data.x_row(i), &data.w_row(i))?;
            let ys = grid_with_point(&fitted.margin.grid, y);
            let grid = predictive_density_point(&point, &theta, &fitted.margin, Some(&ys))?;
            if let Some(out) = export.as_mut() {
                write_forecast(out, i, &grid);
            }
            fold_scores.push(score_grid(i, &grid, y, &opts.alphas, &mut qs_acc));
        }
        per_fold.push(FoldScore {
            fold,
            n: fold_scores.len(),
            mean_log_score: mean(fold_scores.iter().map(|s| s.log_score)),
            mean_crps: mean(fold_scores.iter().map(|s| s.crps)),
        });
        per_obs.extend(fold_scores);
    }
    if clamped > 0 {
        log::warn!("{clamped} held-out responses fell outside their training margin and were clamped");
    }
    per_obs.sort_by_key(|s| s.obs_id);
    let n = data.n() as f64;
    let report = ScoreReport {
        mean_log_score: mean(per_fold.iter().map(|f| f.mean_log_score)),
        mean_crps: mean(per_fold.iter().map(|f| f.mean_crps)),
        floored: per_obs.iter().filter(|s| s.floored).count(),
        per_fold,
        per_obs,
        quantile_score_curve: opts.alphas.iter().zip(&qs_acc).map(|(a, s)| (*a, s / n)).collect(),
        clamped,
    };
    Ok((report, export))
}

/// Append one forecast in exchange format: `obs_id grid_len`, then
/// `y density` lines.
pub fn write_forecast(out: &mut String, obs_id: usize, grid: &DensityGrid) {
    writeln!(out, "{obs_id} {}", grid.y_grid.len()).unwrap();
    for (y, d) in grid.y_grid.iter().zip(&grid.density_values) {
        writeln!(out, "{y} {d}").unwrap();
    }
}

/// Parse an exchange file into `(obs_id, grid)` pairs.
pub fn parse_forecasts(text: &str) -> Result<Vec<(usize, DensityGrid)>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let head: Vec<&str> = lines[i].split_whitespace().collect();
        let bad_head = || Error::Parse { line: i + 1, msg: "expected header `obs_id grid_len`".into() };
        if head.len() != 2 {
            return Err(bad_head());
        }
        let id: usize = head[0].parse().map_err(|_| bad_head())?;
        let len: usize = head[1].parse().map_err(|_| bad_head())?;
        if len < 2 {
            return Err(Error::Parse { line: i + 1, msg: "forecast grid needs at least 2 points".into() });
        }
        let mut ys = Vec::with_capacity(len);
        let mut ds = Vec::with_capacity(len);
        for j in 0..len {
            let ln = i + 2 + j;
            let line = lines.get(ln - 1).ok_or(Error::Parse { line: ln, msg: format!("observation {id}: truncated grid") })?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse { line: ln, msg: "expected `y density`".into() })?;
            if v.len() != 2 || v[1] < 0.0 || !v.iter().all(|x| x.is_finite()) {
                return Err(Error::Parse { line: ln, msg: "expected finite `y density` with density >= 0".into() });
            }
            if let Some(last) = ys.last() {
                if v[0] <= *last {
                    return Err(Error::Parse { line: ln, msg: "grid must be strictly increasing".into() });
                }
            }
            ys.push(v[0]);
            ds.push(v[1]);
        }
        out.push((id, DensityGrid::new(ys, ds)));
        i += len + 1;
    }
    Ok(out)
}

/// Score external forecasts against responses `y` (on the forecast scale).
/// Every observation must have exactly one forecast.
pub fn score_external(forecast_text: &str, y: &[f64], alphas: &[f64]) -> Result<ScoreReport> {
    let forecasts = parse_forecasts(forecast_text)?;
    let mut by_id: Vec<Option<DensityGrid>> = vec![None; y.len()];
    for (id, g) in forecasts {
        let slot = by_id.get_mut(id).ok_or_else(|| Error::Input(format!("forecast for unknown observation {id}")))?;
        if slot.is_some() {
            return Err(Error::Input(format!("duplicate forecast for observation {id}")));
        }
        *slot = Some(g);
    }
    let mut qs_acc = vec![0.0; alphas.len()];
    let mut per_obs = Vec::with_capacity(y.len());
    for (i, g) in by_id.iter().enumerate() {
        let g = g.as_ref().ok_or_else(|| Error::Input(format!("no forecast for observation row {i}")))?;
        per_obs.push(score_grid(i, g, y[i], alphas, &mut qs_acc));
    }
    let n = y.len() as f64;
    let fold = FoldScore {
        fold: 1,
        n: y.len(),
        mean_log_score: mean(per_obs.iter().map(|s| s.log_score)),
        mean_crps: mean(per_obs.iter().map(|s| s.crps)),
    };
    Ok(ScoreReport {
        mean_log_score: fold.mean_log_score,
        mean_crps: fold.mean_crps,
        floored: per_obs.iter().filter(|s| s.floored).count(),
        per_fold: vec![fold],
        per_obs,
        quantile_score_curve: alphas.iter().zip(&qs_acc).map(|(a, s)| (*a, s / n)).collect(),
        clamped: 0,
    })
}
