//! Predictive densities, moment functions, quantiles and replicate
//! simulation for new covariate points.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::copula::CopulaState;
use crate::design::DesignMatrices;
use crate::error::{Error, Result};
use crate::margins::MarginModel;
use crate::normal;

/// Largest number of posterior draws averaged for one predictive density.
pub const DEFAULT_DRAW_CAP: usize = 5000;

/// Basis rows of one prediction point.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictivePoint {
    pub b: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub y_grid: Vec<f64>,
    pub density_values: Vec<f64>,
    /// Trapezoid integral of the values over the grid (not rescaled).
    pub normalization: f64,
}

fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2).zip(f.windows(2)).map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] + f[1])).sum()
}

impl DensityGrid {
    pub fn new(y_grid: Vec<f64>, density_values: Vec<f64>) -> Self {
        let normalization = trapezoid(&y_grid, &density_values);
        Self { y_grid, density_values, normalization }
    }

    /// Cumulative trapezoid integral divided by the total mass.
    pub fn cdf(&self) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.y_grid.len());
        let mut acc = 0.0;
        c.push(0.0);
        for i in 1..self.y_grid.len() {
            acc += 0.5 * (self.y_grid[i] - self.y_grid[i - 1]) * (self.density_values[i] + self.density_values[i - 1]);
            c.push(acc);
        }
        let total = acc.max(f64::MIN_POSITIVE);
        c.iter_mut().for_each(|v| *v /= total);
        c
    }

    /// Predictive CDF at `y` (linear in each cell's trapezoid mass).
    pub fn cdf_at(&self, y: f64) -> f64 {
        let c = self.cdf();
        let g = &self.y_grid;
        if y <= g[0] {
            return 0.0;
        }
        if y >= g[g.len() - 1] {
            return 1.0;
        }
        let j = g.partition_point(|v| *v <= y) - 1;
        let h = g[j + 1] - g[j];
        let t = y - g[j];
        let (f0, f1) = (self.density_values[j], self.density_values[j + 1]);
        let part = t * f0 + 0.5 * t * t * (f1 - f0) / h;
        let cell = 0.5 * h * (f0 + f1);
        if cell > 0.0 {
            c[j] + (c[j + 1] - c[j]) * part / cell
        } else {
            c[j]
        }
    }

    /// Linear interpolation of the density; zero off the grid.
    pub fn density_at(&self, y: f64) -> f64 {
        let g = &self.y_grid;
        if !(y >= g[0] && y <= g[g.len() - 1]) {
            return 0.0;
        }
        let j = (g.partition_point(|v| *v <= y).max(1) - 1).min(g.len() - 2);
        let f = (y - g[j]) / (g[j + 1] - g[j]);
        (1.0 - f) * self.density_values[j] + f * self.density_values[j + 1]
    }

    /// Inverse of `cdf_at`, clamped to the grid ends.
    pub fn quantile(&self, alpha: f64) -> f64 {
        self.quantile_with(&self.cdf(), alpha)
    }

    pub fn quantiles(&self, alphas: &[f64]) -> Vec<f64> {
        let c = self.cdf();
        alphas.iter().map(|&a| self.quantile_with(&c, a)).collect()
    }

    fn quantile_with(&self, c: &[f64], alpha: f64) -> f64 {
        let g = &self.y_grid;
        if alpha <= 0.0 || alpha >= 1.0 {
            log::warn!("quantile level {alpha} outside (0, 1); clamped to the grid");
            return if alpha <= 0.0 { g[0] } else { g[g.len() - 1] };
        }
        let j = c.partition_point(|v| *v < alpha).clamp(1, g.len() - 1) - 1;
        // solve the quadratic cell mass for the offset
        let h = g[j + 1] - g[j];
        let (f0, f1) = (self.density_values[j], self.density_values[j + 1]);
        let cell = 0.5 * h * (f0 + f1);
        if !(cell > 0.0) || c[j + 1] <= c[j] {
            return g[j];
        }
        let target = (alpha - c[j]) / (c[j + 1] - c[j]) * cell;
        let a = 0.5 * (f1 - f0) / h;
        let t = if a.abs() < 1e-300 || (a * target).abs() < 1e-14 * f0 * f0 {
            if f0 > 0.0 {
                target / f0
            } else {
                (2.0 * target / (f1 / h)).sqrt()
            }
        } else {
            (-f0 + (f0 * f0 + 4.0 * a * target).max(0.0).sqrt()) / (2.0 * a)
        };
        g[j] + t.clamp(0.0, h)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("y,density\n");
        for (y, d) in self.y_grid.iter().zip(&self.density_values) {
            writeln!(s, "{y},{d}").unwrap();
        }
        s
    }
}

/// Evenly thinned subset of at most `cap` draws.
pub fn thin_draws(draws: &[CopulaState], cap: usize) -> Vec<&CopulaState> {
    let j = draws.len();
    if j <= cap || cap == 0 {
        return draws.iter().collect();
    }
    (0..cap).map(|i| &draws[i * j / cap]).collect()
}

/// Per-draw `(mean, sd)` of the pseudo-response at the point.
pub fn conditional_params(point: &PredictivePoint, draws: &[&CopulaState]) -> Result<Vec<(f64, f64)>> {
    if draws.is_empty() {
        return Err(Error::Input("no posterior draws".into()));
    }
    draws
        .iter()
        .map(|s| s.conditional_at(&point.b, &point.v).map(|(m, sd, _)| (m, sd)))
        .collect()
}

/// Predictive density at one response value from per-draw parameters.
pub fn density_from_params(params: &[(f64, f64)], margin: &MarginModel, y: f64) -> f64 {
    let py = margin.density_at(y);
    if py <= 0.0 {
        return 0.0;
    }
    let z = margin.z_of(y);
    let mix = params.iter().map(|(m, sd)| normal::pdf((z - m) / sd) / sd).sum::<f64>() / params.len() as f64;
    py / normal::pdf(z) * mix
}

fn density_grid(params: &[(f64, f64)], margin: &MarginModel, y_grid: Option<&[f64]>) -> DensityGrid {
    let ys: Vec<f64> = y_grid.map(|g| g.to_vec()).unwrap_or_else(|| margin.grid.clone());
    let d = ys.iter().map(|&y| density_from_params(params, margin, y)).collect();
    DensityGrid::new(ys, d)
}

/// Posterior predictive density averaged over (at most 5,000 thinned)
/// draws. `y_grid` defaults to the full margin grid.
pub fn predictive_density_mc(
    point: &PredictivePoint,
    draws: &[CopulaState],
    margin: &MarginModel,
    y_grid: Option<&[f64]>,
) -> Result<DensityGrid> {
    let params = conditional_params(point, &thin_draws(draws, DEFAULT_DRAW_CAP))?;
    Ok(density_grid(&params, margin, y_grid))
}

/// Predictive density at a point estimate.
pub fn predictive_density_point(
    point: &PredictivePoint,
    theta_hat: &CopulaState,
    margin: &MarginModel,
    y_grid: Option<&[f64]>,
) -> Result<DensityGrid> {
    let params = conditional_params(point, &[theta_hat])?;
    Ok(density_grid(&params, margin, y_grid))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentConfig {
    pub nodes: usize,
    pub refine_nodes: usize,
    /// Integration half-width in conditional standard deviations.
    pub half_width: f64,
    pub tol: f64,
    /// Add the posterior variance of the conditional mean to `v_hat`.
    pub total_variance: bool,
}

impl Default for MomentConfig {
    fn default() -> Self {
        Self { nodes: 512, refine_nodes: 1024, half_width: 8.0, tol: 1e-6, total_variance: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub f_hat: f64,
    pub v_hat: f64,
    /// False when the refinement check disagreed beyond tolerance.
    pub converged: bool,
}

fn conditional_moments(m: f64, sd: f64, margin: &MarginModel, nodes: usize, hw: f64) -> (f64, f64) {
    let (lo, hi) = (m - hw * sd, m + hw * sd);
    let h = (hi - lo) / (nodes - 1) as f64;
    let (mut w0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for i in 0..nodes {
        let z = lo + i as f64 * h;
        let w = if i == 0 || i + 1 == nodes { 0.5 } else { 1.0 } * normal::pdf((z - m) / sd);
        let y = margin.y_of(z);
        w0 += w;
        s1 += w * y;
        s2 += w * y * y;
    }
    let mean = s1 / w0;
    (mean, (s2 / w0 - mean * mean).max(0.0))
}

fn moments_at(params: &[(f64, f64)], margin: &MarginModel, nodes: usize, cfg: &MomentConfig) -> (f64, f64) {
    let per: Vec<(f64, f64)> =
        params.iter().map(|&(m, sd)| conditional_moments(m, sd, margin, nodes, cfg.half_width)).collect();
    let j = per.len() as f64;
    let f = per.iter().map(|p| p.0).sum::<f64>() / j;
    let mut v = per.iter().map(|p| p.1).sum::<f64>() / j;
    if cfg.total_variance {
        v += per.iter().map(|p| (p.0 - f).powi(2)).sum::<f64>() / j;
    }
    (f, v)
}

/// Posterior mean of `E(Y | point, theta)` and of `Var(Y | point, theta)`.
pub fn moment_functions(
    point: &PredictivePoint,
    draws: &[CopulaState],
    margin: &MarginModel,
    cfg: &MomentConfig,
) -> Result<Moments> {
    if cfg.nodes < 3 || cfg.refine_nodes < cfg.nodes {
        return Err(Error::Config("quadrature needs nodes >= 3 and refine_nodes >= nodes".into()));
    }
    let params = conditional_params(point, &thin_draws(draws, DEFAULT_DRAW_CAP))?;
    let (f, v) = moments_at(&params, margin, cfg.nodes, cfg);
    let (fr, vr) = moments_at(&params, margin, cfg.refine_nodes, cfg);
    let scale = v.max(vr).sqrt().max(f.abs()).max(1e-300);
    let converged = (f - fr).abs() <= cfg.tol * scale && (v - vr).abs() <= cfg.tol * scale * scale.max(1.0);
    if !converged {
        log::warn!("moment quadrature not converged: f {f} vs {fr}, v {v} vs {vr}");
    }
    Ok(Moments { f_hat: fr, v_hat: vr, converged })
}

/// Quantile of the posterior predictive at the point.
pub fn predictive_quantile(
    point: &PredictivePoint,
    draws: &[CopulaState],
    margin: &MarginModel,
    alpha: f64,
) -> Result<f64> {
    Ok(predictive_density_mc(point, draws, margin, None)?.quantile(alpha))
}

pub fn quantile_table_csv(alphas: &[f64], quantiles: &[f64]) -> String {
    let mut s = String::from("alpha,quantile\n");
    for (a, q) in alphas.iter().zip(quantiles) {
        writeln!(s, "{a},{q}").unwrap();
    }
    s
}

/// One replicate response vector at the training design:
/// `z_i ~ N(s_i b_i' beta, s_i^2 sigma_i^2)`, `y_i = F_Y^{-1}(Phi(z_i))`.
pub fn simulate_replicate<R: Rng + ?Sized>(
    state: &CopulaState,
    design: &DesignMatrices,
    margin: &MarginModel,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let u = design.n_unique();
    let mut params = Vec::with_capacity(u);
    for k in 0..u {
        let b: Vec<f64> = design.unique_b.row(k).iter().cloned().collect();
        let v: Vec<f64> = design.unique_v.row(k).iter().cloned().collect();
        let (m, sd, _) = state.conditional_at(&b, &v)?;
        params.push((m, sd));
    }
    Ok(design
        .unique_row_index
        .iter()
        .map(|&k| {
            let (m, sd) = params[k];
            margin.y_of(m + sd * rng.sample::<f64, _>(StandardNormal))
        })
        .collect())
}
