//! Grid-based response margin estimated by an adaptive Gaussian kernel
//! density estimator, and the transforms `y -> u = F(y) -> z = Phi^-1(u)`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::normal;

/// Clamp applied to `u` before the probit transform.
pub const EPS_U: f64 = 1e-6;

const N_BINS: usize = 1024;
const N_BANDWIDTHS: usize = 200;
const LOCAL_FACTOR_RANGE: (f64, f64) = (0.2, 5.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PreTransform {
    Identity,
    /// `Y = log(P + c)`
    LogShift(f64),
}

impl PreTransform {
    pub fn apply(&self, raw: f64) -> Result<f64> {
        match *self {
            PreTransform::Identity => Ok(raw),
            PreTransform::LogShift(c) => {
                if raw + c > 0.0 {
                    Ok((raw + c).ln())
                } else {
                    Err(Error::Input(format!("log shift requires y > {}, got {raw}", -c)))
                }
            }
        }
    }

    pub fn invert(&self, y: f64) -> f64 {
        match *self {
            PreTransform::Identity => y,
            PreTransform::LogShift(c) => y.exp() - c,
        }
    }

    fn describe(&self) -> String {
        match self {
            PreTransform::Identity => "identity".into(),
            PreTransform::LogShift(c) => format!("log_shift {c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginModel {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub cdf: Vec<f64>,
    pub pre_transform: PreTransform,
}

/// Linear binning onto `N_BINS` equally spaced centres over `[lo, hi]`.
fn linear_bin(y: &[f64], lo: f64, hi: f64) -> (Vec<f64>, f64) {
    let delta = (hi - lo) / (N_BINS - 1) as f64;
    let mut c = vec![0.0; N_BINS];
    for &v in y {
        let pos = (v - lo) / delta;
        let j = (pos.floor() as usize).min(N_BINS - 2);
        let f = pos - j as f64;
        c[j] += 1.0 - f;
        c[j + 1] += f;
    }
    (c, delta)
}

/// Global bandwidth minimising the Shimazaki-Shinomoto kernel cost
/// `sum_{i,j} phi_{sqrt2 w}(x_i - x_j) - 2 sum_{i != j} phi_w(x_i - x_j)`.
fn ss_bandwidth(counts: &[f64], delta: f64, n: f64, range: f64) -> f64 {
    let m = counts.len();
    let mut acf = vec![0.0; m];
    for (lag, a) in acf.iter_mut().enumerate() {
        *a = (0..m - lag).map(|i| counts[i] * counts[i + lag]).sum();
    }
    let gauss = |d: f64, w: f64| (-0.5 * (d / w).powi(2)).exp() / (w * (2.0 * std::f64::consts::PI).sqrt());
    let w_min = (2.0 * delta).max(range * 1e-4);
    let w_max = range;
    let mut best = (f64::INFINITY, w_max);
    for k in 0..N_BANDWIDTHS {
        let w = w_min * (w_max / w_min).powf(k as f64 / (N_BANDWIDTHS - 1) as f64);
        let cutoff = ((10.0 * w / delta).ceil() as usize).min(m - 1);
        let mut cost = 2.0 * n * gauss(0.0, w);
        for (lag, a) in acf.iter().enumerate().take(cutoff + 1) {
            let mult = if lag == 0 { 1.0 } else { 2.0 };
            let d = lag as f64 * delta;
            cost += mult * a * (gauss(d, std::f64::consts::SQRT_2 * w) - 2.0 * gauss(d, w));
        }
        if cost < best.0 {
            best = (cost, w);
        }
    }
    best.1
}

fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2).zip(f.windows(2)).map(|(xs, fs)| 0.5 * (xs[1] - xs[0]) * (fs[0] + fs[1])).sum()
}

fn cumulative_trapezoid(x: &[f64], f: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..x.len() {
        acc += 0.5 * (x[i] - x[i - 1]) * (f[i] + f[i - 1]);
        out.push(acc);
    }
    out
}

/// Adaptive KDE margin: Shimazaki-Shinomoto global bandwidth, then local
/// bandwidths proportional to pilot density^(-1/2).
pub fn fit_kde_margin(y: &[f64], grid_size: usize, pre_transform: PreTransform) -> Result<MarginModel> {
    let n = y.len();
    if n < 10 {
        return Err(Error::Input(format!("margin estimation needs n >= 10, got {n}")));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite response at index {i}")));
    }
    if grid_size < 16 {
        return Err(Error::Config(format!("grid size {grid_size} too small")));
    }
    let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Degenerate(format!("constant response {lo}")));
    }
    let range = hi - lo;
    let (counts, delta) = linear_bin(y, lo, hi);
    let w = ss_bandwidth(&counts, delta, n as f64, range);

    // pilot density at bin centres, interpolated to the data
    let reach = ((5.0 * w / delta).ceil() as isize).max(1);
    let norm = 1.0 / (n as f64 * w * (2.0 * std::f64::consts::PI).sqrt());
    let kern: Vec<f64> = (0..=reach).map(|l| (-0.5 * (l as f64 * delta / w).powi(2)).exp()).collect();
    let mut pilot = vec![0.0; N_BINS];
    for (j, cj) in counts.iter().enumerate() {
        if *cj == 0.0 {
            continue;
        }
        let a = (j as isize - reach).max(0) as usize;
        let b = ((j as isize + reach) as usize).min(N_BINS - 1);
        for (i, p) in pilot.iter_mut().enumerate().take(b + 1).skip(a) {
            *p += cj * kern[i.abs_diff(j)] * norm;
        }
    }
    let pilot_at = |v: f64| {
        let pos = (v - lo) / delta;
        let j = (pos.floor() as usize).min(N_BINS - 2);
        let f = pos - j as f64;
        (1.0 - f) * pilot[j] + f * pilot[j + 1]
    };
    let fy: Vec<f64> = y.iter().map(|v| pilot_at(*v).max(f64::MIN_POSITIVE)).collect();
    let log_g = fy.iter().map(|f| f.ln()).sum::<f64>() / n as f64;
    let local: Vec<f64> = fy
        .iter()
        .map(|f| w * ((log_g - f.ln()) * 0.5).exp().clamp(LOCAL_FACTOR_RANGE.0, LOCAL_FACTOR_RANGE.1))
        .collect();
    let wmax = local.iter().cloned().fold(0.0, f64::max);

    let g_lo = lo - 4.0 * wmax;
    let g_hi = hi + 4.0 * wmax;
    let step = (g_hi - g_lo) / (grid_size - 1) as f64;
    let grid: Vec<f64> = (0..grid_size).map(|i| g_lo + step * i as f64).collect();
    let mut density = vec![0.0; grid_size];
    let c0 = 1.0 / (n as f64 * (2.0 * std::f64::consts::PI).sqrt());
    for (yi, wi) in y.iter().zip(&local) {
        let a = (((yi - 8.0 * wi - g_lo) / step).floor().max(0.0)) as usize;
        let b = (((yi + 8.0 * wi - g_lo) / step).ceil() as usize).min(grid_size - 1);
        for (g, d) in grid[a..=b].iter().zip(density[a..=b].iter_mut()) {
            let t = (g - yi) / wi;
            *d += c0 / wi * (-0.5 * t * t).exp();
        }
    }
    let total = trapezoid(&grid, &density);
    for d in density.iter_mut() {
        *d /= total;
    }
    let mut cdf = cumulative_trapezoid(&grid, &density);
    let last = *cdf.last().unwrap();
    for c in cdf.iter_mut() {
        *c = (*c / last).min(1.0);
    }
    Ok(MarginModel { grid, density, cdf, pre_transform })
}

impl MarginModel {
    pub fn lo(&self) -> f64 {
        self.grid[0]
    }

    pub fn hi(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    fn locate(&self, y: f64) -> (usize, f64) {
        let step = (self.hi() - self.lo()) / (self.grid.len() - 1) as f64;
        let pos = ((y - self.lo()) / step).clamp(0.0, (self.grid.len() - 1) as f64);
        let j = (pos.floor() as usize).min(self.grid.len() - 2);
        // guard against rounding in pos
        let j = if y < self.grid[j] && j > 0 { j - 1 } else { j };
        let j = if y > self.grid[j + 1] && j + 2 < self.grid.len() { j + 1 } else { j };
        let f = ((y - self.grid[j]) / (self.grid[j + 1] - self.grid[j])).clamp(0.0, 1.0);
        (j, f)
    }

    pub fn grid_spacing(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    pub fn contains(&self, y: f64) -> bool {
        y >= self.lo() && y <= self.hi()
    }

    /// `F_Y(y)`, clamped to `[0, 1]` outside the grid.
    pub fn cdf_at(&self, y: f64) -> f64 {
        if y <= self.lo() {
            return 0.0;
        }
        if y >= self.hi() {
            return 1.0;
        }
        let (j, f) = self.locate(y);
        (1.0 - f) * self.cdf[j] + f * self.cdf[j + 1]
    }

    /// `p_Y(y)`, zero outside the grid.
    pub fn density_at(&self, y: f64) -> f64 {
        if !self.contains(y) {
            return 0.0;
        }
        let (j, f) = self.locate(y);
        (1.0 - f) * self.density[j] + f * self.density[j + 1]
    }

    /// `F_Y^{-1}(u)` by linear interpolation on the cdf; clamps to the grid ends.
    pub fn quantile(&self, u: f64) -> f64 {
        if u <= self.cdf[0] {
            return self.lo();
        }
        if u >= 1.0 {
            return self.hi();
        }
        let j = self.cdf.partition_point(|c| *c < u);
        if j == 0 {
            return self.lo();
        }
        if j >= self.cdf.len() {
            return self.hi();
        }
        let (c0, c1) = (self.cdf[j - 1], self.cdf[j]);
        if c1 <= c0 {
            return self.grid[j];
        }
        self.grid[j - 1] + (u - c0) / (c1 - c0) * (self.grid[j] - self.grid[j - 1])
    }

    pub fn z_of(&self, y: f64) -> f64 {
        normal::quantile(self.cdf_at(y).clamp(EPS_U, 1.0 - EPS_U))
    }

    pub fn y_of(&self, z: f64) -> f64 {
        self.quantile(normal::cdf(z))
    }

    /// `u = F_Y(y)` clamped to `[EPS_U, 1 - EPS_U]` and `z = Phi^{-1}(u)`.
    pub fn to_copula_scale(&self, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut u = Vec::with_capacity(y.len());
        let mut z = Vec::with_capacity(y.len());
        for (index, &value) in y.iter().enumerate() {
            if !(value.is_finite() && self.contains(value)) {
                return Err(Error::Extrapolation { index, value, lo: self.lo(), hi: self.hi() });
            }
            let ui = self.cdf_at(value).clamp(EPS_U, 1.0 - EPS_U);
            u.push(ui);
            z.push(normal::quantile(ui));
        }
        Ok((u, z))
    }

    pub fn from_copula_scale(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|zi| self.y_of(*zi)).collect()
    }

    /// `sum log p_Y(y_i) - sum log phi(z_i)`, the Jacobian of `z -> y`.
    pub fn log_jacobian(&self, y: &[f64], z: &[f64]) -> f64 {
        y.iter()
            .zip(z)
            .map(|(yi, zi)| self.density_at(*yi).max(1e-300).ln() - normal::logpdf(*zi))
            .sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "regcopula-margin 1").unwrap();
        writeln!(s, "grid_size {}", self.grid.len()).unwrap();
        writeln!(s, "pre_transform {}", self.pre_transform.describe()).unwrap();
        for i in 0..self.grid.len() {
            writeln!(s, "{} {} {}", self.grid[i], self.density[i], self.cdf[i]).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let perr = |line: usize, msg: &str| Error::Parse { line: line + 1, msg: msg.to_string() };
        let (l0, head) = lines.next().ok_or_else(|| perr(0, "empty margin file"))?;
        match head.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["regcopula-margin", "1"] => {}
            ["regcopula-margin", v] => return Err(perr(l0, &format!("unsupported margin file version {v}"))),
            _ => return Err(perr(l0, "not a margin file")),
        }
        let (l1, gs) = lines.next().ok_or_else(|| perr(1, "missing grid_size"))?;
        let grid_size: usize = gs
            .strip_prefix("grid_size ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| perr(l1, "bad grid_size line"))?;
        let (l2, pt) = lines.next().ok_or_else(|| perr(2, "missing pre_transform"))?;
        let parts: Vec<&str> = pt.split_whitespace().collect();
        let pre_transform = match parts.as_slice() {
            ["pre_transform", "identity"] => PreTransform::Identity,
            ["pre_transform", "log_shift", c] => {
                PreTransform::LogShift(c.parse().map_err(|_| perr(l2, "bad log_shift constant"))?)
            }
            _ => return Err(perr(l2, "bad pre_transform line")),
        };
        let mut grid = Vec::with_capacity(grid_size);
        let mut density = Vec::with_capacity(grid_size);
        let mut cdf = Vec::with_capacity(grid_size);
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| perr(ln, "non-numeric margin entry"))?;
            if vals.len() != 3 {
                return Err(perr(ln, "expected three columns"));
            }
            grid.push(vals[0]);
            density.push(vals[1]);
            cdf.push(vals[2]);
        }
        if grid.len() != grid_size {
            return Err(perr(3 + grid.len(), &format!("expected {grid_size} grid rows, found {}", grid.len())));
        }
        Ok(Self { grid, density, cdf, pre_transform })
    }
}
