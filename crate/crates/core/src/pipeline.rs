//! Two-stage fitting: margin first, then the copula by MCMC or VB. Also the
//! flat `key = value` run configuration and the on-disk archive.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::copula::{CopulaModel, CopulaState, Layout, ModelKind, PriorSettings};
use crate::design::{sample_knots_stratified, BsplineBasis, DesignMatrices, KnotGrid, KnotKind, RbfBasis};
use crate::error::{Error, Result};
use crate::margins::{fit_kde_margin, MarginModel, PreTransform};
use crate::mcmc::{run_chain, ChainOutput, McmcConfig};
use crate::prediction::PredictivePoint;
use crate::vb::{run_vb, SgaTrace, VariationalParams, VbConfig};

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Response on the raw scale (before any pre-transform).
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub w_names: Vec<String>,
}

impl Dataset {
    /// `w` defaults to `x` when not given.
    pub fn new(y: Vec<f64>, x: DMatrix<f64>, w: Option<DMatrix<f64>>) -> Result<Self> {
        let n = y.len();
        if n < 10 {
            return Err(Error::Input(format!("need at least 10 observations, got {n}")));
        }
        let w = w.unwrap_or_else(|| x.clone());
        if x.nrows() != n || w.nrows() != n {
            return Err(Error::Input("covariate row count differs from response length".into()));
        }
        if y.iter().chain(x.iter()).chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite value in data".into()));
        }
        let x_names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let w_names = (0..w.ncols()).map(|j| format!("w{j}")).collect();
        Ok(Self { y, x, w, x_names, w_names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            x: self.x.select_rows(idx.iter()),
            w: self.w.select_rows(idx.iter()),
            x_names: self.x_names.clone(),
            w_names: self.w_names.clone(),
        }
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().cloned().collect()
    }

    pub fn w_row(&self, i: usize) -> Vec<f64> {
        self.w.row(i).iter().cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Mcmc,
    Vb,
}

impl Estimator {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mcmc" => Ok(Estimator::Mcmc),
            "vb" => Ok(Estimator::Vb),
            other => Err(Error::Config(format!("unknown estimator {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Mcmc => "mcmc",
            Estimator::Vb => "vb",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub model: ModelKind,
    pub estimator: Estimator,
    pub p1: usize,
    pub p2: usize,
    pub grid_size: usize,
    pub pre_transform: PreTransform,
    pub priors: PriorSettings,
    pub mcmc: McmcConfig,
    pub vb: VbConfig,
    /// Draws from the fitted VA used for posterior-averaged outputs.
    pub vb_draws: usize,
    pub n_strata: usize,
    pub stratum_dim: usize,
    pub periodic_dims: Vec<usize>,
    pub seed: u64,
}

impl FitConfig {
    /// Defaults for a model: 22/12 B-spline terms for PSC/HPSC, 240/96
    /// radial knots for HRBFC.
    pub fn new(model: ModelKind) -> Self {
        let (p1, p2) = match model {
            ModelKind::Psc => (22, 0),
            ModelKind::Hpsc => (22, 12),
            ModelKind::Hrbfc => (240, 96),
        };
        Self {
            model,
            estimator: Estimator::Vb,
            p1,
            p2,
            grid_size: 2048,
            pre_transform: PreTransform::Identity,
            priors: PriorSettings::default(),
            mcmc: McmcConfig::default(),
            vb: VbConfig::default(),
            vb_draws: 1000,
            n_strata: 10,
            stratum_dim: 0,
            periodic_dims: vec![],
            seed: 1,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.mcmc.seed = seed;
        self.vb.seed = seed;
    }

    /// Build from `key = value` pairs; unknown keys are errors. Keys in
    /// `passthrough` are accepted and ignored (used for CLI-only keys).
    pub fn from_kv(kv: &BTreeMap<String, String>, passthrough: &[&str]) -> Result<Self> {
        let model = ModelKind::parse(kv.get("model").map(String::as_str).unwrap_or("HPSC"))?;
        let mut c = Self::new(model);
        let num = |k: &str, v: &str| -> Result<f64> {
            v.trim().parse::<f64>().map_err(|_| Error::Config(format!("{k}: expected a number, got {v:?}")))
        };
        let int = |k: &str, v: &str| -> Result<usize> {
            v.trim().parse::<usize>().map_err(|_| Error::Config(format!("{k}: expected a non-negative integer, got {v:?}")))
        };
        let boolean = |k: &str, v: &str| -> Result<bool> {
            match v.trim() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("{k}: expected true or false, got {v:?}"))),
            }
        };
        let mut seed = None;
        for (k, v) in kv {
            let k = k.as_str();
            match k {
                "model" => {}
                "estimator" => c.estimator = Estimator::parse(v)?,
                "prior" => {
                    let want = if model.horseshoe() { "horseshoe" } else { "ar2" };
                    if v.trim() != want {
                        return Err(Error::Config(format!("{} requires the {want} prior, got {v:?}", model.name())));
                    }
                }
                "basis" => {
                    let want = if model.horseshoe() { "rbf" } else { "bspline" };
                    if v.trim() != want {
                        return Err(Error::Config(format!("{} requires {want} bases, got {v:?}", model.name())));
                    }
                }
                "p1" => c.p1 = int(k, v)?,
                "p2" | "b_tau2_alpha" if model == ModelKind::Psc => {
                    return Err(Error::Config(format!("PSC has no variance function; remove {k}")));
                }
                "p2" => c.p2 = int(k, v)?,
                "grid_size" => c.grid_size = int(k, v)?,
                "log_shift" => c.pre_transform = PreTransform::LogShift(num(k, v)?),
                "b_tau2_beta" => c.priors.b_tau2_beta = num(k, v)?,
                "b_tau2_alpha" => c.priors.b_tau2_alpha = num(k, v)?,
                "burn_in" => c.mcmc.burn_in = int(k, v)?,
                "draws" => c.mcmc.draws = int(k, v)?,
                "thin" => c.mcmc.thin = int(k, v)?,
                "m_adapt" => c.mcmc.m_adapt = Some(int(k, v)?),
                "mu_times_ten" => c.mcmc.mu_times_ten = boolean(k, v)?,
                "delta" => c.mcmc.delta = num(k, v)?,
                "iota" => c.mcmc.iota = num(k, v)?,
                "steps" => c.vb.steps = int(k, v)?,
                "K" | "k" => c.vb.k = int(k, v)?,
                "rho_ad" => c.vb.rho = num(k, v)?,
                "eps_ad" => c.vb.eps = num(k, v)?,
                "vb_draws" => c.vb_draws = int(k, v)?,
                "n_strata" => c.n_strata = int(k, v)?,
                "stratum_dim" => c.stratum_dim = int(k, v)?,
                "periodic" => {
                    c.periodic_dims = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| int(k, s))
                        .collect::<Result<_>>()?
                }
                "seed" => seed = Some(int(k, v)? as u64),
                _ if passthrough.contains(&k) => {}
                _ => return Err(Error::Config(format!("unknown configuration key {k:?}"))),
            }
        }
        if let Some(s) = seed {
            c.set_seed(s);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("model", self.model.name().into());
        put("estimator", self.estimator.name().into());
        put("p1", self.p1.to_string());
        if self.model != ModelKind::Psc {
            put("p2", self.p2.to_string());
            put("b_tau2_alpha", self.priors.b_tau2_alpha.to_string());
        }
        put("grid_size", self.grid_size.to_string());
        if let PreTransform::LogShift(c) = self.pre_transform {
            put("log_shift", c.to_string());
        }
        put("b_tau2_beta", self.priors.b_tau2_beta.to_string());
        put("burn_in", self.mcmc.burn_in.to_string());
        put("draws", self.mcmc.draws.to_string());
        put("thin", self.mcmc.thin.to_string());
        if let Some(m) = self.mcmc.m_adapt {
            put("m_adapt", m.to_string());
        }
        put("mu_times_ten", self.mcmc.mu_times_ten.to_string());
        put("delta", self.mcmc.delta.to_string());
        put("iota", self.mcmc.iota.to_string());
        put("steps", self.vb.steps.to_string());
        put("K", self.vb.k.to_string());
        put("rho_ad", self.vb.rho.to_string());
        put("eps_ad", self.vb.eps.to_string());
        put("vb_draws", self.vb_draws.to_string());
        put("n_strata", self.n_strata.to_string());
        put("stratum_dim", self.stratum_dim.to_string());
        put("periodic", self.periodic_dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","));
        put("seed", self.seed.to_string());
        m
    }

    pub fn validate(&self) -> Result<()> {
        if !self.model.horseshoe() && self.p1 < 4 {
            return Err(Error::Config("B-spline mean basis needs p1 >= 4".into()));
        }
        if self.model == ModelKind::Hpsc && self.p2 < 4 {
            return Err(Error::Config("B-spline variance basis needs p2 >= 4".into()));
        }
        if self.model.horseshoe() && (self.p1 == 0 || self.p2 == 0) {
            return Err(Error::Config("radial bases need at least one knot each".into()));
        }
        if self.grid_size < 16 {
            return Err(Error::Config("grid_size must be at least 16".into()));
        }
        if !(self.mcmc.delta > 0.0 && self.mcmc.delta < 1.0) {
            return Err(Error::Config("delta must lie in (0, 1)".into()));
        }
        if self.vb_draws == 0 {
            return Err(Error::Config("vb_draws must be positive".into()));
        }
        Ok(())
    }
}

pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key = value, got {line:?}") })?;
        m.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(m)
}

pub fn kv_to_text(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Min-max scaling of covariates to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaling {
    pub fn fit(x: &DMatrix<f64>) -> Result<Self> {
        let mut min = Vec::new();
        let mut max = Vec::new();
        for j in 0..x.ncols() {
            let c = x.column(j);
            let (lo, hi) = (c.min(), c.max());
            if !(hi > lo) {
                return Err(Error::Degenerate(format!("covariate column {j} is constant")));
            }
            min.push(lo);
            max.push(hi);
        }
        Ok(Self { min, max })
    }

    /// Scaled row; values outside the training range are clipped.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(v, (lo, hi))| {
                let s = (v - lo) / (hi - lo);
                if !(0.0..=1.0).contains(&s) {
                    log::warn!("covariate {v} outside training range [{lo}, {hi}]; clipped");
                }
                s.clamp(0.0, 1.0)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BasisModel {
    /// Cubic B-splines in the first covariate column.
    Bspline(BsplineBasis),
    Rbf { basis: RbfBasis, scaling: Scaling },
}

impl BasisModel {
    pub fn len(&self) -> usize {
        match self {
            BasisModel::Bspline(b) => b.p,
            BasisModel::Rbf { basis, .. } => basis.knots.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, cov: &[f64]) -> Result<Vec<f64>> {
        match self {
            BasisModel::Bspline(b) => {
                let x = *cov.first().ok_or_else(|| Error::Input("empty covariate row".into()))?;
                if x < b.lo || x > b.hi {
                    log::warn!("covariate {x} outside training range [{}, {}]; clamped", b.lo, b.hi);
                }
                Ok(b.row(x))
            }
            BasisModel::Rbf { basis, scaling } => basis.row(&scaling.apply(cov)),
        }
    }

    pub fn design(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(x.nrows(), self.len());
        for i in 0..x.nrows() {
            let r: Vec<f64> = x.row(i).iter().cloned().collect();
            for (j, v) in self.row(&r)?.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self {
            BasisModel::Bspline(b) => {
                writeln!(s, "bspline").unwrap();
                writeln!(s, "{} {} {}", b.lo, b.hi, b.p).unwrap();
            }
            BasisModel::Rbf { basis, scaling } => {
                let k = &basis.knots;
                writeln!(s, "rbf").unwrap();
                writeln!(s, "{} {}", k.covariate_dim, k.len()).unwrap();
                let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
                let periodic: Vec<String> = k.periodic_dims.iter().map(|d| d.to_string()).collect();
                writeln!(s, "periodic {}", periodic.join(" ")).unwrap();
                writeln!(s, "{}", join(&scaling.min)).unwrap();
                writeln!(s, "{}", join(&scaling.max)).unwrap();
                for p in &k.points {
                    writeln!(s, "{}", join(p)).unwrap();
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let perr = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        let nums = |i: usize| -> Result<Vec<f64>> {
            lines
                .get(i)
                .ok_or_else(|| perr(i + 1, "truncated basis file"))?
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| perr(i + 1, "bad number")))
                .collect()
        };
        match lines.first().map(|l| l.trim()) {
            Some("bspline") => {
                let v = nums(1)?;
                if v.len() != 3 {
                    return Err(perr(2, "expected `lo hi p`"));
                }
                Ok(BasisModel::Bspline(BsplineBasis::new(v[0], v[1], v[2] as usize)?))
            }
            Some("rbf") => {
                let h = nums(1)?;
                if h.len() != 2 {
                    return Err(perr(2, "expected `dim knots`"));
                }
                let (d, p) = (h[0] as usize, h[1] as usize);
                let per = lines.get(2).and_then(|l| l.strip_prefix("periodic")).ok_or_else(|| perr(3, "expected periodic line"))?;
                let periodic_dims = per
                    .split_whitespace()
                    .map(|t| t.parse::<usize>().map_err(|_| perr(3, "bad periodic index")))
                    .collect::<Result<Vec<_>>>()?;
                let min = nums(3)?;
                let max = nums(4)?;
                if min.len() != d || max.len() != d {
                    return Err(perr(4, "scaling length differs from dimension"));
                }
                let mut points = Vec::with_capacity(p);
                for i in 0..p {
                    let pt = nums(5 + i)?;
                    if pt.len() != d {
                        return Err(perr(6 + i, "knot dimension mismatch"));
                    }
                    points.push(pt);
                }
                let knots = KnotGrid { kind: KnotKind::RbfSampled, covariate_dim: d, points, periodic_dims };
                Ok(BasisModel::Rbf { basis: RbfBasis::new(knots)?, scaling: Scaling { min, max } })
            }
            _ => Err(perr(1, "unknown basis kind")),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Estimate {
    Mcmc(ChainOutput),
    Vb { vp: VariationalParams, trace: SgaTrace },
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub config: FitConfig,
    pub margin: MarginModel,
    pub basis_b: BasisModel,
    /// Absent for the PSC.
    pub basis_v: Option<BasisModel>,
    pub layout: Layout,
    pub estimate: Estimate,
}

/// Bases for the configured model, built on training covariates.
pub fn build_bases(cfg: &FitConfig, data: &Dataset) -> Result<(BasisModel, Option<BasisModel>)> {
    let col0 = |m: &DMatrix<f64>| m.column(0).iter().cloned().collect::<Vec<f64>>();
    match cfg.model {
        ModelKind::Psc => Ok((BasisModel::Bspline(BsplineBasis::from_data(&col0(&data.x), cfg.p1)?), None)),
        ModelKind::Hpsc => Ok((
            BasisModel::Bspline(BsplineBasis::from_data(&col0(&data.x), cfg.p1)?),
            Some(BasisModel::Bspline(BsplineBasis::from_data(&col0(&data.w), cfg.p2)?)),
        )),
        ModelKind::Hrbfc => {
            let mk = |m: &DMatrix<f64>, p: usize, seed: u64| -> Result<BasisModel> {
                let scaling = Scaling::fit(m)?;
                let mut scaled = m.clone();
                for i in 0..m.nrows() {
                    let r: Vec<f64> = m.row(i).iter().cloned().collect();
                    for (j, v) in scaling.apply(&r).into_iter().enumerate() {
                        scaled[(i, j)] = v;
                    }
                }
                let sd = cfg.stratum_dim.min(m.ncols() - 1);
                let knots = sample_knots_stratified(&scaled, p, sd, cfg.n_strata, &cfg.periodic_dims, seed)?;
                Ok(BasisModel::Rbf { basis: RbfBasis::new(knots)?, scaling })
            };
            Ok((mk(&data.x, cfg.p1, cfg.seed)?, Some(mk(&data.w, cfg.p2, cfg.seed.wrapping_add(1))?)))
        }
    }
}

/// Margin, bases and the copula model for a training set.
pub fn prepare(cfg: &FitConfig, data: &Dataset) -> Result<(MarginModel, BasisModel, Option<BasisModel>, CopulaModel)> {
    prepare_with_margin(cfg, data, None)
}

/// As [`prepare`], reusing `margin` instead of estimating one when given.
pub fn prepare_with_margin(
    cfg: &FitConfig,
    data: &Dataset,
    margin: Option<&MarginModel>,
) -> Result<(MarginModel, BasisModel, Option<BasisModel>, CopulaModel)> {
    cfg.validate()?;
    let y: Vec<f64> = data.y.iter().map(|&v| cfg.pre_transform.apply(v)).collect::<Result<_>>()?;
    let margin = match margin {
        Some(m) => m.clone(),
        None => fit_kde_margin(&y, cfg.grid_size, cfg.pre_transform)?,
    };
    let (_, z) = margin.to_copula_scale(&y)?;
    let logjac = margin.log_jacobian(&y, &z);
    let (bb, bv) = build_bases(cfg, data)?;
    let b = bb.design(&data.x)?;
    let v = match &bv {
        Some(m) => m.design(&data.w)?,
        None => DMatrix::zeros(data.n(), 0),
    };
    let model = CopulaModel::new(cfg.model, DesignMatrices::new(b, v)?, z, logjac, cfg.priors)?;
    Ok((margin, bb, bv, model))
}

pub fn fit(cfg: &FitConfig, data: &Dataset) -> Result<FittedModel> {
    fit_with_margin(cfg, data, None)
}

pub fn fit_with_margin(cfg: &FitConfig, data: &Dataset, margin: Option<&MarginModel>) -> Result<FittedModel> {
    let (margin, basis_b, basis_v, model) = prepare_with_margin(cfg, data, margin)?;
    let estimate = fit_copula(cfg, &model)?;
    Ok(FittedModel { config: cfg.clone(), margin, basis_b, basis_v, layout: model.layout, estimate })
}

pub fn fit_copula(cfg: &FitConfig, model: &CopulaModel) -> Result<Estimate> {
    match cfg.estimator {
        Estimator::Mcmc => Ok(Estimate::Mcmc(run_chain(model, &cfg.mcmc, None)?)),
        Estimator::Vb => {
            let (vp, trace) = run_vb(model.layout.dim(), &cfg.vb, None, |t: &DVector<f64>| {
                let e = model.log_posterior(t.as_slice());
                (e.logh, e.grad)
            })?;
            Ok(Estimate::Vb { vp, trace })
        }
    }
}

impl FittedModel {
    pub fn point(&self, x: &[f64], w: &[f64]) -> Result<PredictivePoint> {
        let b = self.basis_b.row(x)?;
        let v = match &self.basis_v {
            Some(m) => m.row(w)?,
            None => vec![],
        };
        Ok(PredictivePoint { b, v })
    }

    /// VB mean, or the posterior mean of the unconstrained MCMC draws.
    pub fn point_estimate(&self) -> CopulaState {
        match &self.estimate {
            Estimate::Mcmc(c) => self.layout.from_vector(c.mean().as_slice()),
            Estimate::Vb { vp, .. } => self.layout.from_vector(vp.mu.as_slice()),
        }
    }

    /// MCMC draws, or `vb_draws` samples from the fitted VA.
    pub fn posterior_draws(&self) -> Vec<CopulaState> {
        match &self.estimate {
            Estimate::Mcmc(c) => c.states(),
            Estimate::Vb { vp, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
                (0..self.config.vb_draws).map(|_| self.layout.from_vector(vp.draw(&mut rng).theta.as_slice())).collect()
            }
        }
    }

    /// Response on the modelled scale (after the pre-transform).
    pub fn model_scale(&self, y_raw: f64) -> Result<f64> {
        self.config.pre_transform.apply(y_raw)
    }

    pub fn run_log(&self) -> String {
        let mut s = String::new();
        match &self.estimate {
            Estimate::Mcmc(c) => {
                writeln!(s, "block,proposals,accepts,rate,fallbacks,divergent").unwrap();
                for b in &c.acceptance {
                    writeln!(s, "{},{},{},{},{},{}", b.name, b.proposals, b.accepts, b.rate(), b.fallbacks, b.divergent)
                        .unwrap();
                }
                writeln!(s, "# final_eps = {}", c.final_eps).unwrap();
                writeln!(s, "# hmc_accept_post_adapt = {}", c.hmc_accept_post_adapt).unwrap();
            }
            Estimate::Vb { trace, .. } => {
                writeln!(s, "step,lower_bound").unwrap();
                for (i, v) in trace.lower_bound_estimates.iter().enumerate() {
                    writeln!(s, "{},{v}", i + 1).unwrap();
                }
                writeln!(s, "# lb_bar = {}", trace.lb_bar).unwrap();
                writeln!(s, "# rejected = {}", trace.rejected).unwrap();
            }
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut head = format!("regcopula-archive {ARCHIVE_VERSION}\n");
        head.push_str(&kv_to_text(&self.config.to_kv()));
        fs::write(dir.join("archive.txt"), head)?;
        fs::write(dir.join("margin.txt"), self.margin.to_text())?;
        fs::write(dir.join("basis_b.txt"), self.basis_b.to_text())?;
        if let Some(v) = &self.basis_v {
            fs::write(dir.join("basis_v.txt"), v.to_text())?;
        }
        match &self.estimate {
            Estimate::Mcmc(c) => {
                fs::write(dir.join("draws.csv"), c.to_text())?;
                fs::write(dir.join("acceptance.csv"), self.run_log())?;
            }
            Estimate::Vb { vp, .. } => {
                fs::write(dir.join("vp.txt"), vp.to_text())?;
                fs::write(dir.join("lb_trace.csv"), self.run_log())?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name))
                .map_err(|e| Error::Input(format!("cannot read {}: {e}", dir.join(name).display())))
        };
        let head = read("archive.txt")?;
        let first = head.lines().next().unwrap_or("");
        let version = first
            .strip_prefix("regcopula-archive ")
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::Parse { line: 1, msg: "not a model archive".into() })?;
        if version > ARCHIVE_VERSION {
            return Err(Error::Config(format!(
                "archive version {version} is newer than supported version {ARCHIVE_VERSION}"
            )));
        }
        let kv = parse_kv_text(&head[first.len()..])?;
        let config = FitConfig::from_kv(&kv, &[])?;
        let margin = MarginModel::from_text(&read("margin.txt")?)?;
        let basis_b = BasisModel::from_text(&read("basis_b.txt")?)?;
        let basis_v = if config.model.has_alpha() { Some(BasisModel::from_text(&read("basis_v.txt")?)?) } else { None };
        let layout = Layout::new(config.model, basis_b.len(), basis_v.as_ref().map_or(0, |b| b.len()));
        let estimate = match config.estimator {
            Estimator::Mcmc => {
                let draws = ChainOutput::draws_from_text(layout, &read("draws.csv")?)?;
                Estimate::Mcmc(ChainOutput {
                    layout,
                    draws,
                    acceptance: vec![],
                    final_eps: f64::NAN,
                    hmc_accept_post_adapt: f64::NAN,
                    seed: config.mcmc.seed,
                })
            }
            Estimator::Vb => {
                let vp = VariationalParams::from_text(&read("vp.txt")?)?;
                if vp.dim() != layout.dim() {
                    return Err(Error::Config("variational parameters do not match the model layout".into()));
                }
                let trace = SgaTrace { lower_bound_estimates: vec![], step_count: 0, rejected: 0, lb_bar: f64::NAN };
                Estimate::Vb { vp, trace }
            }
        };
        Ok(Self { config, margin, basis_b, basis_v, layout, estimate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&x| (4.0 * x).sin() + (0.2 + 0.5 * x) * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dataset::new(y, DMatrix::from_vec(n, 1, x), None).unwrap()
    }

    #[test]
    fn config_round_trip_and_validation() {
        let mut c = FitConfig::new(ModelKind::Hpsc);
        c.set_seed(42);
        c.pre_transform = PreTransform::LogShift(101.0);
        c.mcmc.m_adapt = Some(500);
        let back = FitConfig::from_kv(&c.to_kv(), &[]).unwrap();
        assert_eq!(back, c);
        let text = kv_to_text(&c.to_kv());
        assert_eq!(FitConfig::from_kv(&parse_kv_text(&text).unwrap(), &[]).unwrap(), c);

        let kv = |pairs: &[(&str, &str)]| pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        assert!(FitConfig::from_kv(&kv(&[("model", "HRBFC"), ("prior", "ar2")]), &[]).is_err());
        assert!(FitConfig::from_kv(&kv(&[("model", "PSC"), ("p2", "10")]), &[]).is_err());
        assert!(FitConfig::from_kv(&kv(&[("model", "HPSC"), ("bogus", "1")]), &[]).is_err());
        assert!(FitConfig::from_kv(&kv(&[("model", "HPSC"), ("response", "y")]), &["response"]).is_ok());
        let d = FitConfig::from_kv(&kv(&[]), &[]).unwrap();
        assert_eq!((d.model, d.p1, d.p2), (ModelKind::Hpsc, 22, 12));
        assert!(matches!(parse_kv_text("a = 1\nnonsense\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn vb_fit_archive_round_trip() {
        let d = data(150, 1);
        let mut c = FitConfig::new(ModelKind::Hpsc);
        c.p1 = 8;
        c.p2 = 6;
        c.grid_size = 512;
        c.vb.steps = 300;
        c.vb_draws = 20;
        let f = fit(&c, &d).unwrap();
        let dir = std::env::temp_dir().join(format!("regcopula-archive-{}", std::process::id()));
        f.save(&dir).unwrap();
        let g = FittedModel::load(&dir).unwrap();
        assert_eq!(g.point_estimate(), f.point_estimate());
        assert_eq!(g.posterior_draws(), f.posterior_draws());
        assert_eq!(g.margin, f.margin);
        assert_eq!(g.basis_b, f.basis_b);
        assert_eq!(g.point(&[0.3], &[0.3]).unwrap(), f.point(&[0.3], &[0.3]).unwrap());
        // a future archive version is rejected
        let head = fs::read_to_string(dir.join("archive.txt")).unwrap();
        fs::write(dir.join("archive.txt"), head.replacen("regcopula-archive 1", "regcopula-archive 99", 1)).unwrap();
        assert!(matches!(FittedModel::load(&dir), Err(Error::Config(_))));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rbf_bases_round_trip_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 100.0 * rng.random::<f64>() } else { rng.random::<f64>() });
        let y: Vec<f64> = (0..n).map(|i| x[(i, 1)] + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let d = Dataset::new(y, x, None).unwrap();
        let mut c = FitConfig::new(ModelKind::Hrbfc);
        c.p1 = 20;
        c.p2 = 8;
        c.periodic_dims = vec![1];
        c.stratum_dim = 1;
        let (bb, bv) = build_bases(&c, &d).unwrap();
        assert_eq!(bb.len(), 20);
        assert_eq!(bv.as_ref().unwrap().len(), 8);
        assert_eq!(BasisModel::from_text(&bb.to_text()).unwrap(), bb);
        // out-of-range inputs are clipped rather than rejected
        assert_eq!(bb.row(&[500.0, 0.5]).unwrap(), bb.row(&[d.x.column(0).max(), 0.5]).unwrap());
    }
}
