//! Exact posterior sampling.
//!
//! One sweep draws beta from its Gaussian full conditional, each AR(2) hyper
//! coordinate of beta by a Metropolis-Hastings step with a Newton (mode and
//! curvature) Gaussian proposal, alpha by HMC with dual-averaging step size,
//! then the alpha hypers like the beta hypers. For the horseshoe model the
//! non-beta coordinates are updated jointly by the HMC step.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::copula::{CopulaModel, CopulaState, Hyper, Layout};
use crate::error::{Error, Result};
use crate::priors::{Ar2Coord, Ar2Hyper};

/// Random-walk scale used when the target is not locally concave.
pub const MH_FALLBACK_SD: f64 = 0.1;

/// Step-size adaptation by dual averaging.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    pub eps: f64,
    pub eps_bar: f64,
    pub h_bar: f64,
    pub mu: f64,
    pub m: usize,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
    pub delta: f64,
    pub iota: f64,
    pub m_adapt: usize,
}

impl DualAveraging {
    /// `mu = log(eps0)`, or `log(10 eps0)` when `mu_times_ten` is set.
    pub fn new(eps0: f64, m_adapt: usize, mu_times_ten: bool) -> Self {
        Self {
            eps: eps0,
            eps_bar: 1.0,
            h_bar: 0.0,
            mu: if mu_times_ten { (10.0 * eps0).ln() } else { eps0.ln() },
            m: 0,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            delta: 0.75,
            iota: 1.0,
            m_adapt,
        }
    }

    pub fn n_leapfrog(&self) -> usize {
        ((self.iota / self.eps).round() as usize).max(1)
    }

    pub fn adapting(&self) -> bool {
        self.m < self.m_adapt
    }

    /// Record the acceptance probability of sweep `m + 1`.
    pub fn update(&mut self, accept_prob: f64) {
        self.m += 1;
        let m = self.m as f64;
        if self.m <= self.m_adapt {
            let w = 1.0 / (m + self.t0);
            self.h_bar = (1.0 - w) * self.h_bar + w * (self.delta - accept_prob);
            let log_eps = self.mu - m.sqrt() / self.gamma * self.h_bar;
            let eta = m.powf(-self.kappa);
            let log_bar = eta * log_eps + (1.0 - eta) * self.eps_bar.ln();
            self.eps = log_eps.exp();
            self.eps_bar = log_bar.exp();
            if self.m == self.m_adapt {
                self.eps = self.eps_bar;
            }
        } else {
            self.eps = self.eps_bar;
        }
    }
}

/// `L` leapfrog steps from `(x, r)`. Returns the end point, its momentum and
/// the target value and gradient there.
pub fn leapfrog<F>(
    x: &DVector<f64>,
    r: &DVector<f64>,
    grad0: &DVector<f64>,
    eps: f64,
    steps: usize,
    target: &mut F,
) -> (DVector<f64>, DVector<f64>, f64, DVector<f64>)
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut xt = x.clone();
    let mut rt = r.clone();
    let mut g = grad0.clone();
    let mut lp = f64::NAN;
    for _ in 0..steps {
        rt.axpy(0.5 * eps, &g, 1.0);
        xt.axpy(eps, &rt, 1.0);
        let (l, gn) = target(&xt);
        lp = l;
        g = gn;
        if !lp.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return (xt, rt, f64::NEG_INFINITY, g);
        }
        rt.axpy(0.5 * eps, &g, 1.0);
    }
    (xt, rt, lp, g)
}

fn std_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Initial step size: double or halve from 1 until the one-step acceptance
/// ratio crosses 0.5.
pub fn find_initial_eps<F, R>(x: &DVector<f64>, target: &mut F, rng: &mut R) -> f64
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
    R: Rng + ?Sized,
{
    let (lp0, g0) = target(x);
    let r = std_normal_vec(x.len(), rng);
    let h0 = lp0 - 0.5 * r.norm_squared();
    let log_ratio = |eps: f64, target: &mut F| {
        let (_, rn, lp, _) = leapfrog(x, &r, &g0, eps, 1, target);
        let v = lp - 0.5 * rn.norm_squared() - h0;
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    };
    let mut eps = 1.0;
    let ln_half = 0.5f64.ln();
    let a = if log_ratio(eps, target) > ln_half { 1.0 } else { -1.0 };
    for _ in 0..60 {
        let lr = log_ratio(eps, target);
        if !(a * lr > -a * std::f64::consts::LN_2) {
            break;
        }
        eps *= 2f64.powf(a);
    }
    eps
}

#[derive(Debug, Clone)]
pub struct HmcOutcome {
    pub x: DVector<f64>,
    pub logp: f64,
    pub grad: DVector<f64>,
    pub accept_prob: f64,
    pub accepted: bool,
    pub diverged: bool,
}

/// One HMC transition with identity mass matrix, followed by the dual
/// averaging update.
pub fn hmc_step<F, R>(
    x: &DVector<f64>,
    logp: f64,
    grad: &DVector<f64>,
    da: &mut DualAveraging,
    target: &mut F,
    rng: &mut R,
) -> HmcOutcome
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
    R: Rng + ?Sized,
{
    let r = std_normal_vec(x.len(), rng);
    let steps = da.n_leapfrog();
    let (xt, rt, lpt, gt) = leapfrog(x, &r, grad, da.eps, steps, target);
    let log_a = lpt - 0.5 * rt.norm_squared() - (logp - 0.5 * r.norm_squared());
    let (accept_prob, diverged) = if log_a.is_finite() { (log_a.exp().min(1.0), false) } else { (0.0, true) };
    let u: f64 = rng.random();
    let accepted = u < accept_prob;
    da.update(accept_prob);
    if accepted {
        HmcOutcome { x: xt, logp: lpt, grad: gt, accept_prob, accepted, diverged }
    } else {
        HmcOutcome { x: x.clone(), logp, grad: grad.clone(), accept_prob, accepted, diverged }
    }
}

fn proposal_params(d1: f64, d2: f64, t: f64) -> (f64, f64, bool) {
    if d2 < 0.0 && d2.is_finite() {
        (t - d1 / d2, (-1.0 / d2).sqrt(), false)
    } else {
        (t, MH_FALLBACK_SD, true)
    }
}

fn log_normal(x: f64, m: f64, s: f64) -> f64 {
    let z = (x - m) / s;
    -0.5 * z * z - s.ln() - crate::normal::LN_SQRT_2PI
}

#[derive(Debug, Clone, Copy)]
pub struct MhOutcome {
    pub t: f64,
    pub value: (f64, f64, f64),
    pub accepted: bool,
    pub fallback: bool,
}

/// Metropolis-Hastings step on one scalar with a Gaussian proposal matching
/// the local mode and curvature. `f(t)` returns value, first and second
/// derivative, or `None` for a rejectable point.
pub fn mh_newton_step<F, R>(t: f64, current: (f64, f64, f64), f: &mut F, rng: &mut R) -> MhOutcome
where
    F: FnMut(f64) -> Option<(f64, f64, f64)>,
    R: Rng + ?Sized,
{
    let (m0, s0, fallback) = proposal_params(current.1, current.2, t);
    let tp = m0 + s0 * rng.sample::<f64, _>(StandardNormal);
    let u: f64 = rng.random();
    let stay = MhOutcome { t, value: current, accepted: false, fallback };
    let prop = match f(tp) {
        Some(v) if v.0.is_finite() => v,
        _ => return stay,
    };
    let (m1, s1, _) = proposal_params(prop.1, prop.2, tp);
    let log_a = prop.0 - current.0 + log_normal(t, m1, s1) - log_normal(tp, m0, s0);
    if log_a.is_finite() && u.ln() < log_a {
        MhOutcome { t: tp, value: prop, accepted: true, fallback }
    } else {
        stay
    }
}

/// Transition density of `mh_newton_step` from `t` to `tp != t`.
pub fn mh_transition_density<F>(t: f64, tp: f64, f: &mut F) -> f64
where
    F: FnMut(f64) -> Option<(f64, f64, f64)>,
{
    let (a, b) = match (f(t), f(tp)) {
        (Some(a), Some(b)) => (a, b),
        _ => return 0.0,
    };
    let (m0, s0, _) = proposal_params(a.1, a.2, t);
    let (m1, s1, _) = proposal_params(b.1, b.2, tp);
    let fwd = log_normal(tp, m0, s0);
    let log_a = (b.0 - a.0 + log_normal(t, m1, s1) - fwd).min(0.0);
    (fwd + log_a).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub burn_in: usize,
    pub draws: usize,
    pub thin: usize,
    /// Defaults to the burn-in length.
    pub m_adapt: Option<usize>,
    pub mu_times_ten: bool,
    pub update_alpha: bool,
    pub iota: f64,
    pub delta: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            burn_in: 40_000,
            draws: 50_000,
            thin: 1,
            m_adapt: None,
            mu_times_ten: false,
            update_alpha: true,
            iota: 1.0,
            delta: 0.75,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockStats {
    pub name: String,
    pub proposals: usize,
    pub accepts: usize,
    pub fallbacks: usize,
    pub divergent: usize,
    pub sum_accept_prob: f64,
}

impl BlockStats {
    fn new(name: &str) -> Self {
        Self { name: name.to_string(), ..Default::default() }
    }

    pub fn rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepts as f64 / self.proposals as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub layout: Layout,
    /// Stored draws on the unconstrained scale.
    pub draws: Vec<DVector<f64>>,
    pub acceptance: Vec<BlockStats>,
    pub final_eps: f64,
    /// Mean HMC acceptance probability over post-adaptation sweeps.
    pub hmc_accept_post_adapt: f64,
    pub seed: u64,
}

impl ChainOutput {
    pub fn states(&self) -> Vec<CopulaState> {
        self.draws.iter().map(|d| self.layout.from_vector(d.as_slice())).collect()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.layout.dim());
        for d in &self.draws {
            m += d;
        }
        m / self.draws.len().max(1) as f64
    }

    /// One row per stored sweep; header row names each column.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}", self.layout.column_names().join(",")).unwrap();
        for d in &self.draws {
            let row: Vec<String> = d.iter().map(|v| v.to_string()).collect();
            writeln!(s, "{}", row.join(",")).unwrap();
        }
        s
    }

    pub fn draws_from_text(layout: Layout, text: &str) -> Result<Vec<DVector<f64>>> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse { line: 1, msg: "empty draws file".into() })?;
        if header.split(',').count() != layout.dim() {
            return Err(Error::Parse { line: 1, msg: format!("expected {} columns", layout.dim()) });
        }
        let mut out = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse { line: i + 2, msg: "non-numeric draw".into() })?;
            if vals.len() != layout.dim() {
                return Err(Error::Parse { line: i + 2, msg: format!("expected {} columns", layout.dim()) });
            }
            out.push(DVector::from_vec(vals));
        }
        Ok(out)
    }
}

fn ar2_of(h: &Hyper) -> Ar2Hyper {
    match h {
        Hyper::Ar2(a) => *a,
        Hyper::Horseshoe(_) => unreachable!("AR(2) hyper expected"),
    }
}

fn set_ar2_coord(h: &mut Hyper, which: Ar2Coord, t: f64) {
    if let Hyper::Ar2(a) = h {
        let mut u = a.to_unconstrained();
        u[which.index()] = t;
        *a = Ar2Hyper::from_unconstrained(&u);
    }
}

/// Run one chain of the exact sampler.
pub fn run_chain(model: &CopulaModel, cfg: &McmcConfig, init: Option<CopulaState>) -> Result<ChainOutput> {
    if cfg.draws == 0 || cfg.thin == 0 {
        return Err(Error::Config("draws and thin must be positive".into()));
    }
    let lay = model.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = init.unwrap_or_else(|| lay.initial_state());
    let horseshoe = lay.kind.horseshoe();
    let use_hmc = lay.kind.has_alpha() && (cfg.update_alpha || horseshoe);
    let total = cfg.burn_in + cfg.draws * cfg.thin;
    let m_adapt = cfg.m_adapt.unwrap_or(cfg.burn_in);

    let mut stats: Vec<BlockStats> = Vec::new();
    if !horseshoe {
        for w in ["tau2_beta", "psi1_beta", "psi2_beta"] {
            stats.push(BlockStats::new(w));
        }
    }
    let hmc_name = if horseshoe { "hmc_hyper_alpha" } else { "alpha" };
    stats.push(BlockStats::new(hmc_name));
    if lay.kind.has_alpha() && !horseshoe {
        for w in ["tau2_alpha", "psi1_alpha", "psi2_alpha"] {
            stats.push(BlockStats::new(w));
        }
    }
    let hmc_idx = if horseshoe { 0 } else { 3 };

    // HMC coordinates: alpha for AR(2) models; alpha and all hypers for the horseshoe
    let sub_start = lay.p1;
    let sub_end = if horseshoe { lay.dim() } else { lay.p1 + lay.p2 };
    let hmc_target = |beta_state: &CopulaState, x: &DVector<f64>, theta: &DVector<f64>| -> (f64, DVector<f64>) {
        if horseshoe {
            let mut full = theta.clone();
            full.rows_range_mut(sub_start..sub_end).copy_from(x);
            let e = model.log_posterior(full.as_slice());
            (e.logh, e.grad.rows_range(sub_start..sub_end).into_owned())
        } else {
            model.log_target_alpha_and_grad(beta_state, x)
        }
    };

    let mut da = None;
    let mut post_sum = 0.0;
    let mut post_n = 0usize;
    let mut draws = Vec::with_capacity(cfg.draws);

    for sweep in 1..=total {
        state.beta = model.gibbs_beta(&state, &mut rng).map_err(|e| Error::Numerical(format!("sweep {sweep}: {e}")))?;

        if !horseshoe {
            for (k, which) in Ar2Coord::ALL.into_iter().enumerate() {
                let cur = model
                    .beta_hyper_scalar(&state, which)
                    .ok_or_else(|| Error::Numerical(format!("sweep {sweep}: current state outside floors")))?;
                let t0 = ar2_of(&state.hyper_beta).to_unconstrained()[which.index()];
                let mut f = |t: f64| {
                    let mut s = state.clone();
                    set_ar2_coord(&mut s.hyper_beta, which, t);
                    model.beta_hyper_scalar(&s, which)
                };
                let out = mh_newton_step(t0, cur, &mut f, &mut rng);
                set_ar2_coord(&mut state.hyper_beta, which, out.t);
                stats[k].proposals += 1;
                stats[k].accepts += out.accepted as usize;
                stats[k].fallbacks += out.fallback as usize;
            }
        }

        if use_hmc {
            let mut theta = lay.to_vector(&state);
            let x0 = theta.rows_range(sub_start..sub_end).into_owned();
            let st = state.clone();
            let th = theta.clone();
            let mut tgt = |x: &DVector<f64>| hmc_target(&st, x, &th);
            let (lp0, g0) = tgt(&x0);
            if !lp0.is_finite() {
                return Err(Error::Numerical(format!("sweep {sweep}: HMC start has non-finite target")));
            }
            let d = da.get_or_insert_with(|| {
                let eps0 = find_initial_eps(&x0, &mut tgt, &mut rng);
                let mut d = DualAveraging::new(eps0, m_adapt, cfg.mu_times_ten);
                d.iota = cfg.iota;
                d.delta = cfg.delta;
                d
            });
            let adapting = d.adapting();
            let out = hmc_step(&x0, lp0, &g0, d, &mut tgt, &mut rng);
            let s = &mut stats[hmc_idx];
            s.proposals += 1;
            s.accepts += out.accepted as usize;
            s.divergent += out.diverged as usize;
            s.sum_accept_prob += out.accept_prob;
            if !adapting {
                post_sum += out.accept_prob;
                post_n += 1;
            }
            theta.rows_range_mut(sub_start..sub_end).copy_from(&out.x);
            let beta = state.beta.clone();
            state = lay.from_vector(theta.as_slice());
            state.beta = beta;
        }

        if lay.kind.has_alpha() && !horseshoe && cfg.update_alpha {
            for (k, which) in Ar2Coord::ALL.into_iter().enumerate() {
                let ha = state.hyper_alpha.as_ref().unwrap();
                let cur = model.alpha_hyper_scalar(&state, which);
                let t0 = ar2_of(ha).to_unconstrained()[which.index()];
                let mut f = |t: f64| {
                    let mut s = state.clone();
                    set_ar2_coord(s.hyper_alpha.as_mut().unwrap(), which, t);
                    let v = model.alpha_hyper_scalar(&s, which);
                    v.0.is_finite().then_some(v)
                };
                let out = mh_newton_step(t0, cur, &mut f, &mut rng);
                set_ar2_coord(state.hyper_alpha.as_mut().unwrap(), which, out.t);
                let s = &mut stats[4 + k];
                s.proposals += 1;
                s.accepts += out.accepted as usize;
                s.fallbacks += out.fallback as usize;
            }
        }

        if sweep > cfg.burn_in && (sweep - cfg.burn_in) % cfg.thin == 0 {
            draws.push(lay.to_vector(&state));
        }
    }
    if !use_hmc {
        stats.retain(|s| s.name != hmc_name);
    }
    Ok(ChainOutput {
        layout: lay,
        draws,
        acceptance: stats,
        final_eps: da.as_ref().map(|d| d.eps).unwrap_or(f64::NAN),
        hmc_accept_post_adapt: if post_n > 0 { post_sum / post_n as f64 } else { f64::NAN },
        seed: cfg.seed,
    })
}

/// Inefficiency factor `1 + 2 sum rho_m`, truncating the sum at the first
/// pair of autocorrelations with negative sum.
pub fn inefficiency_factor(trace: &[f64], max_lag: usize) -> Result<f64> {
    let n = trace.len();
    if max_lag == 0 || n < 10 * max_lag {
        return Err(Error::Input(format!("trace of length {n} too short for max_lag {max_lag}")));
    }
    let mean = trace.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = trace.iter().map(|v| v - mean).collect();
    let c0 = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(c0 > 0.0) {
        return Err(Error::Input("constant trace: inefficiency factor undefined".into()));
    }
    let rho = |k: usize| (0..n - k).map(|i| c[i] * c[i + k]).sum::<f64>() / (n as f64 * c0);
    let mut sum = 0.0;
    let mut k = 1;
    while k <= max_lag {
        let pair = rho(k) + if k + 1 <= max_lag { rho(k + 1) } else { 0.0 };
        if pair < 0.0 {
            break;
        }
        sum += pair;
        k += 2;
    }
    Ok(1.0 + 2.0 * sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_normal_target(x: &DVector<f64>) -> (f64, DVector<f64>) {
        (-0.5 * x.norm_squared(), -x.clone())
    }

    #[test]
    fn leapfrog_reversibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = std_normal_vec(10, &mut rng);
        let r = std_normal_vec(10, &mut rng);
        let mut t = std_normal_target;
        let (_, g) = t(&x);
        let (x1, r1, _, g1) = leapfrog(&x, &r, &g, 0.13, 25, &mut t);
        let (x2, r2, _, _) = leapfrog(&x1, &(-r1), &g1, 0.13, 25, &mut t);
        assert!((x2 - &x).norm() < 1e-10);
        assert!((r2 + &r).norm() < 1e-10);
    }

    fn energy_error(eps: f64, steps: usize) -> f64 {
        let x = DVector::from_vec(vec![0.8, -0.3]);
        let r = DVector::from_vec(vec![0.5, 1.1]);
        let mut t = std_normal_target;
        let (l0, g0) = t(&x);
        let (_, r1, l1, _) = leapfrog(&x, &r, &g0, eps, steps, &mut t);
        ((l1 - 0.5 * r1.norm_squared()) - (l0 - 0.5 * r.norm_squared())).abs()
    }

    #[test]
    fn energy_error_order() {
        // fixed trajectory length: second order in eps
        let a = energy_error(0.1, 10);
        let b = energy_error(0.05, 20);
        let ratio = a / b;
        assert!(ratio > 4.0 / 1.5 && ratio < 4.0 * 1.5, "ratio {ratio}");
        // a single step is third order for the quadratic target
        let ratio1 = energy_error(0.02, 1) / energy_error(0.01, 1);
        assert!(ratio1 > 8.0 / 1.5 && ratio1 < 8.0 * 1.5, "single-step ratio {ratio1}");
    }

    #[test]
    fn dual_averaging_freezes() {
        let mut d = DualAveraging::new(0.5, 10, false);
        for _ in 0..10 {
            d.update(0.3);
        }
        let frozen = d.eps;
        assert_eq!(frozen, d.eps_bar);
        for _ in 0..50 {
            d.update(0.99);
            assert_eq!(d.eps, frozen);
        }
    }

    #[test]
    fn hmc_acceptance_calibrates_on_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = std_normal_target;
        let mut x = std_normal_vec(10, &mut rng);
        let eps0 = find_initial_eps(&x, &mut t, &mut rng);
        let mut da = DualAveraging::new(eps0, 1000, false);
        let (mut lp, mut g) = t(&x);
        let mut post = Vec::new();
        for _ in 0..6000 {
            let adapting = da.adapting();
            let o = hmc_step(&x, lp, &g, &mut da, &mut t, &mut rng);
            if !adapting {
                post.push(o.accept_prob);
            }
            x = o.x;
            lp = o.logp;
            g = o.grad;
        }
        let mean = post.iter().sum::<f64>() / post.len() as f64;
        assert!((0.70..=0.80).contains(&mean), "acceptance {mean}");
    }

    // log density of log X for X ~ Gamma(a, rate b)
    fn log_gamma_target(a: f64, b: f64) -> impl FnMut(f64) -> Option<(f64, f64, f64)> {
        move |t: f64| Some((a * t - b * t.exp(), a - b * t.exp(), -b * t.exp()))
    }

    #[test]
    fn newton_mh_recovers_known_mean() {
        let (a, b) = (3.0, 2.0);
        let mut f = log_gamma_target(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = 0.0;
        let mut cur = f(t).unwrap();
        let mut trace = Vec::new();
        let mut acc = 0;
        for _ in 0..10_000 {
            let o = mh_newton_step(t, cur, &mut f, &mut rng);
            t = o.t;
            cur = o.value;
            acc += o.accepted as usize;
            trace.push(t);
        }
        // E[log X] = digamma(a) - log b
        let want = statrs::function::gamma::digamma(a) - b.ln();
        let mean = trace.iter().sum::<f64>() / trace.len() as f64;
        let var = trace.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / trace.len() as f64;
        let ifac = inefficiency_factor(&trace, 100).unwrap();
        let se = (var * ifac / trace.len() as f64).sqrt();
        assert!((mean - want).abs() < 4.0 * se, "{mean} vs {want} (se {se})");
        let rate = acc as f64 / 10_000.0;
        assert!(rate > 0.1 && rate < 0.99);
    }

    #[test]
    fn fallback_when_convex() {
        let mut f = |t: f64| Some((0.5 * t * t - t.powi(4), t - 4.0 * t.powi(3), 1.0 - 12.0 * t * t));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let o = mh_newton_step(0.0, f(0.0).unwrap(), &mut f, &mut rng);
        assert!(o.fallback);
        let o = mh_newton_step(1.0, f(1.0).unwrap(), &mut f, &mut rng);
        assert!(!o.fallback);
    }

    #[test]
    fn newton_mh_detailed_balance() {
        let mut f = |t: f64| Some((-t.powi(4) / 4.0 + 0.5 * t * t, -t.powi(3) + t, -3.0 * t * t + 1.0));
        let logpi = |t: f64| -t.powi(4) / 4.0 + 0.5 * t * t;
        let pts = [-1.7, -0.9, -0.2, 0.0, 0.3, 0.55, 1.1, 2.0];
        for &a in &pts {
            for &b in &pts {
                if a == b {
                    continue;
                }
                let lhs = logpi(a).exp() * mh_transition_density(a, b, &mut f);
                let rhs = logpi(b).exp() * mh_transition_density(b, a, &mut f);
                assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1e-300), "{a} {b}: {lhs} {rhs}");
            }
        }
    }

    #[test]
    fn inefficiency_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let iid: Vec<f64> = (0..10_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let v = inefficiency_factor(&iid, 100).unwrap();
        assert!((0.8..=1.2).contains(&v), "{v}");
        let mut x = 0.0;
        let ar: Vec<f64> = (0..100_000)
            .map(|_| {
                x = 0.5 * x + rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect();
        let v = inefficiency_factor(&ar, 200).unwrap();
        assert!((v - 3.0).abs() < 0.6, "{v}");
        assert!(inefficiency_factor(&[1.0; 1000], 10).is_err());
        assert!(inefficiency_factor(&iid[..50], 10).is_err());
    }

    mod chain {
        use super::super::*;
        use crate::copula::{ModelKind, PriorSettings};
        use crate::design::{build_bspline_design, DesignMatrices};
        use nalgebra::DMatrix;

        fn synthetic(kind: ModelKind, n: usize, seed: u64) -> CopulaModel {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|&x| (6.0 * x).sin() + (0.2 + 0.4 * x) * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
            let mut z = vec![0.0; n];
            for (rank, &i) in order.iter().enumerate() {
                z[i] = crate::normal::quantile((rank as f64 + 1.0) / (n as f64 + 1.0));
            }
            let b = build_bspline_design(&x, 8).unwrap();
            let v = if kind.has_alpha() { build_bspline_design(&x, 6).unwrap() } else { DMatrix::zeros(n, 0) };
            CopulaModel::new(kind, DesignMatrices::new(b, v).unwrap(), z, 0.0, PriorSettings::default()).unwrap()
        }

        fn cfg(seed: u64) -> McmcConfig {
            McmcConfig { burn_in: 300, draws: 300, seed, ..Default::default() }
        }

        #[test]
        fn seeded_chains_are_identical() {
            let m = synthetic(ModelKind::Hpsc, 120, 1);
            let a = run_chain(&m, &cfg(9), None).unwrap();
            let b = run_chain(&m, &cfg(9), None).unwrap();
            assert_eq!(a.draws, b.draws);
            let c = run_chain(&m, &cfg(10), None).unwrap();
            assert_ne!(a.draws, c.draws);
        }

        #[test]
        fn hpsc_without_alpha_updates_matches_psc() {
            let psc = synthetic(ModelKind::Psc, 100, 2);
            let hpsc = synthetic(ModelKind::Hpsc, 100, 2);
            let c = McmcConfig { update_alpha: false, ..cfg(4) };
            let a = run_chain(&psc, &c, None).unwrap();
            let b = run_chain(&hpsc, &c, None).unwrap();
            for (da, db) in a.draws.iter().zip(&b.draws) {
                assert_eq!(da.rows_range(0..8), db.rows_range(0..8));
                assert_eq!(da.rows_range(8..11), db.rows_range(8 + 6..11 + 6));
            }
        }

        #[test]
        fn acceptance_rates_in_range() {
            let m = synthetic(ModelKind::Hpsc, 200, 3);
            let out = run_chain(&m, &McmcConfig { burn_in: 1000, draws: 1000, seed: 5, ..Default::default() }, None).unwrap();
            for s in &out.acceptance {
                assert!(s.rate() > 0.05 && s.rate() < 1.0, "{} rate {}", s.name, s.rate());
            }
            assert!((0.6..=0.9).contains(&out.hmc_accept_post_adapt), "{}", out.hmc_accept_post_adapt);
            assert!(out.draws.iter().all(|d| d.iter().all(|v| v.is_finite())));
        }

        #[test]
        fn horseshoe_chain_runs() {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let n = 150;
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let z: Vec<f64> = x.iter().map(|&x| (4.0 * x).cos() * 0.8 + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            let b = build_bspline_design(&x, 7).unwrap();
            let v = build_bspline_design(&x, 5).unwrap();
            let m = CopulaModel::new(ModelKind::Hrbfc, DesignMatrices::new(b, v).unwrap(), z, 0.0, PriorSettings::default()).unwrap();
            let out = run_chain(&m, &cfg(7), None).unwrap();
            assert_eq!(out.draws.len(), 300);
            assert!(out.draws.iter().all(|d| d.iter().all(|v| v.is_finite())));
            assert!(out.hmc_accept_post_adapt > 0.3);
            let text = out.to_text();
            let back = ChainOutput::draws_from_text(out.layout, &text).unwrap();
            assert_eq!(back, out.draws);
        }
    }

    proptest::proptest! {
        #[test]
        fn dual_averaging_step_is_frozen_after_adaptation(
            eps0 in 0.01f64..2.0,
            m_adapt in 1usize..60,
            probs in proptest::collection::vec(0.0f64..=1.0, 61..150),
        ) {
            let mut d = DualAveraging::new(eps0, m_adapt, false);
            let mut frozen = None;
            for (i, &a) in probs.iter().enumerate() {
                d.update(a);
                if i + 1 >= m_adapt {
                    let f = *frozen.get_or_insert(d.eps);
                    proptest::prop_assert_eq!(d.eps.to_bits(), f.to_bits());
                    proptest::prop_assert_eq!(d.eps.to_bits(), d.eps_bar.to_bits());
                    proptest::prop_assert!(!d.adapting());
                }
            }
        }
    }
}
