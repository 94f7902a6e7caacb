//! Implicit regression copula: normalisation, correlation matrix, the
//! conditional likelihood of the copula data and the augmented log posterior.
//!
//! The pseudo-response is `Z~ = B beta + eps`, `eps ~ N(0, Sigma)` with
//! `Sigma = diag(exp(V alpha))`. Integrating out `beta ~ N(0, P_beta^-1)` and
//! rescaling by `s_i = (sigma_i^2 + b_i' P_beta^-1 b_i)^{-1/2}` gives unit
//! margins. Conditionally on `beta`, `z ~ N(S B beta, S Sigma S)`.
//!
//! All likelihood work runs over the distinct design rows, using per-row
//! sufficient statistics of `z`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::design::DesignMatrices;
use crate::error::{Error, Result};
use crate::normal::{self, LN_SQRT_2PI};
use crate::priors::{
    ar2_coef_logprior, ar2_coef_scalar, ar2_factor_deriv, horseshoe_logprior_and_grad, psi_jacobian,
    psi_jacobian_deriv, Ar2Coord, Ar2Hyper, CoefPrior, HorseshoeHyper, LowerBand, DEFAULT_B_TAU2,
};

/// Floor below which variances are treated as degenerate.
pub const VAR_FLOOR: f64 = 1e-300;

/// Default cap on dense correlation matrix size.
pub const DENSE_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// P-spline copula, homoscedastic pseudo-response (alpha = 0).
    Psc,
    /// Heteroscedastic P-spline copula.
    Hpsc,
    /// Heteroscedastic radial-basis copula with horseshoe priors.
    Hrbfc,
}

impl ModelKind {
    pub fn has_alpha(self) -> bool {
        !matches!(self, ModelKind::Psc)
    }

    pub fn horseshoe(self) -> bool {
        matches!(self, ModelKind::Hrbfc)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Psc => "PSC",
            ModelKind::Hpsc => "HPSC",
            ModelKind::Hrbfc => "HRBFC",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PSC" => Ok(ModelKind::Psc),
            "HPSC" => Ok(ModelKind::Hpsc),
            "HRBFC" => Ok(ModelKind::Hrbfc),
            other => Err(Error::Config(format!("unknown model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Hyper {
    Ar2(Ar2Hyper),
    Horseshoe(HorseshoeHyper),
}

impl Hyper {
    pub fn initial(horseshoe: bool, p: usize) -> Self {
        if horseshoe {
            Hyper::Horseshoe(HorseshoeHyper { lambda2: vec![1.0; p], tau: 1.0 })
        } else {
            Hyper::Ar2(Ar2Hyper { tau2: 1.0, psi1: 0.0, psi2: 0.0 })
        }
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        match self {
            Hyper::Ar2(h) => h.to_unconstrained().to_vec(),
            Hyper::Horseshoe(h) => h.to_unconstrained(),
        }
    }

    /// Prior precision of the coefficients (dense).
    pub fn precision(&self, p: usize) -> DMatrix<f64> {
        match self {
            Hyper::Ar2(h) => {
                let d = h.factor(p).to_dense();
                d.transpose() * d / h.tau2
            }
            Hyper::Horseshoe(h) => DMatrix::from_diagonal(&DVector::from_iterator(p, h.lambda2.iter().map(|l| 1.0 / l))),
        }
    }

    /// Prior covariance of the coefficients (dense).
    pub fn covariance(&self, p: usize) -> DMatrix<f64> {
        match self {
            Hyper::Ar2(h) => {
                let mut out = DMatrix::zeros(p, p);
                let delta = h.factor(p);
                for j in 0..p {
                    let mut e = vec![0.0; p];
                    e[j] = 1.0;
                    let col = delta.solve(&delta.solve_t(&e));
                    for i in 0..p {
                        out[(i, j)] = h.tau2 * col[i];
                    }
                }
                out
            }
            Hyper::Horseshoe(h) => DMatrix::from_diagonal(&DVector::from_vec(h.lambda2.clone())),
        }
    }

    /// `a' P^-1 b` under this prior.
    pub fn cross_form(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Hyper::Ar2(h) => {
                let delta = h.factor(a.len());
                let wa = delta.solve_t(a);
                let wb = delta.solve_t(b);
                h.tau2 * dot(&wa, &wb)
            }
            Hyper::Horseshoe(h) => a.iter().zip(b).zip(&h.lambda2).map(|((x, y), l)| x * y * l).sum(),
        }
    }

    fn coef_prior(&self, c: &[f64], b_tau2: f64) -> CoefPrior {
        match self {
            Hyper::Ar2(h) => ar2_coef_logprior(c, h, b_tau2),
            Hyper::Horseshoe(h) => horseshoe_logprior_and_grad(c, h),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopulaState {
    pub kind: ModelKind,
    pub beta: DVector<f64>,
    /// Empty for the PSC.
    pub alpha: DVector<f64>,
    pub hyper_beta: Hyper,
    pub hyper_alpha: Option<Hyper>,
}

impl CopulaState {
    /// Conditional law of the pseudo-response at basis rows `b`, `v`:
    /// returns `(mean, sd, s)` of `N(s b' beta, s^2 sigma^2)`.
    pub fn conditional_at(&self, b: &[f64], v: &[f64]) -> Result<(f64, f64, f64)> {
        let q = self.hyper_beta.cross_form(b, b);
        let sig2 = if self.kind.has_alpha() { dot(v, self.alpha.as_slice()).exp() } else { 1.0 };
        let a = sig2 + q;
        if !(sig2 >= VAR_FLOOR && a.is_finite()) {
            return Err(Error::Numerical("conditional variance outside the floors".into()));
        }
        let s = 1.0 / a.sqrt();
        Ok((s * dot(b, self.beta.as_slice()), s * sig2.sqrt(), s))
    }
}

/// Positions of the parameter blocks in the unconstrained vector
/// `(beta, alpha, theta_beta, theta_alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub kind: ModelKind,
    pub p1: usize,
    pub p2: usize,
}

impl Layout {
    pub fn new(kind: ModelKind, p1: usize, p2: usize) -> Self {
        Self { kind, p1, p2: if kind.has_alpha() { p2 } else { 0 } }
    }

    fn n_hyper(&self, p: usize) -> usize {
        if self.kind.horseshoe() {
            p + 1
        } else {
            3
        }
    }

    pub fn beta(&self) -> std::ops::Range<usize> {
        0..self.p1
    }

    pub fn alpha(&self) -> std::ops::Range<usize> {
        self.p1..self.p1 + self.p2
    }

    pub fn hyper_beta(&self) -> std::ops::Range<usize> {
        let s = self.p1 + self.p2;
        s..s + self.n_hyper(self.p1)
    }

    pub fn hyper_alpha(&self) -> std::ops::Range<usize> {
        let s = self.hyper_beta().end;
        if self.kind.has_alpha() {
            s..s + self.n_hyper(self.p2)
        } else {
            s..s
        }
    }

    pub fn dim(&self) -> usize {
        self.hyper_alpha().end
    }

    pub fn initial_state(&self) -> CopulaState {
        let hs = self.kind.horseshoe();
        CopulaState {
            kind: self.kind,
            beta: DVector::zeros(self.p1),
            alpha: DVector::zeros(self.p2),
            hyper_beta: Hyper::initial(hs, self.p1),
            hyper_alpha: self.kind.has_alpha().then(|| Hyper::initial(hs, self.p2)),
        }
    }

    pub fn to_vector(&self, s: &CopulaState) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v.rows_range_mut(self.beta()).copy_from(&s.beta);
        v.rows_range_mut(self.alpha()).copy_from(&s.alpha);
        for (i, x) in self.hyper_beta().zip(s.hyper_beta.to_unconstrained()) {
            v[i] = x;
        }
        if let Some(h) = &s.hyper_alpha {
            for (i, x) in self.hyper_alpha().zip(h.to_unconstrained()) {
                v[i] = x;
            }
        }
        v
    }

    pub fn from_vector(&self, v: &[f64]) -> CopulaState {
        let hs = self.kind.horseshoe();
        let mk = |r: std::ops::Range<usize>| {
            let t = &v[r];
            if hs {
                Hyper::Horseshoe(HorseshoeHyper::from_unconstrained(t))
            } else {
                Hyper::Ar2(Ar2Hyper::from_unconstrained(t))
            }
        };
        CopulaState {
            kind: self.kind,
            beta: DVector::from_column_slice(&v[self.beta()]),
            alpha: DVector::from_column_slice(&v[self.alpha()]),
            hyper_beta: mk(self.hyper_beta()),
            hyper_alpha: self.kind.has_alpha().then(|| mk(self.hyper_alpha())),
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.p1).map(|j| format!("beta{j}")).collect();
        names.extend((0..self.p2).map(|j| format!("alpha{j}")));
        let hyper = |tag: &str, p: usize| -> Vec<String> {
            if self.kind.horseshoe() {
                let mut v: Vec<String> = (0..p).map(|j| format!("log_lambda2_{tag}{j}")).collect();
                v.push(format!("log_tau_{tag}"));
                v
            } else {
                vec![format!("log_tau2_{tag}"), format!("psi1_t_{tag}"), format!("psi2_t_{tag}")]
            }
        };
        names.extend(hyper("beta", self.p1));
        if self.kind.has_alpha() {
            names.extend(hyper("alpha", self.p2));
        }
        names
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSettings {
    pub b_tau2_beta: f64,
    pub b_tau2_alpha: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self { b_tau2_beta: DEFAULT_B_TAU2, b_tau2_alpha: DEFAULT_B_TAU2 }
    }
}

/// Per-observation normalisation quantities.
#[derive(Debug, Clone)]
pub struct NormalizationCache {
    pub sigma2: Vec<f64>,
    pub s2: Vec<f64>,
    pub quad: Vec<f64>,
}

/// Log posterior value and gradient on the unconstrained scale. `floored` is
/// set when a variance left the representable range; `logh` is then -inf.
#[derive(Debug, Clone)]
pub struct Eval {
    pub logh: f64,
    pub grad: DVector<f64>,
    pub floored: bool,
}

/// Derivatives of one unique-row likelihood contribution.
#[derive(Debug, Clone, Copy)]
struct RowTerms {
    l: f64,
    l_m: f64,
    l_eta: f64,
    l_q: f64,
    l_qq: f64,
}

/// Likelihood of all observations sharing one design row, with
/// `a = sigma^2 + q`, `m = b' beta`, `eta = v' alpha`.
fn row_terms(cnt: f64, s1: f64, s2: f64, m: f64, q: f64, eta: f64) -> Option<RowTerms> {
    let sig2 = eta.exp();
    if !(sig2 >= VAR_FLOOR && sig2.is_finite()) {
        return None;
    }
    let a = sig2 + q;
    if !(a.is_finite() && 1.0 / a >= VAR_FLOOR) {
        return None;
    }
    let ra = a.sqrt();
    let quad = a * s2 - 2.0 * ra * m * s1 + cnt * m * m;
    let l = cnt * (-LN_SQRT_2PI + 0.5 * a.ln() - 0.5 * eta) - quad / (2.0 * sig2);
    let dq_da = s2 - m * s1 / ra;
    Some(RowTerms {
        l,
        l_m: (ra * s1 - cnt * m) / sig2,
        l_eta: cnt * (0.5 * sig2 / a - 0.5) - 0.5 * dq_da + quad / (2.0 * sig2),
        l_q: cnt / (2.0 * a) - dq_da / (2.0 * sig2),
        l_qq: -cnt / (2.0 * a * a) - (0.5 * m * s1 / (a * ra)) / (2.0 * sig2),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `w = Delta'^{-1} b` and `u = Delta^{-1} w = P^{-1} b`.
fn ar2_parts(delta: &LowerBand, b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = delta.solve_t(b);
    let u = delta.solve(&w);
    (w, u)
}

/// Copula data bound to a design and prior settings.
#[derive(Debug, Clone)]
pub struct CopulaModel {
    pub layout: Layout,
    pub design: DesignMatrices,
    pub z: Vec<f64>,
    pub settings: PriorSettings,
    pub margin_logjac: f64,
    count: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    ub: Vec<Vec<f64>>,
    uv: Vec<Vec<f64>>,
}

impl CopulaModel {
    pub fn new(
        kind: ModelKind,
        design: DesignMatrices,
        z: Vec<f64>,
        margin_logjac: f64,
        settings: PriorSettings,
    ) -> Result<Self> {
        let n = design.n();
        if z.len() != n {
            return Err(Error::Input(format!("z has {} entries, design has {n} rows", z.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite copula data".into()));
        }
        if !kind.horseshoe() && design.p1() < 3 {
            return Err(Error::Config("AR(2) prior needs p1 >= 3".into()));
        }
        if kind.has_alpha() && design.p2() == 0 {
            return Err(Error::Config(format!("{} needs a variance basis", kind.name())));
        }
        if kind.has_alpha() && !kind.horseshoe() && design.p2() < 3 {
            return Err(Error::Config("AR(2) prior needs p2 >= 3".into()));
        }
        let u = design.n_unique();
        let mut count = vec![0.0; u];
        let mut s1 = vec![0.0; u];
        let mut s2 = vec![0.0; u];
        for (i, &k) in design.unique_row_index.iter().enumerate() {
            count[k] += 1.0;
            s1[k] += z[i];
            s2[k] += z[i] * z[i];
        }
        let ub = (0..u).map(|k| design.unique_b.row(k).iter().cloned().collect()).collect();
        let uv = (0..u).map(|k| design.unique_v.row(k).iter().cloned().collect()).collect();
        let layout = Layout::new(kind, design.p1(), design.p2());
        Ok(Self { layout, design, z, settings, margin_logjac, count, s1, s2, ub, uv })
    }

    pub fn kind(&self) -> ModelKind {
        self.layout.kind
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    /// `q_k = b_k' P_beta^{-1} b_k` for every distinct row.
    pub fn quad_rows(&self, hb: &Hyper) -> Vec<f64> {
        match hb {
            Hyper::Ar2(h) => {
                let delta = h.factor(self.layout.p1);
                self.ub
                    .iter()
                    .map(|b| {
                        let w = delta.solve_t(b);
                        h.tau2 * dot(&w, &w)
                    })
                    .collect()
            }
            Hyper::Horseshoe(h) => {
                self.ub.iter().map(|b| b.iter().zip(&h.lambda2).map(|(x, l)| x * x * l).sum()).collect()
            }
        }
    }

    fn eta_rows(&self, alpha: &DVector<f64>) -> Vec<f64> {
        if !self.kind().has_alpha() {
            return vec![0.0; self.ub.len()];
        }
        self.uv.iter().map(|v| dot(v, alpha.as_slice())).collect()
    }

    fn mean_rows(&self, beta: &DVector<f64>) -> Vec<f64> {
        self.ub.iter().map(|b| dot(b, beta.as_slice())).collect()
    }

    pub fn normalization(&self, state: &CopulaState) -> Result<NormalizationCache> {
        let q = self.quad_rows(&state.hyper_beta);
        let eta = self.eta_rows(&state.alpha);
        let n = self.n();
        let mut cache = NormalizationCache { sigma2: vec![0.0; n], s2: vec![0.0; n], quad: vec![0.0; n] };
        for (i, &k) in self.design.unique_row_index.iter().enumerate() {
            let sig2 = eta[k].exp();
            let a = sig2 + q[k];
            if !(sig2 >= VAR_FLOOR && a.is_finite() && q[k].is_finite()) {
                return Err(Error::Numerical(format!("normalisation failed at observation {i}")));
            }
            cache.sigma2[i] = sig2;
            cache.s2[i] = 1.0 / a;
            cache.quad[i] = q[k];
        }
        Ok(cache)
    }

    /// `log phi(z; S B beta, S Sigma S) + margin_logjac`.
    pub fn conditional_loglik(&self, state: &CopulaState) -> f64 {
        let q = self.quad_rows(&state.hyper_beta);
        let eta = self.eta_rows(&state.alpha);
        let m = self.mean_rows(&state.beta);
        let mut total = 0.0;
        for k in 0..self.ub.len() {
            match row_terms(self.count[k], self.s1[k], self.s2[k], m[k], q[k], eta[k]) {
                Some(t) => total += t.l,
                None => return f64::NEG_INFINITY,
            }
        }
        total + self.margin_logjac
    }

    /// Log conditional target of alpha (likelihood plus alpha prior) and its gradient.
    pub fn log_target_alpha_and_grad(&self, state: &CopulaState, alpha: &DVector<f64>) -> (f64, DVector<f64>) {
        let p2 = self.layout.p2;
        let ha = state.hyper_alpha.as_ref().expect("alpha target needs a heteroscedastic model");
        let q = self.quad_rows(&state.hyper_beta);
        let eta = self.eta_rows(alpha);
        let m = self.mean_rows(&state.beta);
        let prior = ha.coef_prior(alpha.as_slice(), self.settings.b_tau2_alpha);
        let mut l = prior.logp;
        let mut g = prior.grad_coef;
        for k in 0..self.ub.len() {
            match row_terms(self.count[k], self.s1[k], self.s2[k], m[k], q[k], eta[k]) {
                Some(t) => {
                    l += t.l;
                    for j in 0..p2 {
                        g[j] += t.l_eta * self.uv[k][j];
                    }
                }
                None => return (f64::NEG_INFINITY, DVector::zeros(p2)),
            }
        }
        (l, g)
    }

    /// Full log posterior on the unconstrained scale with its gradient.
    pub fn log_posterior(&self, theta: &[f64]) -> Eval {
        let lay = self.layout;
        let state = lay.from_vector(theta);
        let mut grad = DVector::zeros(lay.dim());
        let fail = |grad: DVector<f64>| Eval { logh: f64::NEG_INFINITY, grad: grad * 0.0, floored: true };
        let eta = self.eta_rows(&state.alpha);
        let m = self.mean_rows(&state.beta);
        let u = self.ub.len();

        // quad and its hyper derivatives
        let mut q = vec![0.0; u];
        let hb_range = lay.hyper_beta();
        let mut dq: Vec<[f64; 2]> = Vec::new();
        match &state.hyper_beta {
            Hyper::Ar2(h) => {
                let delta = h.factor(lay.p1);
                let d1 = ar2_factor_deriv(h.psi1, h.psi2, lay.p1, Ar2Coord::Psi1, 1);
                let d2 = ar2_factor_deriv(h.psi1, h.psi2, lay.p1, Ar2Coord::Psi2, 1);
                dq.reserve(u);
                for k in 0..u {
                    let (w, uu) = ar2_parts(&delta, &self.ub[k]);
                    q[k] = h.tau2 * dot(&w, &w);
                    let a1 = -2.0 * h.tau2 * dot(&d1.mul(&uu), &w);
                    let a2 = -2.0 * h.tau2 * dot(&d2.mul(&uu), &w);
                    dq.push([a1, a2]);
                }
            }
            Hyper::Horseshoe(h) => {
                for k in 0..u {
                    q[k] = self.ub[k].iter().zip(&h.lambda2).map(|(x, l)| x * x * l).sum();
                }
            }
        }

        let mut logh = self.margin_logjac;
        let mut lq = vec![0.0; u];
        for k in 0..u {
            let t = match row_terms(self.count[k], self.s1[k], self.s2[k], m[k], q[k], eta[k]) {
                Some(t) => t,
                None => return fail(grad),
            };
            logh += t.l;
            lq[k] = t.l_q;
            for j in 0..lay.p1 {
                grad[j] += t.l_m * self.ub[k][j];
            }
            for j in 0..lay.p2 {
                grad[lay.p1 + j] += t.l_eta * self.uv[k][j];
            }
        }

        // likelihood dependence on theta_beta through q
        match &state.hyper_beta {
            Hyper::Ar2(_) => {
                let t = &theta[hb_range.clone()];
                let mut g = [0.0; 3];
                for k in 0..u {
                    g[0] += lq[k] * q[k];
                    g[1] += lq[k] * dq[k][0];
                    g[2] += lq[k] * dq[k][1];
                }
                grad[hb_range.start] += g[0];
                grad[hb_range.start + 1] += g[1] * psi_jacobian(t[1]);
                grad[hb_range.start + 2] += g[2] * psi_jacobian(t[2]);
            }
            Hyper::Horseshoe(h) => {
                for j in 0..lay.p1 {
                    let s: f64 = (0..u).map(|k| lq[k] * self.ub[k][j] * self.ub[k][j]).sum();
                    grad[hb_range.start + j] += s * h.lambda2[j];
                }
            }
        }

        let pb = state.hyper_beta.coef_prior(state.beta.as_slice(), self.settings.b_tau2_beta);
        logh += pb.logp;
        for j in 0..lay.p1 {
            grad[j] += pb.grad_coef[j];
        }
        for (i, g) in hb_range.zip(&pb.grad_hyper) {
            grad[i] += g;
        }
        if let Some(ha) = &state.hyper_alpha {
            let pa = ha.coef_prior(state.alpha.as_slice(), self.settings.b_tau2_alpha);
            logh += pa.logp;
            for j in 0..lay.p2 {
                grad[lay.p1 + j] += pa.grad_coef[j];
            }
            for (i, g) in lay.hyper_alpha().zip(&pa.grad_hyper) {
                grad[i] += g;
            }
        }
        if !logh.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return fail(grad);
        }
        Eval { logh, grad, floored: false }
    }

    /// Conditional log target of one AR(2) beta hyper coordinate (likelihood
    /// through `q`, beta prior and hyperprior) with first and second
    /// derivatives. Returns `None` if the state is outside the floors.
    pub fn beta_hyper_scalar(&self, state: &CopulaState, which: Ar2Coord) -> Option<(f64, f64, f64)> {
        let h = match &state.hyper_beta {
            Hyper::Ar2(h) => *h,
            Hyper::Horseshoe(_) => panic!("beta_hyper_scalar needs an AR(2) beta prior"),
        };
        let p1 = self.layout.p1;
        let eta = self.eta_rows(&state.alpha);
        let m = self.mean_rows(&state.beta);
        let t = h.to_unconstrained();
        let delta = h.factor(p1);
        let derivs = (which != Ar2Coord::Tau2).then(|| {
            (ar2_factor_deriv(h.psi1, h.psi2, p1, which, 1), ar2_factor_deriv(h.psi1, h.psi2, p1, which, 2))
        });
        let mut l = 0.0;
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for k in 0..self.ub.len() {
            let (w, u) = ar2_parts(&delta, &self.ub[k]);
            let q = h.tau2 * dot(&w, &w);
            let (qt, qtt) = match &derivs {
                None => (q, q),
                Some((dd, ddd)) => {
                    let du = dd.mul(&u);
                    let q1 = -2.0 * h.tau2 * dot(&du, &w);
                    // dP u = dDelta' w + Delta' dDelta u
                    let mut dpu = dd.mul_t(&w);
                    for (a, b) in dpu.iter_mut().zip(delta.mul_t(&du)) {
                        *a += b;
                    }
                    let r = delta.solve_t(&dpu);
                    let ud2pu = 2.0 * dot(&ddd.mul(&u), &w) + 2.0 * dot(&du, &du);
                    let q2 = h.tau2 * (2.0 * dot(&r, &r) - ud2pu);
                    let g1 = psi_jacobian(t[which.index()]);
                    let g2 = psi_jacobian_deriv(t[which.index()]);
                    (q1 * g1, q2 * g1 * g1 + q1 * g2)
                }
            };
            let rt = row_terms(self.count[k], self.s1[k], self.s2[k], m[k], q, eta[k])?;
            l += rt.l;
            d1 += rt.l_q * qt;
            d2 += rt.l_qq * qt * qt + rt.l_q * qtt;
        }
        let (pv, p1d, p2d) = ar2_coef_scalar(state.beta.as_slice(), &h, which, self.settings.b_tau2_beta);
        Some((l + pv, d1 + p1d, d2 + p2d))
    }

    /// Conditional log target of one AR(2) alpha hyper coordinate.
    pub fn alpha_hyper_scalar(&self, state: &CopulaState, which: Ar2Coord) -> (f64, f64, f64) {
        match &state.hyper_alpha {
            Some(Hyper::Ar2(h)) => ar2_coef_scalar(state.alpha.as_slice(), h, which, self.settings.b_tau2_alpha),
            _ => panic!("alpha_hyper_scalar needs an AR(2) alpha prior"),
        }
    }

    /// Full conditional of beta: precision `B' Sigma^-1 B + P_beta` and the
    /// linear term `B' Sigma^-1 S^-1 z`.
    pub fn beta_conditional(&self, state: &CopulaState) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let p1 = self.layout.p1;
        let q = self.quad_rows(&state.hyper_beta);
        let eta = self.eta_rows(&state.alpha);
        let mut prec = state.hyper_beta.precision(p1);
        let mut rhs = DVector::zeros(p1);
        for k in 0..self.ub.len() {
            let sig2 = eta[k].exp();
            let a = sig2 + q[k];
            if !(sig2 >= VAR_FLOOR && a.is_finite()) {
                return Err(Error::Numerical("beta conditional: variance outside floors".into()));
            }
            let wgt = self.count[k] / sig2;
            let lin = a.sqrt() * self.s1[k] / sig2;
            let b = &self.ub[k];
            for i in 0..p1 {
                rhs[i] += lin * b[i];
                let bi = wgt * b[i];
                for j in 0..=i {
                    prec[(i, j)] += bi * b[j];
                }
            }
        }
        for i in 0..p1 {
            for j in 0..i {
                prec[(j, i)] = prec[(i, j)];
            }
        }
        Ok((prec, rhs))
    }

    /// Conditional mean of beta (the stationary point of the beta gradient).
    pub fn beta_conditional_mean(&self, state: &CopulaState) -> Result<DVector<f64>> {
        let (prec, rhs) = self.beta_conditional(state)?;
        let ch = Cholesky::new(prec).ok_or_else(|| Error::Numerical("beta precision not positive definite".into()))?;
        Ok(ch.solve(&rhs))
    }

    /// Exact draw of beta from its Gaussian full conditional.
    pub fn gibbs_beta<R: Rng + ?Sized>(&self, state: &CopulaState, rng: &mut R) -> Result<DVector<f64>> {
        let (prec, rhs) = self.beta_conditional(state)?;
        let ch = Cholesky::new(prec).ok_or_else(|| Error::Numerical("beta precision not positive definite".into()))?;
        let mean = ch.solve(&rhs);
        let eps = DVector::from_iterator(self.layout.p1, (0..self.layout.p1).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let l = ch.l();
        let dev = l
            .transpose()
            .solve_upper_triangular(&eps)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        Ok(mean + dev)
    }

    /// Dense `R = S (Sigma + B P^-1 B') S` for the training observations.
    pub fn correlation_matrix(&self, state: &CopulaState) -> Result<DMatrix<f64>> {
        correlation_matrix(state, &self.design.b, &self.design.v, DENSE_CAP)
    }
}

/// Dense correlation matrix of the copula for design rows `b`, `v`.
pub fn correlation_matrix(state: &CopulaState, b: &DMatrix<f64>, v: &DMatrix<f64>, cap: usize) -> Result<DMatrix<f64>> {
    let n = b.nrows();
    if n > cap {
        return Err(Error::Size(format!("dense correlation matrix with n = {n} exceeds cap {cap}")));
    }
    let cov = state.hyper_beta.covariance(b.ncols());
    let mut r = b * cov * b.transpose();
    let mut s = vec![0.0; n];
    for i in 0..n {
        let sig2 = if state.kind.has_alpha() { v.row(i).dot(&state.alpha.transpose()).exp() } else { 1.0 };
        r[(i, i)] += sig2;
        s[i] = 1.0 / r[(i, i)].sqrt();
    }
    for i in 0..n {
        for j in 0..n {
            r[(i, j)] *= s[i] * s[j];
        }
        r[(i, i)] = 1.0;
    }
    Ok(r)
}

/// `log c(u; R) = log phi(z; 0, R) - sum log phi(z_i)`.
pub fn gaussian_copula_logdensity(u: &[f64], r: &DMatrix<f64>) -> Result<f64> {
    let n = u.len();
    if r.nrows() != n || r.ncols() != n {
        return Err(Error::Input("correlation matrix dimension mismatch".into()));
    }
    if u.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
        return Err(Error::Input("copula data must lie in (0, 1)".into()));
    }
    let z = DVector::from_iterator(n, u.iter().map(|v| normal::quantile(*v)));
    let ch = Cholesky::new(r.clone()).ok_or_else(|| Error::Numerical("correlation matrix not positive definite".into()))?;
    let logdet: f64 = ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let sol = ch.solve(&z);
    let quad = z.dot(&sol);
    let zz = z.dot(&z);
    Ok(-0.5 * logdet - 0.5 * quad + 0.5 * zz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::build_bspline_design;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model(kind: ModelKind, n: usize, p1: usize, p2: usize, seed: u64) -> CopulaModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let z: Vec<f64> = x.iter().map(|v| (6.0 * v).sin() + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let b = build_bspline_design(&x, p1).unwrap();
        let v = if kind.has_alpha() { build_bspline_design(&x, p2).unwrap() } else { DMatrix::zeros(n, 0) };
        let d = DesignMatrices::new(b, v).unwrap();
        CopulaModel::new(kind, d, z, 0.0, PriorSettings::default()).unwrap()
    }

    fn random_theta(m: &CopulaModel, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lay = m.layout;
        let mut v: Vec<f64> = (0..lay.dim()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        for i in lay.alpha() {
            v[i] *= 0.5;
        }
        v
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1.0)
    }

    #[test]
    fn normalization_examples() {
        let m = toy_model(ModelKind::Hpsc, 30, 8, 6, 1);
        let mut st = m.layout.initial_state();
        if let Hyper::Ar2(h) = &mut st.hyper_beta {
            h.tau2 = 1e-300;
        }
        let c = m.normalization(&st).unwrap();
        assert!(c.s2.iter().all(|s| (s - 1.0).abs() < 1e-12));
        let st = m.layout.from_vector(&random_theta(&m, 2));
        let c = m.normalization(&st).unwrap();
        for i in 0..m.n() {
            assert!((c.s2[i] - 1.0 / (c.sigma2[i] + c.quad[i])).abs() < 1e-15);
            assert!(c.s2[i] > 0.0 && c.s2[i] <= 1.0 / c.sigma2[i]);
        }
        // PSC: s^2 = 1 / (1 + quad); quad = 3 gives 1/4
        let p = toy_model(ModelKind::Psc, 10, 6, 0, 3);
        let mut sp = p.layout.initial_state();
        let q0 = p.quad_rows(&sp.hyper_beta)[0];
        sp.hyper_beta = Hyper::Ar2(Ar2Hyper { tau2: 3.0 / q0, psi1: 0.0, psi2: 0.0 });
        let k0 = p.design.unique_row_index.iter().position(|k| *k == 0).unwrap();
        assert!((p.normalization(&sp).unwrap().s2[k0] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn r_has_unit_diagonal_and_woodbury_identity() {
        let m = toy_model(ModelKind::Hpsc, 20, 8, 6, 2);
        let st = m.layout.from_vector(&random_theta(&m, 3));
        let r = m.correlation_matrix(&st).unwrap();
        for i in 0..20 {
            assert!((r[(i, i)] - 1.0).abs() < 1e-12);
        }
        let b = &m.design.b;
        let sig: Vec<f64> = (0..20).map(|i| m.design.v.row(i).dot(&st.alpha.transpose()).exp()).collect();
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(sig.clone()));
        let sinv = DMatrix::from_diagonal(&DVector::from_iterator(20, sig.iter().map(|s| 1.0 / s)));
        let pb = st.hyper_beta.precision(8);
        let omega = (b.transpose() * &sinv * b + &pb).try_inverse().unwrap();
        let lhs = (&sinv - &sinv * b * omega * b.transpose() * &sinv).try_inverse().unwrap();
        let rhs = sigma + b * pb.try_inverse().unwrap() * b.transpose();
        assert!((lhs - rhs).norm() < 1e-8);
    }

    #[test]
    fn copula_density_examples() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let v = gaussian_copula_logdensity(&[0.5, 0.5], &r).unwrap();
        assert!((v + 0.5 * 0.75f64.ln()).abs() < 1e-14);
        assert!(gaussian_copula_logdensity(&[0.3], &DMatrix::identity(1, 1)).unwrap().abs() < 1e-15);
        assert!(gaussian_copula_logdensity(&[0.1, 0.7, 0.99], &DMatrix::identity(3, 3)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn loglik_matches_dense_oracle() {
        let m = toy_model(ModelKind::Hpsc, 12, 6, 5, 4);
        let st = m.layout.from_vector(&random_theta(&m, 5));
        let c = m.normalization(&st).unwrap();
        let bb = &m.design.b * &st.beta;
        let mut want = 0.0;
        for i in 0..12 {
            let s = c.s2[i].sqrt();
            let mean = s * bb[i];
            let var = c.s2[i] * c.sigma2[i];
            want += -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (m.z[i] - mean).powi(2) / (2.0 * var);
        }
        assert!((m.conditional_loglik(&st) - want).abs() < 1e-10);
    }

    #[test]
    fn zero_state_gives_standard_normal() {
        let m = toy_model(ModelKind::Hpsc, 25, 8, 6, 6);
        let mut st = m.layout.initial_state();
        if let Hyper::Ar2(h) = &mut st.hyper_beta {
            h.tau2 = 1e-300;
        }
        let want: f64 = m.z.iter().map(|z| normal::logpdf(*z)).sum();
        assert!((m.conditional_loglik(&st) - want).abs() < 1e-10);
    }

    #[test]
    fn psc_nests_in_hpsc() {
        let h = toy_model(ModelKind::Hpsc, 40, 8, 6, 7);
        let p = CopulaModel::new(ModelKind::Psc, h.design.clone(), h.z.clone(), 0.0, PriorSettings::default()).unwrap();
        let mut sh = h.layout.initial_state();
        sh.beta = DVector::from_fn(8, |i, _| (i as f64).sin());
        sh.hyper_beta = Hyper::Ar2(Ar2Hyper { tau2: 0.7, psi1: 0.3, psi2: -0.1 });
        let mut sp = p.layout.initial_state();
        sp.beta = sh.beta.clone();
        sp.hyper_beta = sh.hyper_beta.clone();
        assert_eq!(h.conditional_loglik(&sh).to_bits(), p.conditional_loglik(&sp).to_bits());
        let ch = h.normalization(&sh).unwrap();
        let cp = p.normalization(&sp).unwrap();
        assert_eq!(ch.s2, cp.s2);
        for w in Ar2Coord::ALL {
            assert_eq!(h.beta_hyper_scalar(&sh, w), p.beta_hyper_scalar(&sp, w));
        }
        assert_eq!(h.beta_conditional(&sh).unwrap(), p.beta_conditional(&sp).unwrap());
    }

    fn check_full_gradient(m: &CopulaModel, theta: &[f64]) {
        let e = m.log_posterior(theta);
        assert!(!e.floored);
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut a = theta.to_vec();
            let mut b = theta.to_vec();
            a[i] += h;
            b[i] -= h;
            let fd = (m.log_posterior(&a).logh - m.log_posterior(&b).logh) / (2.0 * h);
            assert!(rel(e.grad[i], fd) < 1e-6, "coord {i}: {} vs {fd}", e.grad[i]);
        }
    }

    #[test]
    fn full_gradient_matches_fd_ar2() {
        let m = toy_model(ModelKind::Hpsc, 40, 8, 6, 8);
        check_full_gradient(&m, &random_theta(&m, 9));
        let p = toy_model(ModelKind::Psc, 40, 8, 0, 8);
        check_full_gradient(&p, &random_theta(&p, 10));
    }

    #[test]
    fn full_gradient_matches_fd_horseshoe() {
        let m = toy_model(ModelKind::Hrbfc, 40, 7, 5, 11);
        check_full_gradient(&m, &random_theta(&m, 12));
    }

    #[test]
    fn alpha_target_gradient_and_identities() {
        let m = toy_model(ModelKind::Hpsc, 50, 8, 6, 13);
        let st = m.layout.from_vector(&random_theta(&m, 14));
        let (_, g) = m.log_target_alpha_and_grad(&st, &st.alpha);
        for j in 0..6 {
            let mut a = st.alpha.clone();
            let mut b = st.alpha.clone();
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let fd = (m.log_target_alpha_and_grad(&st, &a).0 - m.log_target_alpha_and_grad(&st, &b).0) / 2e-6;
            assert!(rel(g[j], fd) < 1e-6);
        }
        // d s^2 / d eta = -exp(eta) (s^2)^2, equal to -1 at eta = 0, q = 0
        let s2 = |eta: f64, q: f64| 1.0 / (eta.exp() + q);
        let ds = (s2(1e-6, 0.0) - s2(-1e-6, 0.0)) / 2e-6;
        assert!((ds + 1.0).abs() < 1e-8);
        // kappa1 = (sigma^2 s^2)^{-1} = 1 + q e^{-eta}: d kappa1 / d eta = 1 - kappa1
        for &(eta, q) in &[(0.3, 1.2), (-1.0, 0.4), (2.0, 5.0)] {
            let k1 = |e: f64| 1.0 / (e.exp() * s2(e, q));
            let fd = (k1(eta + 1e-6) - k1(eta - 1e-6)) / 2e-6;
            assert!((fd - (1.0 - k1(eta))).abs() < 1e-6);
        }
    }

    #[test]
    fn beta_gradient_vanishes_at_conditional_mean() {
        let m = toy_model(ModelKind::Hpsc, 40, 8, 6, 15);
        let mut st = m.layout.from_vector(&random_theta(&m, 16));
        st.beta = m.beta_conditional_mean(&st).unwrap();
        let theta = m.layout.to_vector(&st);
        let e = m.log_posterior(theta.as_slice());
        for j in m.layout.beta() {
            assert!(e.grad[j].abs() < 1e-8, "{}", e.grad[j]);
        }
    }

    #[test]
    fn hyper_scalar_derivatives_match_fd() {
        let m = toy_model(ModelKind::Hpsc, 40, 8, 6, 17);
        let theta = random_theta(&m, 18);
        let st = m.layout.from_vector(&theta);
        let hb = m.layout.hyper_beta().start;
        for w in Ar2Coord::ALL {
            let (_, d1, d2) = m.beta_hyper_scalar(&st, w).unwrap();
            let at = |dt: f64| {
                let mut t = theta.clone();
                t[hb + w.index()] += dt;
                m.beta_hyper_scalar(&m.layout.from_vector(&t), w).unwrap()
            };
            let h = 1e-5;
            let fd1 = (at(h).0 - at(-h).0) / (2.0 * h);
            let fd2 = (at(h).1 - at(-h).1) / (2.0 * h);
            assert!(rel(d1, fd1) < 1e-6, "{w:?}: {d1} vs {fd1}");
            assert!(rel(d2, fd2) < 1e-6, "{w:?}: {d2} vs {fd2}");
            // the full gradient agrees in that coordinate
            assert!(rel(m.log_posterior(&theta).grad[hb + w.index()], d1) < 1e-8);
        }
    }

    #[test]
    fn theorem_two_limit() {
        let m = toy_model(ModelKind::Psc, 15, 8, 0, 19);
        let mut st = m.layout.initial_state();
        st.hyper_beta = Hyper::Ar2(Ar2Hyper { tau2: 1e-12, psi1: 0.5, psi2: 0.2 });
        let r = m.correlation_matrix(&st).unwrap();
        let mut mx: f64 = 0.0;
        for i in 0..15 {
            for j in 0..15 {
                if i != j {
                    mx = mx.max(r[(i, j)].abs());
                }
            }
        }
        assert!(mx < 1e-5);
    }

    #[test]
    fn gibbs_covariance_matches_conditional() {
        let m = toy_model(ModelKind::Hpsc, 30, 5, 4, 21);
        let st = m.layout.from_vector(&random_theta(&m, 22));
        let (prec, _) = m.beta_conditional(&st).unwrap();
        let cov = prec.try_inverse().unwrap();
        let mean = m.beta_conditional_mean(&st).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let nd = 100_000;
        let mut acc = DMatrix::zeros(5, 5);
        let mut mu = DVector::zeros(5);
        for _ in 0..nd {
            let d = m.gibbs_beta(&st, &mut rng).unwrap() - &mean;
            acc += &d * d.transpose();
            mu += d;
        }
        acc /= nd as f64;
        mu /= nd as f64;
        assert!((&acc - &cov).norm() / cov.norm() < 0.05);
        for j in 0..5 {
            assert!(mu[j].abs() < 4.0 * (cov[(j, j)] / nd as f64).sqrt());
        }
    }

    #[test]
    fn permutation_invariance() {
        let m = toy_model(ModelKind::Hpsc, 30, 8, 6, 24);
        let theta = random_theta(&m, 25);
        let perm: Vec<usize> = (0..30).map(|i| (i * 7) % 30).collect();
        let d = m.design.select(&perm).unwrap();
        let z: Vec<f64> = perm.iter().map(|&i| m.z[i]).collect();
        let mp = CopulaModel::new(ModelKind::Hpsc, d, z, 0.0, PriorSettings::default()).unwrap();
        assert!((m.log_posterior(&theta).logh - mp.log_posterior(&theta).logh).abs() < 1e-9);
    }

    #[test]
    fn extreme_alpha_is_floored() {
        let m = toy_model(ModelKind::Hpsc, 20, 8, 6, 26);
        let mut theta = random_theta(&m, 27);
        for i in m.layout.alpha() {
            theta[i] = -800.0;
        }
        let e = m.log_posterior(&theta);
        assert!(e.floored && e.logh == f64::NEG_INFINITY);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn r_unit_diagonal_for_any_state(seed in 0u64..10_000) {
            let m = toy_model(ModelKind::Hpsc, 15, 6, 5, seed % 7);
            let st = m.layout.from_vector(&random_theta(&m, seed));
            let r = m.correlation_matrix(&st).unwrap();
            for i in 0..15 {
                proptest::prop_assert!((r[(i, i)] - 1.0).abs() < 1e-12);
                for j in 0..15 {
                    proptest::prop_assert!(r[(i, j)].abs() <= 1.0 + 1e-12);
                }
            }
        }

        #[test]
        fn psc_nests_hpsc_at_zero_alpha(seed in 0u64..10_000, t in -3.0f64..3.0, p1 in -0.9f64..0.9, p2 in -0.9f64..0.9) {
            let h = toy_model(ModelKind::Hpsc, 20, 6, 5, seed % 5);
            let p = CopulaModel::new(ModelKind::Psc, h.design.clone(), h.z.clone(), 0.0, PriorSettings::default()).unwrap();
            let mut sh = h.layout.initial_state();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sh.beta = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
            sh.hyper_beta = Hyper::Ar2(Ar2Hyper { tau2: t.exp(), psi1: p1, psi2: p2 });
            let mut sp = p.layout.initial_state();
            sp.beta = sh.beta.clone();
            sp.hyper_beta = sh.hyper_beta.clone();
            proptest::prop_assert_eq!(h.conditional_loglik(&sh).to_bits(), p.conditional_loglik(&sp).to_bits());
        }
    }
}
