//! Shrinkage priors for basis coefficients.
//!
//! The AR(2) prior has precision `P(psi) / tau2` where `P = Delta' Delta` and
//! `Delta` is lower banded with bandwidth two. Hyperparameters are carried on
//! the unconstrained scale `(log tau2, psi_t1, psi_t2)`. The horseshoe prior is
//! carried as `(log lambda_1^2, .., log lambda_p^2, log tau)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::normal::LN_SQRT_2PI;

/// Clamp margin for the partial autocorrelations.
pub const PSI_EPS: f64 = 0.05;

/// Default scale of the exponential prior on `tau`.
pub const DEFAULT_B_TAU2: f64 = 10.0;

pub fn psi_transform(psi: f64) -> Result<f64> {
    let m = 1.0 - PSI_EPS;
    if !(psi.abs() < m) {
        return Err(Error::Input(format!("psi = {psi} outside (-{m}, {m})")));
    }
    Ok(((psi + m) / (m - psi)).ln())
}

pub fn psi_untransform(t: f64) -> f64 {
    (1.0 - PSI_EPS) * (0.5 * t).tanh()
}

/// d psi / d t.
pub fn psi_jacobian(t: f64) -> f64 {
    // 2(1-eps) e^t / (1+e^t)^2, written in a form that does not overflow
    let s = 1.0 / (0.5 * t).cosh();
    0.5 * (1.0 - PSI_EPS) * s * s
}

/// d^2 psi / d t^2.
pub fn psi_jacobian_deriv(t: f64) -> f64 {
    -psi_jacobian(t) * (0.5 * t).tanh()
}

/// Log density of the uniform prior on psi expressed on the t scale.
fn psi_logprior(t: f64) -> (f64, f64, f64) {
    let th = (0.5 * t).tanh();
    let s = 1.0 / (0.5 * t).cosh();
    let v = -(2.0 * (1.0 - PSI_EPS)).ln() + psi_jacobian(t).ln();
    (v, -th, -0.5 * s * s)
}

/// Log prior of `log tau2` under `tau ~ Exp(rate = 1/sqrt(b))`.
fn tau2_logprior(lt: f64, b: f64) -> (f64, f64, f64) {
    let r = (lt.exp() / b).sqrt();
    (0.5 * lt - r - (2.0 * b.sqrt()).ln(), 0.5 - 0.5 * r, -0.25 * r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar2Hyper {
    pub tau2: f64,
    pub psi1: f64,
    pub psi2: f64,
}

impl Ar2Hyper {
    pub fn new(tau2: f64, psi1: f64, psi2: f64) -> Result<Self> {
        if !(tau2 > 0.0 && tau2.is_finite()) {
            return Err(Error::Input(format!("tau2 must be positive, got {tau2}")));
        }
        let m = 1.0 - PSI_EPS;
        if psi1.abs() > m || psi2.abs() > m {
            return Err(Error::Input(format!("psi ({psi1}, {psi2}) outside [-{m}, {m}]")));
        }
        Ok(Self { tau2, psi1, psi2 })
    }

    pub fn to_unconstrained(&self) -> [f64; 3] {
        let m = 1.0 - PSI_EPS - 1e-12;
        [
            self.tau2.ln(),
            psi_transform(self.psi1.clamp(-m, m)).unwrap(),
            psi_transform(self.psi2.clamp(-m, m)).unwrap(),
        ]
    }

    pub fn from_unconstrained(t: &[f64]) -> Self {
        Self { tau2: t[0].exp(), psi1: psi_untransform(t[1]), psi2: psi_untransform(t[2]) }
    }

    pub fn factor(&self, p: usize) -> LowerBand {
        ar2_factor(self.psi1, self.psi2, p)
    }
}

/// Which scalar of an AR(2) hyper block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ar2Coord {
    Tau2,
    Psi1,
    Psi2,
}

impl Ar2Coord {
    pub const ALL: [Ar2Coord; 3] = [Ar2Coord::Tau2, Ar2Coord::Psi1, Ar2Coord::Psi2];

    pub fn index(self) -> usize {
        match self {
            Ar2Coord::Tau2 => 0,
            Ar2Coord::Psi1 => 1,
            Ar2Coord::Psi2 => 2,
        }
    }
}

/// Lower triangular matrix with bandwidth two, stored by diagonals.
/// `d1[0]`, `d2[0]` and `d2[1]` are unused and kept at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerBand {
    pub d0: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl LowerBand {
    fn zeros(p: usize) -> Self {
        Self { d0: vec![0.0; p], d1: vec![0.0; p], d2: vec![0.0; p] }
    }

    pub fn dim(&self) -> usize {
        self.d0.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let p = self.dim();
        let mut m = DMatrix::zeros(p, p);
        for i in 0..p {
            m[(i, i)] = self.d0[i];
            if i >= 1 {
                m[(i, i - 1)] = self.d1[i];
            }
            if i >= 2 {
                m[(i, i - 2)] = self.d2[i];
            }
        }
        m
    }

    /// `L x`
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let p = self.dim();
        let mut y = vec![0.0; p];
        for i in 0..p {
            let mut s = self.d0[i] * x[i];
            if i >= 1 {
                s += self.d1[i] * x[i - 1];
            }
            if i >= 2 {
                s += self.d2[i] * x[i - 2];
            }
            y[i] = s;
        }
        y
    }

    /// `L' x`
    pub fn mul_t(&self, x: &[f64]) -> Vec<f64> {
        let p = self.dim();
        let mut y = vec![0.0; p];
        for i in 0..p {
            let mut s = self.d0[i] * x[i];
            if i + 1 < p {
                s += self.d1[i + 1] * x[i + 1];
            }
            if i + 2 < p {
                s += self.d2[i + 2] * x[i + 2];
            }
            y[i] = s;
        }
        y
    }

    /// Solve `L x = b` by forward substitution.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let p = self.dim();
        let mut x = vec![0.0; p];
        for i in 0..p {
            let mut s = b[i];
            if i >= 1 {
                s -= self.d1[i] * x[i - 1];
            }
            if i >= 2 {
                s -= self.d2[i] * x[i - 2];
            }
            x[i] = s / self.d0[i];
        }
        x
    }

    /// Solve `L' x = b` by back substitution.
    pub fn solve_t(&self, b: &[f64]) -> Vec<f64> {
        let p = self.dim();
        let mut x = vec![0.0; p];
        for i in (0..p).rev() {
            let mut s = b[i];
            if i + 1 < p {
                s -= self.d1[i + 1] * x[i + 1];
            }
            if i + 2 < p {
                s -= self.d2[i + 2] * x[i + 2];
            }
            x[i] = s / self.d0[i];
        }
        x
    }
}

/// The banded factor `Delta` of the unit-innovation AR(2) precision.
pub fn ar2_factor(psi1: f64, psi2: f64, p: usize) -> LowerBand {
    let a = (1.0 - psi1 * psi1).sqrt();
    let b = (1.0 - psi2 * psi2).sqrt();
    let mut l = LowerBand::zeros(p);
    l.d0[0] = a * b;
    if p > 1 {
        l.d0[1] = b;
        l.d1[1] = -psi1 * b;
    }
    for i in 2..p {
        l.d0[i] = 1.0;
        l.d1[i] = -psi1 * (1.0 - psi2);
        l.d2[i] = -psi2;
    }
    l
}

/// First (`order = 1`) or second (`order = 2`) derivative of `Delta` with
/// respect to one partial autocorrelation.
pub fn ar2_factor_deriv(psi1: f64, psi2: f64, p: usize, which: Ar2Coord, order: u8) -> LowerBand {
    let a = (1.0 - psi1 * psi1).sqrt();
    let b = (1.0 - psi2 * psi2).sqrt();
    let mut l = LowerBand::zeros(p);
    match (which, order) {
        (Ar2Coord::Psi1, 1) => {
            l.d0[0] = -psi1 / a * b;
            if p > 1 {
                l.d1[1] = -b;
            }
            for i in 2..p {
                l.d1[i] = -(1.0 - psi2);
            }
        }
        (Ar2Coord::Psi1, 2) => {
            l.d0[0] = -b / (a * a * a);
        }
        (Ar2Coord::Psi2, 1) => {
            let db = -psi2 / b;
            l.d0[0] = a * db;
            if p > 1 {
                l.d0[1] = db;
                l.d1[1] = -psi1 * db;
            }
            for i in 2..p {
                l.d1[i] = psi1;
                l.d2[i] = -1.0;
            }
        }
        (Ar2Coord::Psi2, 2) => {
            let ddb = -1.0 / (b * b * b);
            l.d0[0] = a * ddb;
            if p > 1 {
                l.d0[1] = ddb;
                l.d1[1] = -psi1 * ddb;
            }
        }
        _ => {}
    }
    l
}

/// `log det(P(psi))^{1/2}` and its first two derivatives in one psi.
pub fn ar2_logdet_half(psi1: f64, psi2: f64) -> f64 {
    0.5 * (1.0 - psi1 * psi1).ln() + (1.0 - psi2 * psi2).ln()
}

pub fn ar2_logdet_half_derivs(psi1: f64, psi2: f64, which: Ar2Coord) -> (f64, f64) {
    match which {
        Ar2Coord::Psi1 => {
            let o = 1.0 - psi1 * psi1;
            (-psi1 / o, -(1.0 + psi1 * psi1) / (o * o))
        }
        Ar2Coord::Psi2 => {
            let o = 1.0 - psi2 * psi2;
            (-2.0 * psi2 / o, -2.0 * (1.0 + psi2 * psi2) / (o * o))
        }
        Ar2Coord::Tau2 => (0.0, 0.0),
    }
}

#[derive(Debug, Clone)]
pub struct PrecisionFactor {
    pub delta: LowerBand,
    pub logdet_half: f64,
}

/// Dense `P(psi) / tau2` together with its banded factor.
pub fn ar2_precision(h: &Ar2Hyper, p: usize) -> Result<(DMatrix<f64>, PrecisionFactor)> {
    if p < 3 {
        return Err(Error::Config(format!("AR(2) precision needs p >= 3, got {p}")));
    }
    if h.psi1.abs() >= 1.0 - PSI_EPS - 1e-9 || h.psi2.abs() >= 1.0 - PSI_EPS - 1e-9 {
        log::warn!("AR(2) partial autocorrelation at the clamp boundary: {h:?}");
    }
    let delta = h.factor(p);
    let d = delta.to_dense();
    let prec = d.transpose() * &d / h.tau2;
    Ok((prec, PrecisionFactor { delta, logdet_half: ar2_logdet_half(h.psi1, h.psi2) }))
}

/// Derivative of the unscaled `P(psi)` in one partial autocorrelation, and the
/// derivative of `log det(P)^{1/2}`.
pub fn ar2_precision_derivatives(h: &Ar2Hyper, p: usize, which: Ar2Coord) -> Result<(DMatrix<f64>, f64)> {
    if p < 3 {
        return Err(Error::Config(format!("AR(2) precision needs p >= 3, got {p}")));
    }
    if which == Ar2Coord::Tau2 {
        return Err(Error::Input("tau2 is not a partial autocorrelation".into()));
    }
    let d = h.factor(p).to_dense();
    let dd = ar2_factor_deriv(h.psi1, h.psi2, p, which, 1).to_dense();
    let dp = dd.transpose() * &d + d.transpose() * &dd;
    Ok((dp, ar2_logdet_half_derivs(h.psi1, h.psi2, which).0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log prior of coefficients `c ~ N(0, tau2 P(psi)^{-1})` plus the hyperpriors,
/// with gradients in `c` and in the unconstrained hyper coordinates.
#[derive(Debug, Clone)]
pub struct CoefPrior {
    pub logp: f64,
    pub grad_coef: DVector<f64>,
    pub grad_hyper: Vec<f64>,
}

pub fn ar2_coef_logprior(c: &[f64], h: &Ar2Hyper, b_tau2: f64) -> CoefPrior {
    let p = c.len();
    let t = h.to_unconstrained();
    let delta = h.factor(p);
    let dc = delta.mul(c);
    let quad = dot(&dc, &dc);
    let inv_tau2 = 1.0 / h.tau2;
    let ld = ar2_logdet_half(h.psi1, h.psi2);
    let (tp, tp1, _) = tau2_logprior(t[0], b_tau2);
    let (pp1, pg1, _) = psi_logprior(t[1]);
    let (pp2, pg2, _) = psi_logprior(t[2]);
    let logp = -(p as f64) * LN_SQRT_2PI - 0.5 * p as f64 * t[0] + ld - 0.5 * inv_tau2 * quad + tp + pp1 + pp2;
    let pc = delta.mul_t(&dc);
    let grad_coef = DVector::from_iterator(p, pc.iter().map(|v| -inv_tau2 * v));
    let mut grad_hyper = vec![0.0; 3];
    grad_hyper[0] = -0.5 * p as f64 + 0.5 * inv_tau2 * quad + tp1;
    for (k, which) in [(1usize, Ar2Coord::Psi1), (2, Ar2Coord::Psi2)] {
        let dd = ar2_factor_deriv(h.psi1, h.psi2, p, which, 1).mul(c);
        let dld = ar2_logdet_half_derivs(h.psi1, h.psi2, which).0;
        let fpsi = dld - inv_tau2 * dot(&dd, &dc);
        grad_hyper[k] = fpsi * psi_jacobian(t[k]) + if k == 1 { pg1 } else { pg2 };
    }
    CoefPrior { logp, grad_coef, grad_hyper }
}

/// Value and first two derivatives of the AR(2) coefficient log prior (with
/// hyperprior) along one unconstrained hyper coordinate.
pub fn ar2_coef_scalar(c: &[f64], h: &Ar2Hyper, which: Ar2Coord, b_tau2: f64) -> (f64, f64, f64) {
    let p = c.len();
    let t = h.to_unconstrained();
    let delta = h.factor(p);
    let dc = delta.mul(c);
    let quad = dot(&dc, &dc);
    let inv_tau2 = 1.0 / h.tau2;
    let ld = ar2_logdet_half(h.psi1, h.psi2);
    let base = -(p as f64) * LN_SQRT_2PI - 0.5 * p as f64 * t[0] + ld - 0.5 * inv_tau2 * quad;
    let (tp, tp1, tp2) = tau2_logprior(t[0], b_tau2);
    let (pp1, _, _) = psi_logprior(t[1]);
    let (pp2, _, _) = psi_logprior(t[2]);
    let value = base + tp + pp1 + pp2;
    match which {
        Ar2Coord::Tau2 => {
            let d1 = -0.5 * p as f64 + 0.5 * inv_tau2 * quad + tp1;
            let d2 = -0.5 * inv_tau2 * quad + tp2;
            (value, d1, d2)
        }
        _ => {
            let k = which.index();
            let d1m = ar2_factor_deriv(h.psi1, h.psi2, p, which, 1);
            let d2m = ar2_factor_deriv(h.psi1, h.psi2, p, which, 2);
            let ddc = d1m.mul(c);
            let dddc = d2m.mul(c);
            let (dld, dld2) = ar2_logdet_half_derivs(h.psi1, h.psi2, which);
            let f1 = dld - inv_tau2 * dot(&ddc, &dc);
            let f2 = dld2 - inv_tau2 * (dot(&dddc, &dc) + dot(&ddc, &ddc));
            let g1 = psi_jacobian(t[k]);
            let g2 = psi_jacobian_deriv(t[k]);
            let (_, pg, pgg) = psi_logprior(t[k]);
            (value, f1 * g1 + pg, f2 * g1 * g1 + f1 * g2 + pgg)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorseshoeHyper {
    /// Local variances `lambda_j^2`.
    pub lambda2: Vec<f64>,
    /// Global scale `tau`.
    pub tau: f64,
}

impl HorseshoeHyper {
    pub fn new(lambda2: Vec<f64>, tau: f64) -> Result<Self> {
        if lambda2.iter().any(|l| !(*l > 0.0 && l.is_finite())) || !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Input("horseshoe scales must be positive and finite".into()));
        }
        Ok(Self { lambda2, tau })
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.lambda2.iter().map(|l| l.ln()).collect();
        v.push(self.tau.ln());
        v
    }

    pub fn from_unconstrained(t: &[f64]) -> Self {
        let p = t.len() - 1;
        Self { lambda2: t[..p].iter().map(|v| v.exp()).collect(), tau: t[p].exp() }
    }
}

/// Horseshoe log prior: `c_j ~ N(0, lambda_j^2)`, `lambda_j ~ C+(0, tau)`,
/// `tau ~ C+(0, 1)`, on the `(log lambda_j^2, log tau)` scale with Jacobians.
/// `grad_hyper` holds the `log lambda_j^2` entries followed by `log tau`.
pub fn horseshoe_logprior_and_grad(c: &[f64], h: &HorseshoeHyper) -> CoefPrior {
    let p = c.len();
    let tau2 = h.tau * h.tau;
    let lt = h.tau.ln();
    let ln_2_pi = (2.0 / std::f64::consts::PI).ln();
    let mut logp = 0.0;
    let mut grad_coef = DVector::zeros(p);
    let mut grad_hyper = vec![0.0; p + 1];
    let mut wsum = 0.0;
    for j in 0..p {
        let l2 = h.lambda2[j];
        let lj = l2.ln();
        let ratio = l2 / tau2;
        logp += -LN_SQRT_2PI - 0.5 * lj - 0.5 * c[j] * c[j] / l2;
        logp += ln_2_pi - lt - ratio.ln_1p() + 0.5 * lj - std::f64::consts::LN_2;
        let w = ratio / (1.0 + ratio);
        wsum += w;
        grad_coef[j] = -c[j] / l2;
        grad_hyper[j] = 0.5 * c[j] * c[j] / l2 - w;
    }
    logp += ln_2_pi - tau2.ln_1p() + lt;
    grad_hyper[p] = -(p as f64 - 1.0) + 2.0 * wsum - 2.0 * tau2 / (1.0 + tau2);
    CoefPrior { logp, grad_coef, grad_hyper }
}
