//! Pairwise dependence of the regression copula between two new points:
//! Spearman's rho, Kendall's tau and quantile dependence, averaged over
//! posterior draws.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::copula::CopulaState;
use crate::error::{Error, Result};
use crate::normal;
use crate::prediction::PredictivePoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Spearman,
    Kendall,
    QuantileDep { q: f64, tail: Tail },
}

impl Metric {
    /// `spearman`, `kendall`, `lower:<q>` or `upper:<q>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "spearman" => return Ok(Metric::Spearman),
            "kendall" => return Ok(Metric::Kendall),
            _ => {}
        }
        let (tail, q) = s.split_once(':').ok_or_else(|| Error::Config(format!("unknown dependence metric {s:?}")))?;
        let tail = match tail {
            "lower" => Tail::Lower,
            "upper" => Tail::Upper,
            _ => return Err(Error::Config(format!("unknown dependence metric {s:?}"))),
        };
        let q: f64 = q.parse().map_err(|_| Error::Config(format!("bad quantile level in {s:?}")))?;
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Config(format!("quantile level {q} outside (0, 1)")));
        }
        Ok(Metric::QuantileDep { q, tail })
    }

    pub fn name(&self) -> String {
        match self {
            Metric::Spearman => "spearman".into(),
            Metric::Kendall => "kendall".into(),
            Metric::QuantileDep { q, tail: Tail::Lower } => format!("lower:{q}"),
            Metric::QuantileDep { q, tail: Tail::Upper } => format!("upper:{q}"),
        }
    }

    /// Metric value of a bivariate Gaussian copula with correlation `r`.
    pub fn from_r(&self, r: f64) -> f64 {
        match *self {
            Metric::Spearman => spearman_from_r(r),
            Metric::Kendall => kendall_from_r(r),
            Metric::QuantileDep { q, tail } => quantile_dep_from_r(r, q, tail),
        }
    }
}

pub fn spearman_from_r(r: f64) -> f64 {
    6.0 / PI * (r / 2.0).asin()
}

pub fn kendall_from_r(r: f64) -> f64 {
    2.0 / PI * r.asin()
}

/// `C(q, q; r) / q` for the lower tail, `(1 - 2q + C(q, q; r)) / (1 - q)`
/// for the upper tail.
pub fn quantile_dep_from_r(r: f64, q: f64, tail: Tail) -> f64 {
    let z = normal::quantile(q);
    let c = normal::bvn_cdf(z, z, r);
    let v = match tail {
        Tail::Lower => c / q,
        Tail::Upper => (1.0 - 2.0 * q + c) / (1.0 - q),
    };
    v.clamp(0.0, 1.0)
}

/// Copula correlation between two distinct new observations:
/// `s_a s_b b_a' P^-1 b_b`.
pub fn pairwise_r(state: &CopulaState, a: &PredictivePoint, b: &PredictivePoint) -> Result<f64> {
    let (_, _, sa) = state.conditional_at(&a.b, &a.v)?;
    let (_, _, sb) = state.conditional_at(&b.b, &b.v)?;
    Ok((sa * sb * state.hyper_beta.cross_form(&a.b, &b.b)).clamp(-1.0, 1.0))
}

/// Posterior mean of `metric` for the pair.
pub fn pair_metric(metric: Metric, a: &PredictivePoint, b: &PredictivePoint, draws: &[CopulaState]) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Input("no posterior draws".into()));
    }
    let mut acc = 0.0;
    for s in draws {
        acc += metric.from_r(pairwise_r(s, a, b)?);
    }
    Ok(acc / draws.len() as f64)
}

pub fn spearman_rho(a: &PredictivePoint, b: &PredictivePoint, draws: &[CopulaState]) -> Result<f64> {
    pair_metric(Metric::Spearman, a, b, draws)
}

pub fn kendall_tau(a: &PredictivePoint, b: &PredictivePoint, draws: &[CopulaState]) -> Result<f64> {
    pair_metric(Metric::Kendall, a, b, draws)
}

pub fn quantile_dependence(
    a: &PredictivePoint,
    b: &PredictivePoint,
    draws: &[CopulaState],
    q: f64,
    tail: Tail,
) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Input(format!("quantile level {q} outside (0, 1)")));
    }
    pair_metric(Metric::QuantileDep { q, tail }, a, b, draws)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DependenceSurface {
    pub grid_a: Vec<f64>,
    pub grid_b: Vec<f64>,
    pub values: DMatrix<f64>,
    pub metric: Metric,
}

impl DependenceSurface {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x_a,x_b,value\n");
        for (i, a) in self.grid_a.iter().enumerate() {
            for (j, b) in self.grid_b.iter().enumerate() {
                writeln!(s, "{a},{b},{}", self.values[(i, j)]).unwrap();
            }
        }
        s
    }
}

/// Metric over all pairs of a covariate grid. Diagonal cells are the
/// self-pair (`r = 1`); the rest are computed once per unordered pair.
pub fn dependence_surface<F>(metric: Metric, grid: &[f64], draws: &[CopulaState], mut point_at: F) -> Result<DependenceSurface>
where
    F: FnMut(f64) -> Result<PredictivePoint>,
{
    if draws.is_empty() {
        return Err(Error::Input("no posterior draws".into()));
    }
    let points: Vec<PredictivePoint> = grid.iter().map(|&x| point_at(x)).collect::<Result<_>>()?;
    let n = grid.len();
    let mut values = DMatrix::zeros(n, n);
    let self_value = metric.from_r(1.0);
    for i in 0..n {
        values[(i, i)] = self_value;
        for j in i + 1..n {
            let v = pair_metric(metric, &points[i], &points[j], draws)?;
            values[(i, j)] = v;
            values[(j, i)] = v;
        }
    }
    Ok(DependenceSurface { grid_a: grid.to_vec(), grid_b: grid.to_vec(), values, metric })
}

/// Sample Spearman rank correlation (no ties assumed).
pub fn sample_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let m = (n - 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
    let var: f64 = rx.iter().map(|a| (a - m).powi(2)).sum();
    cov / var
}

fn count_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            buf.push(v[i]);
            i += 1;
        } else {
            buf.push(v[j]);
            inv += (mid - i) as u64;
            j += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

/// Sample Kendall's tau-a in `O(n log n)` (no ties assumed).
pub fn sample_kendall(x: &[f64], y: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let n = ys.len() as f64;
    let pairs = n * (n - 1.0) / 2.0;
    let disc = count_inversions(&mut ys, &mut Vec::new()) as f64;
    (pairs - 2.0 * disc) / pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::{correlation_matrix, Hyper, Layout, ModelKind};
    use crate::design::build_bspline_design;
    use crate::priors::Ar2Hyper;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn state(psi1: f64, psi2: f64, p1: usize, p2: usize, seed: u64) -> CopulaState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Layout::new(ModelKind::Hpsc, p1, p2).initial_state();
        s.beta = DVector::from_fn(p1, |_, _| rng.sample::<f64, _>(StandardNormal));
        s.alpha = DVector::from_fn(p2, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        s.hyper_beta = Hyper::Ar2(Ar2Hyper::new(1.7, psi1, psi2).unwrap());
        s
    }

    #[test]
    fn closed_forms() {
        assert_eq!(spearman_from_r(1.0), 1.0);
        assert!((kendall_from_r(1.0) - 1.0).abs() < 1e-15);
        assert!((kendall_from_r(0.5) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(spearman_from_r(0.0), 0.0);
        assert_eq!(kendall_from_r(0.0), 0.0);
        for q in [0.01, 0.3, 0.7] {
            assert!((quantile_dep_from_r(0.0, q, Tail::Lower) - q).abs() < 1e-9);
            assert!((quantile_dep_from_r(1.0, q, Tail::Lower) - 1.0).abs() < 1e-9);
            assert!((quantile_dep_from_r(0.0, q, Tail::Upper) - (1.0 - q)).abs() < 1e-9);
        }
    }

    #[test]
    fn lower_tail_dependence_vanishes() {
        let v: Vec<f64> = [1e-2, 1e-3, 1e-4, 1e-6].iter().map(|&q| quantile_dep_from_r(0.7, q, Tail::Lower)).collect();
        for w in v.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(v[3] < 0.1);
    }

    #[test]
    fn pairwise_r_matches_dense_matrix() {
        let n = 10;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let b = build_bspline_design(&x, 8).unwrap();
        let v = build_bspline_design(&x, 5).unwrap();
        let s = state(0.4, -0.3, 8, 5, 1);
        let r = correlation_matrix(&s, &b, &v, 100).unwrap();
        let pt = |i: usize| PredictivePoint { b: b.row(i).iter().cloned().collect(), v: v.row(i).iter().cloned().collect() };
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let got = pairwise_r(&s, &pt(i), &pt(j)).unwrap();
                    assert!((got - r[(i, j)]).abs() < 1e-12);
                    assert_eq!(got, pairwise_r(&s, &pt(j), &pt(i)).unwrap());
                }
            }
        }
    }

    #[test]
    fn disjoint_supports_are_uncorrelated_under_diagonal_prior() {
        let s = state(0.0, 0.0, 8, 5, 2);
        let a = PredictivePoint { b: vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], v: vec![0.2; 5] };
        let b = PredictivePoint { b: vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.3, 0.7, 0.0], v: vec![0.1; 5] };
        assert_eq!(pairwise_r(&s, &a, &b).unwrap(), 0.0);
    }

    #[test]
    fn rank_correlations_match_arcsin_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        for r in [0.2, 0.5, 0.9] {
            let (x, y): (Vec<f64>, Vec<f64>) = (0..n)
                .map(|_| {
                    let a: f64 = rng.sample(StandardNormal);
                    let e: f64 = rng.sample(StandardNormal);
                    (a, r * a + (1.0 - r * r).sqrt() * e)
                })
                .unzip();
            assert!((sample_spearman(&x, &y) - spearman_from_r(r)).abs() < 0.01);
            assert!((sample_kendall(&x, &y) - kendall_from_r(r)).abs() < 0.01);
        }
    }

    #[test]
    fn sample_kendall_matches_quadratic_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..200).map(|_| rng.random()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 0.3 * rng.random::<f64>()).collect();
        let mut s = 0.0;
        for i in 0..200 {
            for j in i + 1..200 {
                s += ((x[i] - x[j]) * (y[i] - y[j])).signum();
            }
        }
        assert!((sample_kendall(&x, &y) - s / (200.0 * 199.0 / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn surface_is_symmetric_with_unit_diagonal() {
        let draws = vec![state(0.5, 0.2, 8, 5, 5), state(0.1, -0.4, 8, 5, 6)];
        let bb = crate::design::BsplineBasis::new(0.0, 1.0, 8).unwrap();
        let vb = crate::design::BsplineBasis::new(0.0, 1.0, 5).unwrap();
        let grid: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        for metric in [Metric::Spearman, Metric::Kendall, Metric::QuantileDep { q: 0.9, tail: Tail::Upper }] {
            let surf =
                dependence_surface(metric, &grid, &draws, |x| Ok(PredictivePoint { b: bb.row(x), v: vb.row(x) })).unwrap();
            for i in 0..12 {
                assert_eq!(surf.values[(i, i)], metric.from_r(1.0));
                for j in 0..12 {
                    assert_eq!(surf.values[(i, j)], surf.values[(j, i)]);
                }
            }
            if metric == Metric::Spearman {
                // dependence declines with distance from the first grid point
                let row: Vec<f64> = (1..12).map(|j| surf.values[(0, j)]).collect();
                assert!(row[0] > row[10]);
            }
        }
    }

    #[test]
    fn metric_parse_round_trip() {
        for s in ["spearman", "kendall", "lower:0.05", "upper:0.99"] {
            assert_eq!(Metric::parse(s).unwrap().name(), s);
        }
        assert!(Metric::parse("upper:1.5").is_err());
        assert!(Metric::parse("pearson").is_err());
    }

    proptest! {
        #[test]
        fn metric_ranges(r in -1.0f64..=1.0, q in 0.001f64..0.999) {
            let s = spearman_from_r(r);
            let k = kendall_from_r(r);
            prop_assert!((-1.0..=1.0).contains(&s) && (-1.0..=1.0).contains(&k));
            for tail in [Tail::Lower, Tail::Upper] {
                let v = quantile_dep_from_r(r, q, tail);
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn r_is_a_correlation(seed in 0u64..200, xa in 0.0f64..1.0, xb in 0.0f64..1.0) {
            let s = state(0.6, -0.2, 8, 5, seed);
            let bb = crate::design::BsplineBasis::new(0.0, 1.0, 8).unwrap();
            let vb = crate::design::BsplineBasis::new(0.0, 1.0, 5).unwrap();
            let a = PredictivePoint { b: bb.row(xa), v: vb.row(xa) };
            let b = PredictivePoint { b: bb.row(xb), v: vb.row(xb) };
            let r = pairwise_r(&s, &a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert_eq!(r, pairwise_r(&s, &b, &a).unwrap());
        }
    }
}
