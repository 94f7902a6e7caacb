//! Basis design matrices: clamped cubic B-splines for a scalar covariate and
//! thin-plate radial bases (optionally periodic per dimension) for vectors.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnotKind {
    BsplineUniform,
    RbfSampled,
}

/// Knot locations. For B-splines `points` holds the distinct breakpoints of a
/// single covariate; for radial bases each entry is one knot in covariate space.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotGrid {
    pub kind: KnotKind,
    pub covariate_dim: usize,
    pub points: Vec<Vec<f64>>,
    pub periodic_dims: Vec<usize>,
}

impl KnotGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Cox-de Boor evaluation of all B-spline basis functions of `degree` on a
/// non-decreasing knot vector. Returns `knots.len() - degree - 1` values.
/// The last non-degenerate interval is closed on the right.
pub fn bspline_basis_values(knots: &[f64], degree: usize, x: f64) -> Vec<f64> {
    let m = knots.len();
    let nb = m - degree - 1;
    let last = knots[m - 1];
    let mut b = vec![0.0; m - 1];
    for i in 0..m - 1 {
        let (lo, hi) = (knots[i], knots[i + 1]);
        if lo < hi && ((x >= lo && x < hi) || (x == last && hi == last)) {
            b[i] = 1.0;
        }
    }
    for k in 1..=degree {
        for i in 0..m - 1 - k {
            let mut v = 0.0;
            let d1 = knots[i + k] - knots[i];
            if d1 > 0.0 {
                v += (x - knots[i]) / d1 * b[i];
            }
            let d2 = knots[i + k + 1] - knots[i + 1];
            if d2 > 0.0 {
                v += (knots[i + k + 1] - x) / d2 * b[i + 1];
            }
            b[i] = v;
        }
    }
    b.truncate(nb);
    b
}

/// Cubic B-spline basis with `p` functions on `[lo, hi]`: `p - 3` equal
/// intervals and each boundary knot repeated four times.
#[derive(Debug, Clone, PartialEq)]
pub struct BsplineBasis {
    pub lo: f64,
    pub hi: f64,
    pub p: usize,
    knots: Vec<f64>,
}

impl BsplineBasis {
    pub fn new(lo: f64, hi: f64, p: usize) -> Result<Self> {
        if p < 4 {
            return Err(Error::Config(format!("cubic B-spline basis needs p >= 4, got {p}")));
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Input("non-finite B-spline range".into()));
        }
        if !(hi > lo) {
            return Err(Error::Input(format!("degenerate B-spline range [{lo}, {hi}]")));
        }
        let intervals = p - 3;
        let mut knots = vec![lo; 3];
        for i in 0..=intervals {
            knots.push(if i == intervals { hi } else { lo + (hi - lo) * i as f64 / intervals as f64 });
        }
        knots.extend([hi; 3]);
        debug_assert_eq!(knots.len(), p + 4);
        Ok(Self { lo, hi, p, knots })
    }

    pub fn from_data(x: &[f64], p: usize) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Input("empty covariate".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite covariate value".into()));
        }
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self::new(lo, hi, p)
    }

    pub fn knot_grid(&self) -> KnotGrid {
        let intervals = self.p - 3;
        KnotGrid {
            kind: KnotKind::BsplineUniform,
            covariate_dim: 1,
            points: self.knots[3..=3 + intervals].iter().map(|k| vec![*k]).collect(),
            periodic_dims: vec![],
        }
    }

    /// Basis row at `x`; values outside the range are clamped to it.
    pub fn row(&self, x: f64) -> Vec<f64> {
        bspline_basis_values(&self.knots, 3, x.clamp(self.lo, self.hi))
    }
}

pub fn build_bspline_design(x: &[f64], p: usize) -> Result<DMatrix<f64>> {
    let basis = BsplineBasis::from_data(x, p)?;
    let mut out = DMatrix::zeros(x.len(), p);
    for (i, xi) in x.iter().enumerate() {
        for (j, v) in basis.row(*xi).into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Thin-plate radial basis `delta^2 log(delta)` around sampled knots.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfBasis {
    pub knots: KnotGrid,
}

impl RbfBasis {
    pub fn new(knots: KnotGrid) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::Config("radial basis needs at least one knot".into()));
        }
        if knots.periodic_dims.iter().any(|d| *d >= knots.covariate_dim) {
            return Err(Error::Config("periodic dimension index out of range".into()));
        }
        Ok(Self { knots })
    }

    pub fn distance(&self, x: &[f64], k: &[f64]) -> f64 {
        let mut s = 0.0;
        for (d, (xv, kv)) in x.iter().zip(k).enumerate() {
            let diff = if self.knots.periodic_dims.contains(&d) {
                (std::f64::consts::PI * (xv - kv)).sin()
            } else {
                xv - kv
            };
            s += diff * diff;
        }
        s.sqrt()
    }

    pub fn row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.knots.covariate_dim {
            return Err(Error::Input(format!(
                "covariate has {} dimensions, knots have {}",
                x.len(),
                self.knots.covariate_dim
            )));
        }
        if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input(format!("covariate {x:?} outside the unit cube")));
        }
        Ok(self
            .knots
            .points
            .iter()
            .map(|k| {
                let d = self.distance(x, k);
                if d == 0.0 {
                    0.0
                } else {
                    d * d * d.ln()
                }
            })
            .collect())
    }
}

pub fn build_rbf_design(x: &DMatrix<f64>, knots: &KnotGrid) -> Result<DMatrix<f64>> {
    let basis = RbfBasis::new(knots.clone())?;
    let mut out = DMatrix::zeros(x.nrows(), knots.len());
    for i in 0..x.nrows() {
        let xi: Vec<f64> = x.row(i).iter().cloned().collect();
        let r = basis.row(&xi).map_err(|e| match e {
            Error::Input(m) => Error::Input(format!("row {i}: {m}")),
            other => other,
        })?;
        for (j, v) in r.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

fn row_key(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

/// Sample `p` distinct covariate rows as knots, stratified on equal-width
/// strata of column `stratum_dim`. Each stratum receives `p / n_strata` knots
/// with the remainder going to the earliest strata; strata with too few rows
/// pass their deficit on to the next strata that have spare rows.
pub fn sample_knots_stratified(
    x: &DMatrix<f64>,
    p: usize,
    stratum_dim: usize,
    n_strata: usize,
    periodic_dims: &[usize],
    seed: u64,
) -> Result<KnotGrid> {
    let d = x.ncols();
    if stratum_dim >= d {
        return Err(Error::Config(format!("stratum dimension {stratum_dim} out of range (d = {d})")));
    }
    if p > x.nrows() {
        return Err(Error::Config(format!("{p} knots requested from {} rows", x.nrows())));
    }
    if p == 0 || n_strata == 0 {
        return Err(Error::Config("knot count and strata count must be positive".into()));
    }
    let mut seen = HashMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for i in 0..x.nrows() {
        let r: Vec<f64> = x.row(i).iter().cloned().collect();
        if seen.insert(row_key(&r), rows.len()).is_none() {
            rows.push(r);
        }
    }
    if p > rows.len() {
        return Err(Error::Config(format!("{p} knots requested but only {} distinct rows", rows.len())));
    }
    let lo = rows.iter().map(|r| r[stratum_dim]).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r[stratum_dim]).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_strata as f64;
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); n_strata];
    for (i, r) in rows.iter().enumerate() {
        let s = if width > 0.0 { (((r[stratum_dim] - lo) / width) as usize).min(n_strata - 1) } else { 0 };
        strata[s].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in strata.iter_mut() {
        s.shuffle(&mut rng);
    }
    let mut want: Vec<usize> = (0..n_strata).map(|s| p / n_strata + usize::from(s < p % n_strata)).collect();
    let mut take: Vec<usize> = vec![0; n_strata];
    let mut deficit = 0;
    for s in 0..n_strata {
        let t = want[s].min(strata[s].len());
        take[s] = t;
        deficit += want[s] - t;
        want[s] = t;
    }
    while deficit > 0 {
        let mut moved = false;
        for s in 0..n_strata {
            if deficit > 0 && take[s] < strata[s].len() {
                take[s] += 1;
                deficit -= 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(p);
    for s in 0..n_strata {
        chosen.extend_from_slice(&strata[s][..take[s]]);
    }
    chosen.sort_unstable();
    Ok(KnotGrid {
        kind: KnotKind::RbfSampled,
        covariate_dim: d,
        points: chosen.into_iter().map(|i| rows[i].clone()).collect(),
        periodic_dims: periodic_dims.to_vec(),
    })
}

/// Mean and log-variance design matrices with a cache of distinct rows.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub b: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Distinct `(b_i, v_i)` rows.
    pub unique_b: DMatrix<f64>,
    pub unique_v: DMatrix<f64>,
    /// Observation index to row of `unique_b` / `unique_v`.
    pub unique_row_index: Vec<usize>,
}

impl DesignMatrices {
    pub fn new(b: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        let n = b.nrows();
        if v.nrows() != n {
            return Err(Error::Input(format!("B has {n} rows but V has {}", v.nrows())));
        }
        if b.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite design entry".into()));
        }
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut index = Vec::with_capacity(n);
        let mut first = Vec::new();
        for i in 0..n {
            let mut key: Vec<u64> = b.row(i).iter().map(|x| x.to_bits()).collect();
            key.extend(v.row(i).iter().map(|x| x.to_bits()));
            let next = first.len();
            let k = *seen.entry(key).or_insert_with(|| {
                first.push(i);
                next
            });
            index.push(k);
        }
        let unique_b = b.select_rows(first.iter());
        let unique_v = v.select_rows(first.iter());
        Ok(Self { b, v, unique_b, unique_v, unique_row_index: index })
    }

    pub fn n(&self) -> usize {
        self.b.nrows()
    }

    pub fn p1(&self) -> usize {
        self.b.ncols()
    }

    pub fn p2(&self) -> usize {
        self.v.ncols()
    }

    pub fn n_unique(&self) -> usize {
        self.unique_b.nrows()
    }

    pub fn b_row(&self, i: usize) -> Vec<f64> {
        self.b.row(i).iter().cloned().collect()
    }

    pub fn v_row(&self, i: usize) -> Vec<f64> {
        self.v.row(i).iter().cloned().collect()
    }

    /// Select observations (e.g. a training fold), rebuilding the cache.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(self.b.select_rows(idx.iter()), self.v.select_rows(idx.iter()))
    }
}
