//! Parameter-vector algebra and the probability simplex.

use std::ops::{Deref, Index};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the coefficient sum for a point to count as on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Flat vector of model parameters; the unit exchanged between clients and
/// server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    /// `self - other`, coordinate-wise.
    pub fn sub(&self, other: &[f64]) -> ParamVector {
        ParamVector(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    /// `self + scale * other`, coordinate-wise.
    pub fn add_scaled(&self, scale: f64, other: &[f64]) -> ParamVector {
        ParamVector(
            self.0
                .iter()
                .zip(other)
                .map(|(a, b)| a + scale * b)
                .collect(),
        )
    }

    pub fn squared_distance(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// A point on the probability simplex over the clients sampled in a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CoefficientVector(Vec<f64>);

impl CoefficientVector {
    /// Validates non-negativity and unit sum (within [`SIMPLEX_TOL`]).
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("coefficient vector must be non-empty"));
        }
        if let Some(x) = entries.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::invalid(format!(
                "coefficient entries must be finite and non-negative, found {x}"
            )));
        }
        let s: f64 = entries.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!(
                "coefficients must sum to 1, sum is {s}"
            )));
        }
        Ok(CoefficientVector(entries))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("coefficient vector must be non-empty"));
        }
        Ok(CoefficientVector(vec![1.0 / n as f64; n]))
    }

    pub fn one_hot(n: usize, i: usize) -> Result<Self> {
        if i >= n {
            return Err(Error::invalid(format!("vertex {i} out of range for {n}")));
        }
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        Ok(CoefficientVector(v))
    }

    /// Normalizes non-negative weights to sum to one.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("weights sum to zero"));
        }
        CoefficientVector::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Index<usize> for CoefficientVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for CoefficientVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        CoefficientVector::new(v)
    }
}

impl From<CoefficientVector> for Vec<f64> {
    fn from(c: CoefficientVector) -> Self {
        c.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn on_simplex(v: &[f64]) -> bool {
    v.iter().all(|&x| x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

/// Euclidean projection onto the unit simplex `{x : x >= 0, sum x = 1}`.
///
/// Sort-based: find the largest `k` whose running-sum threshold keeps the
/// `k`-th largest entry positive, shift by that threshold and clamp at zero.
/// Points already on the simplex (to 1e-12) are returned unchanged, which
/// makes the map exactly idempotent.
pub fn project_simplex(v: &[f64]) -> Result<CoefficientVector> {
    if v.is_empty() {
        return Err(Error::invalid("cannot project an empty vector"));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("non-finite entry {x} in projection input")));
    }
    if on_simplex(v) {
        return Ok(CoefficientVector(v.to_vec()));
    }

    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut running = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        running += uj;
        let t = (running - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    let mut x: Vec<f64> = v.iter().map(|&vi| (vi - theta).max(0.0)).collect();

    // Rounding can leave the sum a few ulps away from one; fold the residue
    // into the largest entry so the output satisfies the invariant tightly.
    let s: f64 = x.iter().sum();
    if s != 1.0 {
        let (imax, _) = x
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &xi)| {
                if xi > acc.1 {
                    (i, xi)
                } else {
                    acc
                }
            });
        x[imax] = (x[imax] + (1.0 - s)).max(0.0);
    }
    CoefficientVector::new(x)
}

/// `sum_m p_m * models[m]`, clamped to the per-coordinate envelope of the
/// inputs so rounding never leaves the convex hull.
pub fn convex_combine<M: AsRef<[f64]>>(models: &[M], p: &CoefficientVector) -> Result<ParamVector> {
    if models.is_empty() {
        return Err(Error::invalid("no models to combine"));
    }
    if models.len() != p.len() {
        return Err(Error::invalid(format!(
            "{} models but {} coefficients",
            models.len(),
            p.len()
        )));
    }
    let d = models[0].as_ref().len();
    if models.iter().any(|m| m.as_ref().len() != d) {
        return Err(Error::invalid("models have different lengths"));
    }

    let mut out = vec![0.0; d];
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for (m, &pm) in models.iter().zip(p.as_slice()) {
        for (((o, l), h), &x) in out.iter_mut().zip(&mut lo).zip(&mut hi).zip(m.as_ref()) {
            *o += pm * x;
            *l = l.min(x);
            *h = h.max(x);
        }
    }
    for ((o, l), h) in out.iter_mut().zip(&lo).zip(&hi) {
        *o = o.clamp(*l, *h);
    }
    Ok(ParamVector(out))
}

/// Chain rule through `w(p) = sum_m p_m w_m`: entry `m` is `<wgrad, w_m>`.
pub fn coefficient_gradient<M: AsRef<[f64]>>(models: &[M], wgrad: &[f64]) -> Result<Vec<f64>> {
    models
        .iter()
        .map(|m| {
            let m = m.as_ref();
            if m.len() != wgrad.len() {
                Err(Error::invalid(format!(
                    "model length {} does not match gradient length {}",
                    m.len(),
                    wgrad.len()
                )))
            } else {
                Ok(dot(wgrad, m))
            }
        })
        .collect()
}
