//! Gaussian-kernel regression: Nadaraya–Watson for conditional means and
//! 1-D local-linear fits for a link function and its derivative.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominators below this are treated as numerically zero.
pub const MIN_KERNEL_MASS: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    NadarayaWatson,
    LocalLinear,
}

/// Training sample plus bandwidth. Rows are kept row-major for fast scans.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFit {
    rows: Vec<f64>,
    p: usize,
    y: Vec<f64>,
    bandwidth: f64,
    kind: KernelKind,
}

impl KernelFit {
    pub fn new(train_x: &DMatrix<f64>, train_y: &[f64], bandwidth: f64, kind: KernelKind) -> Result<Self> {
        let mut rows = Vec::with_capacity(train_x.len());
        for i in 0..train_x.nrows() {
            rows.extend(train_x.row(i).iter());
        }
        Self::from_flat(rows, train_x.ncols(), train_y.to_vec(), bandwidth, kind)
    }

    pub fn from_flat(rows: Vec<f64>, p: usize, y: Vec<f64>, bandwidth: f64, kind: KernelKind) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if p == 0 || y.is_empty() || rows.len() != p * y.len() {
            return Err(Error::Dimension(format!(
                "{} training outcomes do not match {} covariate values in dimension {p}",
                y.len(),
                rows.len()
            )));
        }
        if kind == KernelKind::LocalLinear && p != 1 {
            return Err(Error::Dimension("local-linear fits take 1-D inputs".into()));
        }
        Ok(Self { rows, p, y, bandwidth, kind })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.y
    }

    /// Nadaraya–Watson estimate at one point, with a flag set when the
    /// kernel mass underflowed and the nearest training outcome was used.
    pub fn nw_at(&self, q: &[f64]) -> (f64, bool) {
        match kernel_weights(&self.rows, self.p, self.bandwidth, q) {
            Some(w) => (weighted_mean(&w, &self.y), false),
            None => (self.y[nearest_row(&self.rows, self.p, q)], true),
        }
    }

    /// Local-linear intercept and slope at a 1-D query point.
    pub fn local_linear_at(&self, q: f64) -> (f64, f64) {
        local_linear_point(&self.rows, &self.y, self.bandwidth, q)
    }
}

/// Normalized Gaussian product-kernel weights of every training row at `q`,
/// or `None` when `Σ H_h(x_i - q)` falls below [`MIN_KERNEL_MASS`].
pub(crate) fn kernel_weights(rows: &[f64], p: usize, h: f64, q: &[f64]) -> Option<Vec<f64>> {
    let (mut w, log_mass) = log_kernel_weights(rows, p, h, q);
    if log_mass < MIN_KERNEL_MASS.ln() {
        return None;
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    Some(w)
}

/// Unnormalized weights scaled so the largest is one, together with the
/// log of the true kernel mass `Σ h^{-p} φ((x_i - q)/h)`.
fn log_kernel_weights(rows: &[f64], p: usize, h: f64, q: &[f64]) -> (Vec<f64>, f64) {
    let inv = 1.0 / (2.0 * h * h);
    let exps: Vec<f64> = rows
        .chunks_exact(p)
        .map(|r| -r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * inv)
        .collect();
    let top = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = exps.iter().map(|e| (e - top).exp()).collect();
    let log_norm = -(p as f64) * h.ln() - 0.5 * (p as f64) * (2.0 * std::f64::consts::PI).ln();
    let log_mass = log_norm + top + w.iter().sum::<f64>().ln();
    (w, log_mass)
}

fn weighted_mean(w: &[f64], y: &[f64]) -> f64 {
    w.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub(crate) fn nearest_row(rows: &[f64], p: usize, q: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, r) in rows.chunks_exact(p).enumerate() {
        let d: f64 = r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn local_linear_point(s: &[f64], y: &[f64], h: f64, q: f64) -> (f64, f64) {
    let (w, _) = log_kernel_weights(s, 1, h, &[q]);
    // centred two-pass sums: the determinant form cancels catastrophically
    // when the query sits far from the data
    let s0: f64 = w.iter().sum();
    let m = w.iter().zip(s).map(|(wi, si)| wi * (si - q)).sum::<f64>() / s0;
    let ybar = w.iter().zip(y).map(|(wi, yi)| wi * yi).sum::<f64>() / s0;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for ((&wi, &si), &yi) in w.iter().zip(s).zip(y) {
        let d = si - q - m;
        sxx += wi * d * d;
        sxy += wi * d * (yi - ybar);
    }
    // tiny ridge on the slope keeps isolated queries finite
    let slope = sxy / (sxx + 1e-12 * h * h * s0);
    let intercept = ybar - slope * m;
    (intercept, slope)
}

/// Nadaraya–Watson predictions at every row of `query`.
pub fn nw_predict(fit: &KernelFit, query: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(nw_predict_with_diagnostics(fit, query)?.values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NwPrediction {
    pub values: Vec<f64>,
    /// Query rows served by the nearest-neighbour fallback.
    pub fallback: Vec<bool>,
}

pub fn nw_predict_with_diagnostics(fit: &KernelFit, query: &DMatrix<f64>) -> Result<NwPrediction> {
    if query.ncols() != fit.p {
        return Err(Error::Dimension(format!(
            "query has {} columns, training data has {}",
            query.ncols(),
            fit.p
        )));
    }
    let mut values = Vec::with_capacity(query.nrows());
    let mut fallback = Vec::with_capacity(query.nrows());
    let mut q = vec![0.0; fit.p];
    for i in 0..query.nrows() {
        for (j, v) in q.iter_mut().enumerate() {
            *v = query[(i, j)];
        }
        let (value, fell_back) = fit.nw_at(&q);
        values.push(value);
        fallback.push(fell_back);
    }
    Ok(NwPrediction { values, fallback })
}

/// Local-linear values and slopes at 1-D query points.
pub fn local_linear_predict(fit: &KernelFit, query: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if fit.p != 1 {
        return Err(Error::Dimension("local-linear fits take 1-D inputs".into()));
    }
    let first = fit.rows[0];
    if fit.rows.iter().all(|&s| s == first) {
        return Err(Error::Rank("local-linear fit needs at least two distinct inputs".into()));
    }
    Ok(query.iter().map(|&q| fit.local_linear_at(q)).unzip())
}

/// Rule-of-thumb anchored candidates `{1/4, 1/2, 1, 2, 4} · n^{-1/(p+4)} · s`,
/// `s` the pooled per-coordinate standard deviation.
pub fn default_bandwidths(rows: &[f64], p: usize) -> Vec<f64> {
    let n = rows.len() / p.max(1);
    let scale = pooled_sd(rows, p) * (n.max(1) as f64).powf(-1.0 / (p as f64 + 4.0));
    [0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|c| c * scale).collect()
}

pub(crate) fn pooled_sd(rows: &[f64], p: usize) -> f64 {
    let n = rows.len() / p.max(1);
    if n < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    for j in 0..p {
        let col = rows.iter().skip(j).step_by(p);
        let mean = col.clone().sum::<f64>() / n as f64;
        total += col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    }
    let sd = (total / p as f64).sqrt();
    if sd > 0.0 && sd.is_finite() {
        sd
    } else {
        1.0
    }
}

/// Seeded k-fold assignment used by the bandwidth search.
pub(crate) fn cv_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let folds = folds.clamp(1, n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// Picks the candidate minimizing `loss(train, test, h)` summed over folds.
/// Candidates are visited in ascending order and ties go to the larger one.
pub(crate) fn cv_select<F>(n: usize, candidates: &[f64], folds: usize, seed: u64, loss: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&[usize], &[usize], f64) -> f64,
{
    if candidates.len() < 2 {
        return Err(Error::InvalidConfig("bandwidth search needs at least two candidates".into()));
    }
    if candidates.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
        return Err(Error::InvalidConfig("bandwidth candidates must be positive".into()));
    }
    if candidates.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("bandwidth candidates must be sorted ascending".into()));
    }
    if n < 2 {
        return Err(Error::InvalidConfig("cross-validation needs at least two samples".into()));
    }
    let assignment = cv_assignment(n, folds, seed);
    let nfolds = assignment.iter().max().map_or(1, |m| m + 1);
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..nfolds)
        .map(|f| (0..n).partition(|&i| assignment[i] != f))
        .collect();

    let mut losses = Vec::with_capacity(candidates.len());
    let mut best = (candidates[0], f64::INFINITY);
    for &h in candidates {
        let total: f64 = splits.iter().map(|(train, test)| loss(train, test, h)).sum();
        let mean = total / n as f64;
        losses.push(mean);
        if mean <= best.1 {
            best = (h, mean);
        }
    }
    Ok((best.0, losses))
}

/// Bandwidth with the smallest held-out squared error of the
/// Nadaraya–Watson fit.
pub fn cv_bandwidth(x: &DMatrix<f64>, y: &[f64], candidates: &[f64], folds: usize, seed: u64) -> Result<f64> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension("x and y lengths differ".into()));
    }
    let p = x.ncols();
    let mut rows = Vec::with_capacity(x.len());
    for i in 0..x.nrows() {
        rows.extend(x.row(i).iter());
    }
    Ok(cv_bandwidth_flat(&rows, p, y, candidates, folds, seed)?.0)
}

pub(crate) fn cv_bandwidth_flat(
    rows: &[f64],
    p: usize,
    y: &[f64],
    candidates: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    cv_select(y.len(), candidates, folds, seed, |train, test, h| {
        let (tr_rows, tr_y) = gather(rows, p, y, train);
        test.iter()
            .map(|&i| {
                let q = &rows[i * p..(i + 1) * p];
                let pred = match kernel_weights(&tr_rows, p, h, q) {
                    Some(w) => weighted_mean(&w, &tr_y),
                    None => tr_y[nearest_row(&tr_rows, p, q)],
                };
                (y[i] - pred).powi(2)
            })
            .sum()
    })
}

pub(crate) fn gather(rows: &[f64], p: usize, y: &[f64], idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut r = Vec::with_capacity(idx.len() * p);
    let mut v = Vec::with_capacity(idx.len());
    for &i in idx {
        r.extend_from_slice(&rows[i * p..(i + 1) * p]);
        v.push(y[i]);
    }
    (r, v)
}
