//! Late fusion of nuisance regressions on a shared evaluation grid.
//!
//! Every node sends `G̃ = −(Nadaraya–Watson fit on the grid)` for one
//! training half; with identity Hessians the fusion problem has a
//! closed-form task update and a Huber-type center problem. Nodes predict
//! from the fused values at the nearest valid grid point.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{FoldPlan, TaskDataset};
use crate::error::{Error, Result};
use crate::fusion::{argmin_prefer_last, check_grid, log_grid, MAX_SWEEPS};
use crate::kernel::{kernel_weights, pooled_sd, KernelFit, KernelKind};
use crate::moments::Regressor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidConfig("domain box needs matching, nonempty bounds".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::InvalidConfig("domain box is empty".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn cube(p: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; p], vec![hi; p])
    }

    /// Smallest box containing every row; degenerate axes are widened by 1.
    pub fn bounding(rows: &[f64], p: usize) -> Result<Self> {
        if p == 0 || rows.is_empty() {
            return Err(Error::InvalidConfig("cannot bound an empty sample".into()));
        }
        let mut lower = vec![f64::INFINITY; p];
        let mut upper = vec![f64::NEG_INFINITY; p];
        for row in rows.chunks_exact(p) {
            for c in 0..p {
                lower[c] = lower[c].min(row[c]);
                upper[c] = upper[c].max(row[c]);
            }
        }
        for c in 0..p {
            if lower[c] == upper[c] {
                lower[c] -= 0.5;
                upper[c] += 0.5;
            }
        }
        Self::new(lower, upper)
    }

    /// Smallest box containing all boxes.
    pub fn union(boxes: &[DomainBox]) -> Result<Self> {
        let first = boxes.first().ok_or_else(|| Error::InvalidConfig("no boxes to merge".into()))?;
        let mut out = first.clone();
        for b in &boxes[1..] {
            if b.dim() != out.dim() {
                return Err(Error::Dimension("domain boxes disagree in dimension".into()));
            }
            for c in 0..out.dim() {
                out.lower[c] = out.lower[c].min(b.lower[c]);
                out.upper[c] = out.upper[c].max(b.upper[c]);
            }
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lower).zip(&self.upper).all(|((v, l), u)| *v >= *l && *v <= *u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// Regular lattice with step ≈ ℏ², when that fits the budget.
    Lattice,
    /// Halton sequence of exactly `budget` points.
    LowDiscrepancy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationGrid {
    points: Vec<f64>,
    p: usize,
    kind: GridKind,
    /// The ℏ the grid was built for.
    resolution: f64,
    domain: DomainBox,
}

impl EvaluationGrid {
    pub fn len(&self) -> usize {
        self.points.len() / self.p
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.p..(i + 1) * self.p]
    }

    /// Row-major coordinates.
    pub fn points(&self) -> &[f64] {
        &self.points
    }
}

fn first_primes(k: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(k);
    let mut c = 2u64;
    while out.len() < k {
        if out.iter().take_while(|&&q| q * q <= c).all(|&q| c % q != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Lattice with per-axis step close to `ℏ²` when `p ≤ 3` and it fits in
/// `budget`; otherwise `budget` Halton points (indices `1..=budget`).
/// Requesting [`GridKind::LowDiscrepancy`] always gives the Halton design.
pub fn build_grid(domain: &DomainBox, hbar: f64, kind: GridKind, budget: usize) -> Result<EvaluationGrid> {
    if budget < 8 {
        return Err(Error::InvalidConfig(format!("grid budget {budget} is below 8")));
    }
    if !(hbar > 0.0) || !hbar.is_finite() {
        return Err(Error::InvalidConfig(format!("bandwidth {hbar} must be positive")));
    }
    let p = domain.dim();
    let step = hbar * hbar;
    if kind == GridKind::Lattice && p <= 3 {
        let counts: Vec<usize> = (0..p)
            .map(|c| ((domain.upper[c] - domain.lower[c]) / step - 1e-9).ceil().max(1.0) as usize + 1)
            .collect();
        let total = counts.iter().try_fold(1usize, |acc, &m| acc.checked_mul(m));
        if let Some(total) = total.filter(|&t| t <= budget) {
            let mut points = Vec::with_capacity(total * p);
            let mut idx = vec![0usize; p];
            for _ in 0..total {
                for c in 0..p {
                    let h = (domain.upper[c] - domain.lower[c]) / (counts[c] - 1) as f64;
                    points.push(if idx[c] + 1 == counts[c] { domain.upper[c] } else { domain.lower[c] + idx[c] as f64 * h });
                }
                for c in (0..p).rev() {
                    idx[c] += 1;
                    if idx[c] < counts[c] {
                        break;
                    }
                    idx[c] = 0;
                }
            }
            return Ok(EvaluationGrid { points, p, kind: GridKind::Lattice, resolution: hbar, domain: domain.clone() });
        }
    }
    let bases = first_primes(p);
    let mut points = Vec::with_capacity(budget * p);
    for i in 1..=budget as u64 {
        for c in 0..p {
            let u = radical_inverse(i, bases[c]);
            points.push(domain.lower[c] + u * (domain.upper[c] - domain.lower[c]));
        }
    }
    Ok(EvaluationGrid { points, p, kind: GridKind::LowDiscrepancy, resolution: hbar, domain: domain.clone() })
}

/// Local statistics of one training set: `g[t] = −ŷ(t)` and the validity
/// mask (false where the kernel mass underflows; `g` is 0 there).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridStats {
    pub g: Vec<f64>,
    pub mask: Vec<bool>,
}

impl GridStats {
    /// The local estimate `μ̃ = −G̃`.
    pub fn local_values(&self) -> Vec<f64> {
        self.g.iter().map(|v| -v).collect()
    }
}

pub fn local_grid_stats(rows: &[f64], p: usize, y: &[f64], grid: &EvaluationGrid, hbar: f64) -> Result<GridStats> {
    if y.is_empty() || rows.len() != y.len() * p {
        return Err(Error::Dimension("grid statistics need a nonempty sample with matching rows".into()));
    }
    if grid.dim() != p {
        return Err(Error::Dimension(format!("grid has dimension {}, data has {p}", grid.dim())));
    }
    let mut g = Vec::with_capacity(grid.len());
    let mut mask = Vec::with_capacity(grid.len());
    for t in 0..grid.len() {
        match kernel_weights(rows, p, hbar, grid.point(t)) {
            Some(w) => {
                g.push(-w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>());
                mask.push(true);
            }
            None => {
                g.push(0.0);
                mask.push(false);
            }
        }
    }
    Ok(GridStats { g, mask })
}

/// Result of one grid fusion solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFusion {
    /// Fused values per task on the full grid (masked points carry the
    /// task's own local value).
    pub values: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    /// Center on the jointly valid coordinates, in grid order.
    pub center: Vec<f64>,
    pub joint: Vec<bool>,
    pub fused: Vec<bool>,
    pub excluded: Vec<bool>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn huber(r: f64, lam: f64) -> f64 {
    if r <= lam {
        0.5 * r * r
    } else {
        lam * r - 0.5 * lam * lam
    }
}

/// Identity-Hessian fusion. On the jointly valid coordinates,
/// `u_k = u0 + (1 − λ̃/‖μ̃_k − u0‖)₊ (μ̃_k − u0)`; the center minimizes the
/// weighted Huber loss of the distances and is found by the monotone
/// reweighting `u0 ← Σ a_k μ̃_k / Σ a_k`, `a_k = w_k min(1, λ̃/‖μ̃_k − u0‖)`.
pub fn fuse_nuisance(stats: &[GridStats], weights: &[f64], lambda: f64) -> Result<GridFusion> {
    let first = stats.first().ok_or_else(|| Error::InvalidConfig("nuisance fusion needs at least one task".into()))?;
    let m = first.g.len();
    if weights.len() != stats.len() || weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::InvalidConfig("one positive weight per task".into()));
    }
    if stats.iter().any(|s| s.g.len() != m || s.mask.len() != m) {
        return Err(Error::Dimension("grid statistics disagree in length".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!("λ̃ = {lambda} must be nonnegative")));
    }
    let local: Vec<Vec<f64>> = stats.iter().map(GridStats::local_values).collect();
    let excluded: Vec<bool> = stats.iter().map(|s| !s.mask.iter().any(|&b| b)).collect();
    for (k, e) in excluded.iter().enumerate() {
        if *e {
            log::warn!("task {k} has no valid grid point and is left out of nuisance fusion");
        }
    }
    let members: Vec<usize> = (0..stats.len()).filter(|&k| !excluded[k]).collect();
    let joint: Vec<bool> = (0..m).map(|t| !members.is_empty() && members.iter().all(|&k| stats[k].mask[t])).collect();
    let coords: Vec<usize> = (0..m).filter(|&t| joint[t]).collect();

    let restrict = |v: &[f64]| -> Vec<f64> { coords.iter().map(|&t| v[t]).collect() };
    let mu: Vec<Vec<f64>> = members.iter().map(|&k| restrict(&local[k])).collect();
    let w: Vec<f64> = members.iter().map(|&k| weights[k]).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let total: f64 = w.iter().sum();
    let mut u0: Vec<f64> = (0..coords.len()).map(|c| mu.iter().zip(&w).map(|(v, wk)| wk * v[c]).sum::<f64>() / total).collect();

    let reduced = |u0: &[f64]| -> f64 { mu.iter().zip(&w).map(|(v, wk)| wk * huber(dist(v, u0), lambda)).sum() };
    let mut iterations = 0;
    let mut converged = true;
    if lambda > 0.0 && !coords.is_empty() && mu.len() > 1 {
        converged = false;
        let mut f = reduced(&u0);
        let scale = mu.iter().flatten().fold(1.0_f64, |a, v| a.max(v.abs()));
        while iterations < MAX_SWEEPS {
            iterations += 1;
            let a: Vec<f64> = mu
                .iter()
                .zip(&w)
                .map(|(v, wk)| {
                    let r = dist(v, &u0);
                    if r <= lambda {
                        *wk
                    } else {
                        wk * lambda / r
                    }
                })
                .collect();
            let asum: f64 = a.iter().sum();
            let next: Vec<f64> = (0..coords.len()).map(|c| mu.iter().zip(&a).map(|(v, ak)| ak * v[c]).sum::<f64>() / asum).collect();
            let fnext = reduced(&next);
            if fnext > f {
                converged = true;
                break;
            }
            let step = dist(&next, &u0);
            u0 = next;
            let decrease = f - fnext;
            f = fnext;
            if step <= 1e-13 * scale || decrease <= 1e-16 * f.abs().max(1e-300) {
                converged = true;
                break;
            }
        }
    }

    let mut values = local.clone();
    let mut fused = vec![false; stats.len()];
    let mut objective = 0.0;
    for (slot, &k) in members.iter().enumerate() {
        let v = &mu[slot];
        let r = dist(v, &u0);
        let uk: Vec<f64> = if lambda == 0.0 {
            v.clone()
        } else if r <= lambda {
            fused[k] = true;
            u0.clone()
        } else {
            let f = 1.0 - lambda / r;
            u0.iter().zip(v).map(|(c, x)| c + f * (x - c)).collect()
        };
        let g: Vec<f64> = restrict(&stats[k].g);
        objective += weights[k]
            * (g.iter().zip(&uk).map(|(a, b)| a * b).sum::<f64>()
                + 0.5 * uk.iter().map(|x| x * x).sum::<f64>()
                + lambda * dist(&uk, &u0));
        for (c, &t) in coords.iter().enumerate() {
            values[k][t] = uk[c];
        }
    }
    Ok(GridFusion {
        values,
        masks: stats.iter().map(|s| s.mask.clone()).collect(),
        center: u0,
        joint,
        fused,
        excluded,
        objective,
        iterations,
        converged,
    })
}

/// How a node evaluates its fused grid values at a covariate value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPrediction {
    /// `Nearest` on lattice grids (a genuine ℏ²-covering, where the
    /// nearest point is within O(ℏ²)), `LocalShift` on budgeted
    /// low-discrepancy grids.
    #[default]
    Auto,
    /// Fused value at the nearest valid grid point.
    Nearest,
    /// The node's own kernel fit at `x` plus the fusion shift
    /// `û_k(t) − μ̃_k(t)` at the nearest valid grid point `t`. Equal to the
    /// plain kernel fit when λ̃ = 0, and free of the grid's discretization
    /// error when the grid is coarse (large `p`).
    LocalShift,
}

impl GridPrediction {
    /// Whether node-local kernel anchors are needed on `grid`.
    pub fn uses_anchor(self, grid: &EvaluationGrid) -> bool {
        match self {
            GridPrediction::Auto => grid.kind() == GridKind::LowDiscrepancy,
            GridPrediction::Nearest => false,
            GridPrediction::LocalShift => true,
        }
    }
}

/// Node-local kernel fit and its values on the grid.
#[derive(Debug)]
pub struct LocalAnchor {
    pub fit: KernelFit,
    pub local: Vec<f64>,
}

/// Fused values of one task on the grid, served by nearest valid point.
#[derive(Debug, Clone)]
pub struct NuisanceGridFit {
    pub grid: Arc<EvaluationGrid>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    pub lambda: f64,
    pub valid: Vec<bool>,
    /// Node-local kernel fit used for off-grid shifts, if any.
    pub anchor: Option<Arc<LocalAnchor>>,
}

impl NuisanceGridFit {
    pub fn from_fusion(grid: Arc<EvaluationGrid>, fusion: &GridFusion, task: usize, bandwidth: f64, lambda: f64) -> Self {
        Self { grid, values: fusion.values[task].clone(), bandwidth, lambda, valid: fusion.masks[task].clone(), anchor: None }
    }

    pub fn with_anchor(mut self, anchor: Option<Arc<LocalAnchor>>) -> Self {
        self.anchor = anchor;
        self
    }

    /// Index of the Euclidean-nearest valid grid point; ties go to the
    /// lowest index.
    pub fn nearest(&self, x: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for t in 0..self.grid.len() {
            if !self.valid[t] {
                continue;
            }
            let d: f64 = self.grid.point(t).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((t, d));
            }
        }
        best.map(|(t, _)| t)
    }
}

pub fn predict_nearest(fit: &NuisanceGridFit, x: &[f64]) -> Result<f64> {
    if x.len() != fit.grid.dim() {
        return Err(Error::Dimension(format!("query has {} coordinates, grid has {}", x.len(), fit.grid.dim())));
    }
    fit.nearest(x).map(|t| fit.values[t]).ok_or_else(|| Error::Numerical("nuisance grid fit has no valid point".into()))
}

impl Regressor for NuisanceGridFit {
    fn predict(&self, x: &[f64]) -> f64 {
        self.nearest(x).map_or(f64::NAN, |t| match &self.anchor {
            None => self.values[t],
            Some(a) => a.fit.nw_at(x).0 + self.values[t] - a.local[t],
        })
    }
}

/// One task's regression target for nuisance fusion: covariates, response
/// and which samples take part (e.g. a treatment arm).
#[derive(Debug, Clone)]
pub struct TaskTarget {
    pub rows: Vec<f64>,
    pub p: usize,
    pub y: Vec<f64>,
    pub include: Vec<bool>,
}

impl TaskTarget {
    pub fn new(data: &TaskDataset, y: Vec<f64>, include: Vec<bool>) -> Result<Self> {
        if y.len() != data.n() || include.len() != data.n() {
            return Err(Error::Dimension("target and inclusion mask must have one entry per sample".into()));
        }
        let all: Vec<usize> = (0..data.n()).collect();
        Ok(Self { rows: data.rows_flat(&all), p: data.p(), y, include })
    }

    pub fn outcome(data: &TaskDataset) -> Self {
        Self::new(data, data.y().iter().copied().collect(), vec![true; data.n()]).expect("lengths match")
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn members(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().copied().filter(|&i| self.include[i]).collect()
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut rows = Vec::with_capacity(idx.len() * self.p);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            rows.extend_from_slice(&self.rows[i * self.p..(i + 1) * self.p]);
            y.push(self.y[i]);
        }
        (rows, y)
    }

    /// Grid statistics of the included samples among `idx`. With no
    /// included samples every grid point is masked.
    pub fn stats(&self, idx: &[usize], grid: &EvaluationGrid, hbar: f64) -> Result<GridStats> {
        let used = self.members(idx);
        if used.is_empty() {
            return Ok(GridStats { g: vec![0.0; grid.len()], mask: vec![false; grid.len()] });
        }
        let (rows, y) = self.gather(&used);
        local_grid_stats(&rows, self.p, &y, grid, hbar)
    }

    /// Kernel fit on the included samples among `idx` with its grid
    /// values; `None` when there are none.
    pub fn anchor(&self, idx: &[usize], stats: &GridStats, hbar: f64) -> Result<Option<Arc<LocalAnchor>>> {
        let used = self.members(idx);
        if used.is_empty() {
            return Ok(None);
        }
        let (rows, y) = self.gather(&used);
        let fit = KernelFit::from_flat(rows, self.p, y, hbar, KernelKind::NadarayaWatson)?;
        Ok(Some(Arc::new(LocalAnchor { fit, local: stats.local_values() })))
    }

    /// Mean squared error over the included samples among `idx`; `None`
    /// when there are none.
    pub fn loss(&self, idx: &[usize], fit: &dyn Regressor) -> Option<f64> {
        let used = self.members(idx);
        if used.is_empty() {
            return None;
        }
        let sse: f64 = used
            .iter()
            .map(|&i| (self.y[i] - fit.predict(&self.rows[i * self.p..(i + 1) * self.p])).powi(2))
            .sum();
        Some(sse / used.len() as f64)
    }
}

/// `{0} ∪` seven log-spaced values in `[0.03, 3]·sd(y)·sqrt(|𝒯|)`.
pub fn default_nuisance_lambda_grid(response_sd: f64, grid_size: usize) -> Vec<f64> {
    let base = response_sd.max(1e-12) * (grid_size as f64).sqrt();
    std::iter::once(0.0).chain(log_grid(0.03 * base, 3.0 * base, 7)).collect()
}

/// Bandwidth candidates `{0.25, 0.5, 1, 2, 4}·m^{−1/(p+4)}·s` from a
/// typical training size `m` and covariate scale `s`.
pub fn default_nuisance_bandwidths(train_size: f64, p: usize, scale: f64) -> Vec<f64> {
    let base = train_size.max(2.0).powf(-1.0 / (p as f64 + 4.0)) * scale.max(1e-12);
    [0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|m| m * base).collect()
}

/// Pooled standard deviation of the covariates (the node-side summary used
/// to build default bandwidths).
pub fn covariate_scale(target: &TaskTarget) -> f64 {
    pooled_sd(&target.rows, target.p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSelection {
    pub hbar: Vec<f64>,
    pub lambda: Vec<f64>,
    /// `losses[k][a][b]`: task `k`, bandwidth `a`, penalty `b`.
    pub losses: Vec<Vec<Vec<f64>>>,
}

/// All fusion solves for one `(ℏ, λ̃)` candidate, indexed `[fold][half]`.
type CandidateSolves = Vec<[GridFusion; 2]>;

fn solve_candidate(
    targets: &[TaskTarget],
    plans: &[FoldPlan],
    weights: &[f64],
    stats_cache: &[Vec<[GridStats; 2]>],
    lambda: f64,
) -> Result<CandidateSolves> {
    let folds = plans[0].folds();
    (0..folds)
        .map(|j| {
            let solve = |m: usize| {
                let stats: Vec<GridStats> = (0..targets.len()).map(|k| stats_cache[k][j][m].clone()).collect();
                fuse_nuisance(&stats, weights, lambda)
            };
            Ok([solve(0)?, solve(1)?])
        })
        .collect()
}

/// Held-half loss of task `k` for one candidate: the fit trained on half
/// `m` is scored on half `1 − m`, averaged over all folds and halves that
/// have scored samples.
pub fn candidate_loss(target: &TaskTarget, plan: &FoldPlan, fits: &[[NuisanceGridFit; 2]]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (j, pair) in fits.iter().enumerate() {
        for m in 0..2 {
            if let Some(l) = target.loss(&plan.halves(j)[1 - m], &pair[m]) {
                total += l;
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::INFINITY
    } else {
        total / count as f64
    }
}

fn check_setup(targets: &[TaskTarget], plans: &[FoldPlan], weights: &[f64], hbar_grid: &[f64], lambda_grid: &[f64]) -> Result<()> {
    if targets.is_empty() || plans.len() != targets.len() || weights.len() != targets.len() {
        return Err(Error::InvalidConfig("one plan and one weight per task".into()));
    }
    if hbar_grid.is_empty() || hbar_grid.iter().any(|h| !(*h > 0.0)) || hbar_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("bandwidth grid must be nonempty, positive and ascending".into()));
    }
    check_grid(lambda_grid)?;
    let folds = plans[0].folds();
    for (t, p) in targets.iter().zip(plans) {
        if p.folds() != folds || p.n() != t.n() {
            return Err(Error::InvalidConfig("fold plans must share J and match task sizes".into()));
        }
    }
    Ok(())
}

/// Per-task choice of `(ℏ, λ̃)` with the fitted grid values for every fold
/// and half at that choice.
#[derive(Debug, Clone)]
pub struct FusedNuisance {
    pub selection: NuisanceSelection,
    /// `fits[k][j][m]`: task `k`, fold `j`, trained on half `m`.
    pub fits: Vec<Vec<[NuisanceGridFit; 2]>>,
}

/// Tunes and fits one nuisance regression for all tasks: local statistics
/// per (fold, half), a fusion solve per candidate, held-half scoring, and
/// a task-specific argmin (ties toward larger ℏ, then larger λ̃).
pub fn fit_fused_nuisance(
    targets: &[TaskTarget],
    plans: &[FoldPlan],
    weights: &[f64],
    grid: Arc<EvaluationGrid>,
    hbar_grid: &[f64],
    lambda_grid: &[f64],
) -> Result<FusedNuisance> {
    fit_fused_nuisance_with(targets, plans, weights, grid, hbar_grid, lambda_grid, GridPrediction::Auto)
}

/// [`fit_fused_nuisance`] with an explicit prediction rule.
pub fn fit_fused_nuisance_with(
    targets: &[TaskTarget],
    plans: &[FoldPlan],
    weights: &[f64],
    grid: Arc<EvaluationGrid>,
    hbar_grid: &[f64],
    lambda_grid: &[f64],
    prediction: GridPrediction,
) -> Result<FusedNuisance> {
    check_setup(targets, plans, weights, hbar_grid, lambda_grid)?;
    let folds = plans[0].folds();
    let k_count = targets.len();
    let mut losses = vec![vec![vec![0.0; lambda_grid.len()]; hbar_grid.len()]; k_count];
    let mut solves: Vec<Vec<CandidateSolves>> = Vec::with_capacity(hbar_grid.len());
    let mut anchors: Vec<Vec<Vec<[Option<Arc<LocalAnchor>>; 2]>>> = Vec::with_capacity(hbar_grid.len());
    for (a, &h) in hbar_grid.iter().enumerate() {
        let stats_cache: Vec<Vec<[GridStats; 2]>> = targets
            .iter()
            .zip(plans)
            .map(|(t, plan)| {
                (0..folds)
                    .map(|j| Ok([t.stats(&plan.halves(j)[0], &grid, h)?, t.stats(&plan.halves(j)[1], &grid, h)?]))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let anchor_row: Vec<Vec<[Option<Arc<LocalAnchor>>; 2]>> = targets
            .iter()
            .zip(plans)
            .zip(&stats_cache)
            .map(|((t, plan), st)| {
                (0..folds)
                    .map(|j| {
                        if !prediction.uses_anchor(&grid) {
                            return Ok([None, None]);
                        }
                        Ok([t.anchor(&plan.halves(j)[0], &st[j][0], h)?, t.anchor(&plan.halves(j)[1], &st[j][1], h)?])
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut row = Vec::with_capacity(lambda_grid.len());
        for (b, &lam) in lambda_grid.iter().enumerate() {
            let cand = solve_candidate(targets, plans, weights, &stats_cache, lam)?;
            for k in 0..k_count {
                let fits: Vec<[NuisanceGridFit; 2]> = cand
                    .iter()
                    .enumerate()
                    .map(|(j, pair)| {
                        [
                            NuisanceGridFit::from_fusion(grid.clone(), &pair[0], k, h, lam).with_anchor(anchor_row[k][j][0].clone()),
                            NuisanceGridFit::from_fusion(grid.clone(), &pair[1], k, h, lam).with_anchor(anchor_row[k][j][1].clone()),
                        ]
                    })
                    .collect();
                losses[k][a][b] = candidate_loss(&targets[k], &plans[k], &fits);
            }
            row.push(cand);
        }
        solves.push(row);
        anchors.push(anchor_row);
    }

    let mut sel_h = Vec::with_capacity(k_count);
    let mut sel_l = Vec::with_capacity(k_count);
    let mut fits = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let flat: Vec<f64> = losses[k].iter().flatten().copied().collect();
        let best = argmin_prefer_last(&flat);
        let (a, b) = (best / lambda_grid.len(), best % lambda_grid.len());
        sel_h.push(hbar_grid[a]);
        sel_l.push(lambda_grid[b]);
        fits.push(
            solves[a][b]
                .iter()
                .enumerate()
                .map(|(j, pair)| {
                    [
                        NuisanceGridFit::from_fusion(grid.clone(), &pair[0], k, hbar_grid[a], lambda_grid[b])
                            .with_anchor(anchors[a][k][j][0].clone()),
                        NuisanceGridFit::from_fusion(grid.clone(), &pair[1], k, hbar_grid[a], lambda_grid[b])
                            .with_anchor(anchors[a][k][j][1].clone()),
                    ]
                })
                .collect(),
        );
    }
    Ok(FusedNuisance { selection: NuisanceSelection { hbar: sel_h, lambda: sel_l, losses }, fits })
}

/// Task-specific `(ℏ, λ̃)` selection only.
pub fn tune_nuisance(
    targets: &[TaskTarget],
    plans: &[FoldPlan],
    weights: &[f64],
    grid: Arc<EvaluationGrid>,
    hbar_grid: &[f64],
    lambda_grid: &[f64],
) -> Result<NuisanceSelection> {
    Ok(fit_fused_nuisance(targets, plans, weights, grid, hbar_grid, lambda_grid)?.selection)
}

/// Grid coordinates plus one value column per fit; invalid points are left
/// empty.
pub fn write_grid_csv(grid: &EvaluationGrid, fits: &[NuisanceGridFit], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    let mut header: Vec<String> = (1..=grid.dim()).map(|c| format!("x{c}")).collect();
    header.extend((0..fits.len()).map(|k| format!("task{}", k + 1)));
    w.write_record(&header)?;
    for t in 0..grid.len() {
        let mut rec: Vec<String> = grid.point(t).iter().map(|v| v.to_string()).collect();
        for f in fits {
            rec.push(if f.valid[t] { f.values[t].to_string() } else { String::new() });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_fold_plan;
    use crate::kernel::{nw_predict, KernelFit, KernelKind};
    use nalgebra::DMatrix;

    fn cube(p: usize) -> DomainBox {
        DomainBox::cube(p, -1.0, 1.0).unwrap()
    }

    #[test]
    fn lattice_step_follows_hbar_squared() {
        let g = build_grid(&cube(1), 0.5, GridKind::Lattice, 1000).unwrap();
        assert_eq!(g.kind(), GridKind::Lattice);
        assert_eq!(g.len(), 9);
        for t in 0..9 {
            assert!((g.point(t)[0] - (-1.0 + 0.25 * t as f64)).abs() < 1e-15);
        }
    }

    #[test]
    fn high_dimension_uses_the_full_budget() {
        let g = build_grid(&cube(8), 0.5, GridKind::Lattice, 512).unwrap();
        assert_eq!(g.kind(), GridKind::LowDiscrepancy);
        assert_eq!(g.len(), 512);
        assert!((0..512).all(|t| g.domain().contains(g.point(t))));
        assert_eq!(g, build_grid(&cube(8), 0.5, GridKind::Lattice, 512).unwrap());
    }

    #[test]
    fn grid_rejects_bad_inputs() {
        assert!(build_grid(&cube(2), 0.5, GridKind::Lattice, 7).is_err());
        assert!(DomainBox::new(vec![0.0], vec![0.0]).is_err());
        // Lattice too large for the budget falls back to Halton.
        let g = build_grid(&cube(2), 0.3, GridKind::Lattice, 64).unwrap();
        assert_eq!((g.kind(), g.len()), (GridKind::LowDiscrepancy, 64));
    }

    #[test]
    fn single_point_stats_are_constant() {
        let g = build_grid(&cube(2), 0.7, GridKind::Lattice, 512).unwrap();
        let s = local_grid_stats(&[0.1, -0.2], 2, &[3.5], &g, 0.7).unwrap();
        assert!(s.mask.iter().all(|&m| m));
        assert!(s.g.iter().all(|&v| v == -3.5));
    }

    #[test]
    fn far_grid_points_are_masked() {
        let domain = DomainBox::new(vec![0.0], vec![100.0]).unwrap();
        let g = build_grid(&domain, 10.0, GridKind::LowDiscrepancy, 16).unwrap();
        let s = local_grid_stats(&[0.0, 0.1], 1, &[1.0, 2.0], &g, 0.01).unwrap();
        assert!(s.mask.iter().any(|&m| !m));
        assert!(s.mask.iter().zip(&s.g).all(|(m, v)| *m || *v == 0.0));
    }

    #[test]
    fn stats_match_kernel_smoother() {
        let xs = [-0.8, -0.3, 0.0, 0.4, 0.9];
        let ys = [1.0, -0.5, 0.3, 2.0, 0.7];
        let g = build_grid(&cube(1), 0.5, GridKind::Lattice, 100).unwrap();
        let s = local_grid_stats(&xs, 1, &ys, &g, 0.5).unwrap();
        let fit = KernelFit::new(&DMatrix::from_column_slice(5, 1, &xs), &ys, 0.5, KernelKind::NadarayaWatson).unwrap();
        let pred = nw_predict(&fit, &DMatrix::from_column_slice(g.len(), 1, g.points())).unwrap();
        for (a, b) in s.g.iter().zip(pred) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    fn stats(values: &[f64]) -> GridStats {
        GridStats { g: values.iter().map(|v| -v).collect(), mask: vec![true; values.len()] }
    }

    #[test]
    fn zero_penalty_keeps_local_values() {
        let s = vec![stats(&[1.0, 2.0, 3.0]), stats(&[0.0, -1.0, 5.0])];
        let f = fuse_nuisance(&s, &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(f.values[0], vec![1.0, 2.0, 3.0]);
        assert_eq!(f.values[1], vec![0.0, -1.0, 5.0]);
    }

    #[test]
    fn identical_tasks_are_unchanged() {
        let s = vec![stats(&[1.0, 2.0, 3.0]); 3];
        for lam in [0.1, 1.0, 100.0] {
            let f = fuse_nuisance(&s, &[1.0; 3], lam).unwrap();
            for k in 0..3 {
                assert_eq!(f.values[k], vec![1.0, 2.0, 3.0]);
                assert!(f.fused[k]);
            }
        }
    }

    /// Objective in `(u0, u1, u2)` for the two-task, three-point fixture.
    fn fixture_objective(mu: &[[f64; 3]; 2], lam: f64, u0: &[f64], u: &[[f64; 3]; 2]) -> f64 {
        (0..2)
            .map(|k| {
                let q: f64 = (0..3).map(|c| -mu[k][c] * u[k][c] + 0.5 * u[k][c] * u[k][c]).sum();
                let r: f64 = (0..3).map(|c| (u[k][c] - u0[c]).powi(2)).sum::<f64>().sqrt();
                q + lam * r
            })
            .sum()
    }

    #[test]
    fn two_task_fixture_matches_coordinate_search() {
        let mu = [[0.2, 1.0, -0.4], [0.9, 0.1, 0.5]];
        let lam = 0.4;
        let f = fuse_nuisance(&[stats(&mu[0]), stats(&mu[1])], &[1.0, 1.0], lam).unwrap();
        // Independent oracle: cyclic coordinate search with shrinking steps
        // over all nine coordinates, started at the unpenalized point.
        let mut x: Vec<f64> = vec![0.55, 0.55, 0.05];
        x.extend_from_slice(&mu[0]);
        x.extend_from_slice(&mu[1]);
        let eval = |x: &[f64]| {
            fixture_objective(&mu, lam, &x[0..3], &[[x[3], x[4], x[5]], [x[6], x[7], x[8]]])
        };
        let mut best = eval(&x);
        let mut step = 0.1;
        while step > 1e-9 {
            let mut improved = true;
            while improved {
                improved = false;
                for i in 0..9 {
                    for sgn in [-1.0, 1.0] {
                        let mut y = x.clone();
                        y[i] += sgn * step;
                        let v = eval(&y);
                        if v < best - 1e-15 {
                            best = v;
                            x = y;
                            improved = true;
                        }
                    }
                }
                // Joint moves of a task with the center escape the kink.
                for k in 0..2 {
                    for i in 0..3 {
                        for sgn in [-1.0, 1.0] {
                            let mut y = x.clone();
                            y[i] += sgn * step;
                            y[3 + 3 * k + i] += sgn * step;
                            let v = eval(&y);
                            if v < best - 1e-15 {
                                best = v;
                                x = y;
                                improved = true;
                            }
                        }
                    }
                }
            }
            step *= 0.5;
        }
        assert!(f.objective <= best + 1e-6, "{} vs {best}", f.objective);
        assert!((f.objective - best).abs() < 1e-6);
    }

    #[test]
    fn shrinkage_never_moves_away_from_center() {
        let s = vec![stats(&[1.0, 2.0]), stats(&[0.0, -1.0]), stats(&[3.0, 0.5])];
        for lam in [0.2, 0.8, 2.0] {
            let f = fuse_nuisance(&s, &[1.0, 2.0, 1.0], lam).unwrap();
            for k in 0..3 {
                let mu = s[k].local_values();
                let d_fit: f64 = f.values[k].iter().zip(&f.center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let d_mu: f64 = mu.iter().zip(&f.center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d_fit <= d_mu + 1e-15);
                assert_eq!(f.fused[k], d_mu <= lam);
            }
        }
    }

    #[test]
    fn masked_coordinates_copy_local_values_and_empty_tasks_are_excluded() {
        let mut a = stats(&[1.0, 2.0, 3.0]);
        a.mask[2] = false;
        let b = stats(&[0.0, 0.0, 7.0]);
        let c = GridStats { g: vec![0.0; 3], mask: vec![false; 3] };
        let f = fuse_nuisance(&[a, b, c], &[1.0; 3], 10.0).unwrap();
        assert_eq!(f.joint, vec![true, true, false]);
        assert!(f.excluded[2] && !f.excluded[0]);
        assert_eq!(f.values[1][2], 7.0);
        assert_eq!(f.values[0][0], f.values[1][0]);
    }

    #[test]
    fn nearest_prediction_and_ties() {
        let g = Arc::new(build_grid(&cube(1), 0.5, GridKind::Lattice, 100).unwrap());
        let values: Vec<f64> = (0..9).map(|t| t as f64).collect();
        let fit = NuisanceGridFit { grid: g.clone(), values, bandwidth: 0.5, lambda: 0.0, valid: vec![true; 9], anchor: None };
        assert_eq!(predict_nearest(&fit, &[-0.5]).unwrap(), 2.0);
        // Equidistant from -1.0 (index 0) and -0.75 (index 1).
        assert_eq!(predict_nearest(&fit, &[-0.875]).unwrap(), 0.0);
        let mut masked = fit.clone();
        masked.valid[2] = false;
        assert_eq!(predict_nearest(&masked, &[-0.5]).unwrap(), 1.0);
        masked.valid = vec![false; 9];
        assert!(predict_nearest(&masked, &[0.0]).is_err());
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let g = Arc::new(build_grid(&cube(2), 0.8, GridKind::Lattice, 100).unwrap());
        assert_eq!(g.len(), 25);
        let values: Vec<f64> = (0..g.len()).map(|t| (t as f64).sin()).collect();
        let fit = NuisanceGridFit { grid: g.clone(), values: values.clone(), bandwidth: 0.8, lambda: 0.0, valid: vec![true; g.len()], anchor: None };
        for i in 0..50 {
            let x = [((i * 37 % 101) as f64 / 50.0) - 1.0, ((i * 53 % 97) as f64 / 48.0) - 1.0];
            let mut best = (0, f64::INFINITY);
            for t in 0..g.len() {
                let d = (g.point(t)[0] - x[0]).powi(2) + (g.point(t)[1] - x[1]).powi(2);
                if d < best.1 {
                    best = (t, d);
                }
            }
            assert_eq!(predict_nearest(&fit, &x).unwrap(), values[best.0]);
        }
    }

    fn synthetic(task: usize, n: usize, shift: f64) -> TaskDataset {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![((i * 7919 + task * 31) % 1000) as f64 / 500.0 - 1.0]).collect();
        let y: Vec<f64> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (2.0 * r[0]).sin() + shift + 0.3 * (((i * 104_729 + task) % 613) as f64 / 306.0 - 1.0))
            .collect();
        TaskDataset::from_rows(task, &rows, None, y).unwrap()
    }

    #[test]
    fn tuning_single_candidate_and_determinism() {
        let data: Vec<TaskDataset> = (0..3).map(|k| synthetic(k, 60, 0.0)).collect();
        let targets: Vec<TaskTarget> = data.iter().map(TaskTarget::outcome).collect();
        let plans: Vec<FoldPlan> = (0..3).map(|k| make_fold_plan(60, 3, k as u64).unwrap()).collect();
        let grid = Arc::new(build_grid(&cube(1), 0.4, GridKind::Lattice, 200).unwrap());
        let sel = tune_nuisance(&targets, &plans, &[1.0; 3], grid.clone(), &[0.4], &[0.5]).unwrap();
        assert_eq!(sel.hbar, vec![0.4; 3]);
        assert_eq!(sel.lambda, vec![0.5; 3]);

        let same: Vec<TaskTarget> = (0..3).map(|_| targets[0].clone()).collect();
        let same_plans: Vec<FoldPlan> = (0..3).map(|_| plans[0].clone()).collect();
        let sel = tune_nuisance(&same, &same_plans, &[1.0; 3], grid, &[0.2, 0.4], &[0.0, 0.5, 2.0]).unwrap();
        assert!(sel.hbar.windows(2).all(|w| w[0] == w[1]));
        assert!(sel.lambda.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn local_shift_without_penalty_is_the_kernel_fit() {
        let data: Vec<TaskDataset> = (0..2).map(|k| synthetic(k, 50, 0.3 * k as f64)).collect();
        let targets: Vec<TaskTarget> = data.iter().map(TaskTarget::outcome).collect();
        let grid = Arc::new(build_grid(&cube(1), 0.5, GridKind::Lattice, 8).unwrap());
        assert_eq!(grid.kind(), GridKind::LowDiscrepancy);
        let idx: Vec<usize> = (0..50).collect();
        let st: Vec<GridStats> = targets.iter().map(|t| t.stats(&idx, &grid, 0.3).unwrap()).collect();
        let fusion = fuse_nuisance(&st, &[1.0, 1.0], 0.0).unwrap();
        let anchor = targets[1].anchor(&idx, &st[1], 0.3).unwrap();
        let fit = NuisanceGridFit::from_fusion(grid.clone(), &fusion, 1, 0.3, 0.0).with_anchor(anchor);
        let kf = KernelFit::from_flat(targets[1].rows.clone(), 1, targets[1].y.clone(), 0.3, KernelKind::NadarayaWatson).unwrap();
        for x in [-0.93, -0.2, 0.05, 0.71] {
            assert!((fit.predict(&[x]) - kf.nw_at(&[x]).0).abs() < 1e-12);
        }
        // With a large penalty the shift moves toward the common center.
        let fused = fuse_nuisance(&st, &[1.0, 1.0], 1e6).unwrap();
        let anchor = targets[1].anchor(&idx, &st[1], 0.3).unwrap();
        let fit = NuisanceGridFit::from_fusion(grid.clone(), &fused, 1, 0.3, 1e6).with_anchor(anchor);
        let t = fit.nearest(&[0.05]).unwrap();
        let shift = fit.predict(&[0.05]) - kf.nw_at(&[0.05]).0;
        assert!((shift - (fused.values[1][t] - st[1].local_values()[t])).abs() < 1e-12);
        assert!(GridPrediction::Auto.uses_anchor(&grid));
        assert!(!GridPrediction::Nearest.uses_anchor(&grid));
    }

    #[test]
    fn csv_export_has_one_row_per_grid_point() {
        let g = Arc::new(build_grid(&cube(1), 0.5, GridKind::Lattice, 100).unwrap());
        let mut valid = vec![true; 9];
        valid[4] = false;
        let fit = NuisanceGridFit { grid: g.clone(), values: vec![1.5; 9], bandwidth: 0.5, lambda: 0.0, valid, anchor: None };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        write_grid_csv(&g, &[fit], &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x1,task1");
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[5], "0,");
    }
}
