//! Central-server fusion: minimize
//! `Σ_k w_k {G_kᵀu_k + ½u_kᵀW_ku_k + λ‖u_k − u_0‖}` over the center `u_0`
//! and the task estimates `u_k`.
//!
//! Given `u_0` every task block is an exact group prox. The center is
//! updated on the reduced objective `F(u_0) = Σ_k w_k min_u {...}`, which is
//! convex and differentiable with `∇F = Σ_k w_k (G_k + W_k u_k)`. Each sweep
//! tries the Weiszfeld center of the current `u_k`, a damped Newton step
//! and a gradient step, keeping whichever lowers `F` most, so the objective
//! never increases.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{FoldSurrogate, QuadraticSurrogate};

pub const MAX_SWEEPS: usize = 10_000;
/// Tolerance of the per-task optimality certificate.
pub const CERTIFICATE_TOL: f64 = 1e-6;
const SINGULAR_SHIFT: f64 = 1e-10;

fn eigen(w: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eig = w.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.map(|v| v.max(0.0));
    let top = vals.max().max(1.0);
    if vals.min() <= 1e-12 * top {
        vals.add_scalar_mut(SINGULAR_SHIFT);
    }
    (eig.eigenvectors, vals)
}

/// Exact minimizer of `½vᵀWv + cᵀv + lam‖v‖` for symmetric PSD `W`.
pub fn prox_group(w: &DMatrix<f64>, c: &DVector<f64>, lam: f64) -> Result<DVector<f64>> {
    if w.nrows() != c.len() || w.ncols() != c.len() {
        return Err(Error::Dimension("prox: W and c disagree".into()));
    }
    if !(lam >= 0.0) || !lam.is_finite() {
        return Err(Error::InvalidConfig(format!("prox weight {lam} must be nonnegative")));
    }
    let norm_c = c.norm();
    if norm_c <= lam {
        return Ok(DVector::zeros(c.len()));
    }
    let (q, vals) = eigen(w);
    let ct = q.transpose() * c;
    let solve = |s: f64| -> DVector<f64> {
        let shift = if lam == 0.0 { 0.0 } else { lam / s };
        DVector::from_iterator(ct.len(), ct.iter().zip(vals.iter()).map(|(c, l)| c / (l + shift)))
    };
    if lam == 0.0 {
        return Ok(-(&q * solve(1.0)));
    }
    let h = |s: f64| solve(s).norm() - s;
    // ‖v(s)‖ < ‖c‖/λ_min for every s > 0; the margin absorbs rounding.
    let (mut lo, mut hi) = (0.0, norm_c / vals.min() * (1.0 + 1e-9));
    if !(h(hi) <= 0.0) {
        return Err(Error::Numerical(format!("prox bisection bracket has no sign change (‖c‖ = {norm_c:e}, λ = {lam:e}, eigenvalues {vals:?})")));
    }
    let mut s = hi;
    for _ in 0..400 {
        s = 0.5 * (lo + hi);
        let v = h(s);
        if v == 0.0 || hi - lo <= 1e-16 * hi {
            break;
        }
        if v > 0.0 {
            lo = s;
        } else {
            hi = s;
        }
    }
    if !(h(s).abs() < 1e-12_f64.max(1e-12 * s)) {
        return Err(Error::Numerical(format!("prox bisection stalled at residual {:e}", h(s))));
    }
    Ok(-(&q * solve(s)))
}

pub fn weighted_distance_sum(points: &[DVector<f64>], weights: &[f64], y: &DVector<f64>) -> f64 {
    points.iter().zip(weights).map(|(p, w)| w * (p - y).norm()).sum()
}

/// Weighted geometric median by Weiszfeld iteration with the Vardi–Zhang
/// modification at data points. Starts from the weighted mean.
pub fn weighted_geometric_median(points: &[DVector<f64>], weights: &[f64], tol: f64) -> Result<DVector<f64>> {
    let first = points.first().ok_or_else(|| Error::InvalidConfig("geometric median of no points".into()))?;
    if weights.len() != points.len() || weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::InvalidConfig("geometric median weights must be positive, one per point".into()));
    }
    let d = first.len();
    if points.len() == 1 {
        return Ok(first.clone());
    }
    let total: f64 = weights.iter().sum();

    // Resultant of the unit pulls towards points away from `y`, and the
    // weight sitting exactly at `y`.
    let pull = |y: &DVector<f64>| -> (DVector<f64>, f64) {
        let mut r = DVector::zeros(d);
        let mut at = 0.0;
        for (p, w) in points.iter().zip(weights) {
            let dist = (p - y).norm();
            if dist <= 1e-12 * (1.0 + y.norm()) {
                at += w;
            } else {
                r += (p - y) * (w / dist);
            }
        }
        (r, at)
    };

    // A data point is the median iff the pull of the others does not exceed
    // its own weight. Exact ties are left to the iteration so symmetric
    // configurations resolve to their symmetric center.
    for p in points {
        let (r, at) = pull(p);
        if r.norm() < at * (1.0 - 1e-12) {
            return Ok(p.clone());
        }
    }

    let mut y = points.iter().zip(weights).fold(DVector::zeros(d), |acc, (p, w)| acc + p * *w) / total;
    for _ in 0..MAX_SWEEPS {
        let mut num = DVector::zeros(d);
        let mut den = 0.0;
        for (p, w) in points.iter().zip(weights) {
            let dist = (p - &y).norm();
            if dist > 1e-12 * (1.0 + y.norm()) {
                num += p * (w / dist);
                den += w / dist;
            }
        }
        if den == 0.0 {
            break;
        }
        let t = num / den;
        let (r, at) = pull(&y);
        let next = if at > 0.0 {
            let rn = r.norm();
            if rn <= at {
                y.clone()
            } else {
                let beta = at / rn;
                &t * (1.0 - beta) + &y * beta
            }
        } else {
            t
        };
        let step = (&next - &y).norm();
        y = next;
        if step < tol {
            break;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct FusionProblem {
    pub surrogates: Vec<QuadraticSurrogate>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSolution {
    pub u0: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Task `k` is fused: `u_k == u_0` exactly.
    pub active_set: Vec<bool>,
    /// Objective after initialization and after every sweep.
    pub history: Vec<f64>,
    pub gradient_norm: f64,
}

impl FusionSolution {
    pub fn task(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.u[k])
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.u0)
    }
}

/// Fusion objective at `(u0, u)`.
pub fn fusion_objective(surrogates: &[QuadraticSurrogate], lambda: f64, u0: &DVector<f64>, u: &[DVector<f64>]) -> f64 {
    surrogates
        .iter()
        .zip(u)
        .map(|(s, uk)| s.weight * (s.value(uk) + lambda * (uk - u0).norm()))
        .sum()
}

fn check_problem(p: &FusionProblem) -> Result<usize> {
    let first = p.surrogates.first().ok_or_else(|| Error::InvalidConfig("fusion needs at least one task".into()))?;
    if !(p.lambda >= 0.0) || !p.lambda.is_finite() {
        return Err(Error::InvalidConfig(format!("λ = {} must be a nonnegative number", p.lambda)));
    }
    let d = first.dim();
    for s in &p.surrogates {
        if s.dim() != d {
            return Err(Error::Dimension("surrogates disagree in dimension".into()));
        }
        s.validate()?;
    }
    Ok(d)
}

/// Minimizer of `q(u) + λ‖u − u0‖` and whether it coincides with `u0`.
fn task_block(s: &QuadraticSurrogate, lambda: f64, u0: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let c = &s.g + &s.w * u0;
    let v = prox_group(&s.w, &c, lambda)?;
    let fused = v.iter().all(|x| *x == 0.0);
    Ok((u0 + v, fused))
}

struct Reduced<'a> {
    surrogates: &'a [QuadraticSurrogate],
    lambda: f64,
}

struct Eval {
    u: Vec<DVector<f64>>,
    fused: Vec<bool>,
    objective: f64,
}

impl Reduced<'_> {
    fn eval(&self, u0: &DVector<f64>) -> Result<Eval> {
        let blocks: Vec<(DVector<f64>, bool)> =
            self.surrogates.iter().map(|s| task_block(s, self.lambda, u0)).collect::<Result<_>>()?;
        let (u, fused): (Vec<_>, Vec<_>) = blocks.into_iter().unzip();
        let objective = fusion_objective(self.surrogates, self.lambda, u0, &u);
        Ok(Eval { u, fused, objective })
    }

    fn gradient(&self, e: &Eval) -> DVector<f64> {
        self.surrogates
            .iter()
            .zip(&e.u)
            .fold(DVector::zeros(e.u[0].len()), |acc, (s, uk)| acc + (&s.g + &s.w * uk) * s.weight)
    }

    fn hessian(&self, u0: &DVector<f64>, e: &Eval) -> DMatrix<f64> {
        let d = u0.len();
        let mut h = DMatrix::zeros(d, d);
        for ((s, uk), fused) in self.surrogates.iter().zip(&e.u).zip(&e.fused) {
            let hk = if *fused || (uk - u0).norm() == 0.0 {
                s.w.clone()
            } else {
                let v = uk - u0;
                let r = v.norm();
                let dir = &v / r;
                let p = (DMatrix::identity(d, d) - &dir * dir.transpose()) / r;
                match (&s.w + p * self.lambda).try_inverse() {
                    Some(inv) => &s.w - &s.w * inv * &s.w,
                    None => s.w.clone(),
                }
            };
            h += hk * s.weight;
        }
        h
    }
}

/// Solves the fusion problem from the unpenalized starting point.
pub fn solve_fusion(problem: &FusionProblem) -> Result<FusionSolution> {
    let d = check_problem(problem)?;
    let surrogates = &problem.surrogates;
    let lambda = problem.lambda;
    let free: Vec<DVector<f64>> = surrogates
        .iter()
        .map(|s| {
            let (q, vals) = eigen(&s.w);
            let ct = q.transpose() * &s.g;
            -(&q * DVector::from_iterator(d, ct.iter().zip(vals.iter()).map(|(c, l)| c / l)))
        })
        .collect();
    let total_w: f64 = surrogates.iter().map(|s| s.weight).sum();
    let mut u0 = surrogates.iter().zip(&free).fold(DVector::zeros(d), |acc, (s, u)| acc + u * s.weight) / total_w;

    if lambda == 0.0 {
        let objective = fusion_objective(surrogates, 0.0, &u0, &free);
        return Ok(FusionSolution {
            active_set: free.iter().map(|u| *u == u0).collect(),
            u0: u0.iter().copied().collect(),
            u: free.iter().map(|u| u.iter().copied().collect()).collect(),
            objective,
            iterations: 0,
            converged: true,
            history: vec![objective],
            gradient_norm: 0.0,
        });
    }

    let reduced = Reduced { surrogates, lambda };
    let lipschitz: f64 = surrogates.iter().map(|s| s.weight * s.w.norm()).sum::<f64>().max(1e-12);
    let center_weights: Vec<f64> = surrogates.iter().map(|s| s.weight * lambda).collect();
    let scale = surrogates.iter().map(|s| s.weight * (s.g.norm() + lambda)).sum::<f64>().max(1.0);

    let mut current = reduced.eval(&u0)?;
    let mut history = vec![current.objective];
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < MAX_SWEEPS {
        iterations += 1;
        let grad = reduced.gradient(&current);
        grad_norm = grad.norm();
        if grad_norm <= 1e-13 * scale {
            converged = true;
            break;
        }
        let mut best: Option<(DVector<f64>, Eval)> = None;
        let consider = |cand: DVector<f64>, best: &mut Option<(DVector<f64>, Eval)>| -> Result<()> {
            if cand.iter().any(|v| !v.is_finite()) {
                return Ok(());
            }
            let e = reduced.eval(&cand)?;
            let bar = best.as_ref().map_or(current.objective, |b| b.1.objective);
            if e.objective < bar {
                *best = Some((cand, e));
            }
            Ok(())
        };

        consider(weighted_geometric_median(&current.u, &center_weights, 1e-14)?, &mut best)?;
        if let Some(step) = reduced.hessian(&u0, &current).try_inverse().map(|inv| -(inv * &grad)) {
            let mut alpha = 1.0;
            for _ in 0..40 {
                let cand = &u0 + &step * alpha;
                if cand.iter().any(|v| !v.is_finite()) {
                    break;
                }
                let e = reduced.eval(&cand)?;
                if e.objective < current.objective {
                    consider(cand, &mut best)?;
                    break;
                }
                alpha *= 0.5;
            }
        }
        consider(&u0 - &grad / lipschitz, &mut best)?;

        match best {
            Some((cand, e)) => {
                u0 = cand;
                current = e;
                history.push(current.objective);
            }
            None => {
                // No candidate decreases the objective: stationary to
                // working precision.
                converged = true;
                break;
            }
        }
    }
    let solution = FusionSolution {
        u0: u0.iter().copied().collect(),
        u: current.u.iter().map(|u| u.iter().copied().collect()).collect(),
        objective: current.objective,
        iterations,
        converged,
        active_set: current.fused.clone(),
        history,
        gradient_norm: grad_norm,
    };
    if !converged {
        log::warn!("fusion solver hit the sweep limit with gradient norm {grad_norm:e}");
    }
    Ok(solution)
}

/// Per-task certificate residuals: for fused tasks `‖G + W u0‖ − λ`
/// (feasible when ≤ 0), otherwise the smooth stationarity residual.
pub fn certificate_residuals(surrogates: &[QuadraticSurrogate], lambda: f64, sol: &FusionSolution) -> Vec<f64> {
    let u0 = sol.center();
    surrogates
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let uk = sol.task(k);
            let v = &uk - &u0;
            let r = v.norm();
            if r == 0.0 {
                (&s.g + &s.w * &u0).norm() - lambda
            } else {
                (&s.g + &s.w * &uk + &v * (lambda / r)).norm()
            }
        })
        .collect()
}

/// True when every task satisfies its optimality condition to `tol`.
pub fn check_certificate(surrogates: &[QuadraticSurrogate], lambda: f64, sol: &FusionSolution, tol: f64) -> bool {
    certificate_residuals(surrogates, lambda, sol).iter().all(|r| *r <= tol)
}

/// Variance-weighted fusion `Σ_k (θ̃_k − u_k)ᵀV_k(θ̃_k − u_k) + λ‖u_k − u_0‖`;
/// the reported objective is this expression.
pub fn solve_quadratic_fusion(thetas: &[DVector<f64>], v: &[DMatrix<f64>], lambda: f64) -> Result<FusionSolution> {
    if thetas.len() != v.len() {
        return Err(Error::Dimension("one precision matrix is needed per task".into()));
    }
    let mut surrogates = Vec::with_capacity(thetas.len());
    let mut constant = 0.0;
    for (k, (th, vk)) in thetas.iter().zip(v).enumerate() {
        if vk.clone().cholesky().is_none() {
            return Err(Error::InvalidConfig(format!("precision matrix of task {k} is not positive definite")));
        }
        constant += th.dot(&(vk * th));
        surrogates.push(QuadraticSurrogate::new(k, -(vk * th) * 2.0, vk * 2.0, 1.0)?);
    }
    let mut sol = solve_fusion(&FusionProblem { surrogates, lambda })?;
    sol.objective += constant;
    sol.history.iter_mut().for_each(|h| *h += constant);
    Ok(sol)
}

/// `[1e-3, 10]·sqrt(ln(max(K, 2)) / n̄)` on a 12-point log scale.
pub fn default_lambda_grid(tasks: usize, mean_size: f64) -> Vec<f64> {
    let base = ((tasks.max(2) as f64).ln() / mean_size).sqrt();
    log_grid(1e-3 * base, 10.0 * base, 12)
}

pub(crate) fn log_grid(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..m).map(|i| (a + (b - a) * i as f64 / (m - 1) as f64).exp()).collect()
}

/// `w_k = n_k / n̄`.
pub fn default_weights(sizes: &[usize]) -> Vec<f64> {
    let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    sizes.iter().map(|&n| n as f64 / mean).collect()
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("λ grid is empty".into()));
    }
    if grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("λ grid must be nonnegative and sorted ascending".into()));
    }
    Ok(())
}

/// Index of the smallest loss; near-ties (relative 1e-12) go to the later,
/// i.e. larger, candidate.
pub(crate) fn argmin_prefer_last(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate().skip(1) {
        let b = losses[best];
        if l <= b + 1e-12 * b.abs().max(1.0) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub grid: Vec<f64>,
    /// Fold-averaged validation loss per grid value.
    pub losses: Vec<f64>,
}

/// Server-side solve for candidate `lambda` with fold `held` left out.
pub fn solve_without_fold(folds: &[Vec<FoldSurrogate>], weights: &[f64], held: usize, lambda: f64) -> Result<FusionSolution> {
    let surrogates = folds
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(k, (f, &w))| crate::moments::combine_fold_surrogates(k, f, Some(held), w))
        .collect::<Result<Vec<_>>>()?;
    solve_fusion(&FusionProblem { surrogates, lambda })
}

/// Held-out fold loss of one task at its fused estimate.
pub fn validation_loss(fold: &FoldSurrogate, u: &[f64]) -> f64 {
    fold.normalized(0).value(&DVector::from_column_slice(u))
}

/// Leave-one-fold-out selection of λ: solve without fold `j`, score every
/// task on fold `j`'s surrogate, weight by `w_k`, average over folds.
/// `folds[k]` holds task `k`'s per-fold surrogates.
pub fn tune_lambda(folds: &[Vec<FoldSurrogate>], weights: &[f64], grid: &[f64]) -> Result<LambdaSelection> {
    check_grid(grid)?;
    if folds.is_empty() || weights.len() != folds.len() {
        return Err(Error::InvalidConfig("one weight and one fold list per task".into()));
    }
    let j_count = folds[0].len();
    if j_count < 2 || folds.iter().any(|f| f.len() != j_count) {
        return Err(Error::InvalidConfig("λ tuning needs the same J ≥ 2 folds for every task".into()));
    }
    let losses = grid
        .par_iter()
        .map(|&lambda| {
            let mut total = 0.0;
            for j in 0..j_count {
                let sol = solve_without_fold(folds, weights, j, lambda)?;
                let mut loss = 0.0;
                for (k, f) in folds.iter().enumerate() {
                    loss += weights[k] * validation_loss(&f[j], &sol.u[k]);
                }
                total += loss;
            }
            Ok(total / j_count as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let best = argmin_prefer_last(&losses);
    Ok(LambdaSelection { lambda: grid[best], grid: grid.to_vec(), losses })
}
