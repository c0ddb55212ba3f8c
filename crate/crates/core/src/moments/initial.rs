//! Individual-task cross-fitted initial estimators.
//!
//! For every outer fold `j` the complement is split into halves `M1`, `M2`.
//! Nuisances trained on one half are used to evaluate the moment on the
//! other half, and `θ̃^(j)` solves
//! `mean_{M1} m(θ; η^(M2)) + mean_{M2} m(θ; η^(M1)) = 0`.
//! The fold-level bundle `η̃^(j)` is the pointwise average of both halves.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::moment::moment_at_row;
use super::nuisance::{
    clip_propensity, CovariateNuisances, IndexSmoother, MeanRegressor, NuisanceSet, SharedIndexNuisance,
    SharedRegressor,
};
use crate::data::{FoldPlan, ModelKind, ParamEstimate, TaskDataset};
use crate::error::{Error, Result};
use crate::kernel::{cv_bandwidth_flat, cv_select, default_bandwidths, gather, kernel_weights, nearest_row, KernelFit, KernelKind};

/// How kernel bandwidths are chosen for nuisance fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthPolicy {
    Fixed(f64),
    /// k-fold cross-validation over the default candidate grid.
    CrossValidated { folds: usize, seed: u64 },
}

impl Default for BandwidthPolicy {
    fn default() -> Self {
        BandwidthPolicy::CrossValidated { folds: 5, seed: 0 }
    }
}

impl BandwidthPolicy {
    /// Bandwidth for a Nadaraya–Watson fit of `y` on row-major `rows`.
    pub fn select(&self, rows: &[f64], p: usize, y: &[f64]) -> Result<f64> {
        match *self {
            BandwidthPolicy::Fixed(h) => Ok(h),
            BandwidthPolicy::CrossValidated { folds, seed } => {
                let cands = default_bandwidths(rows, p);
                if y.len() < 4 {
                    return Ok(cands[2]);
                }
                Ok(cv_bandwidth_flat(rows, p, y, &cands, folds, seed)?.0)
            }
        }
    }
}

/// Per-fold output of the individual-task fit.
#[derive(Debug, Clone)]
pub struct FoldFit {
    pub theta: ParamEstimate,
    /// Half-averaged nuisance bundle used on the held-out fold.
    pub nuisance: NuisanceSet,
    pub converged: bool,
    pub iterations: usize,
    pub step_norms: Vec<f64>,
    /// Norm of the cross-fitted sample moment at the initializer and at the
    /// returned iterate, both with the final nuisance fits.
    pub moment_norm_init: f64,
    pub moment_norm_final: f64,
}

#[derive(Debug, Clone)]
pub struct InitialFit {
    pub kind: ModelKind,
    pub folds: Vec<FoldFit>,
    /// Fold average of the free coordinates.
    pub pooled: ParamEstimate,
}

impl InitialFit {
    pub fn from_folds(kind: ModelKind, folds: Vec<FoldFit>) -> Result<Self> {
        let first = folds.first().ok_or_else(|| Error::InvalidConfig("no folds".into()))?;
        let d = first.theta.free(kind).len();
        let mut mean = vec![0.0; d];
        for f in &folds {
            let free = f.theta.free(kind);
            if free.len() != d || free.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("fold estimate is not finite".into()));
            }
            for (m, v) in mean.iter_mut().zip(free) {
                *m += v / folds.len() as f64;
            }
        }
        Ok(Self { kind, pooled: ParamEstimate::from_free(kind, &mean), folds })
    }
}

fn bundle(kind: ModelKind, cov: &CovariateNuisances, index: Option<SharedIndexNuisance>) -> Result<NuisanceSet> {
    match kind {
        ModelKind::Plm => Ok(NuisanceSet::Plm { mu: cov.mu.clone(), g: cov.aux.clone() }),
        ModelKind::Sim => Ok(NuisanceSet::Sim { index: index.expect("index nuisance") }),
        ModelKind::CateSim => Ok(NuisanceSet::CateSim {
            mu: cov.mu.clone(),
            propensity: cov.aux.clone(),
            index: index.expect("index nuisance"),
        }),
    }
}

fn nw_regressor(data: &TaskDataset, idx: &[usize], y: &[f64], policy: &BandwidthPolicy) -> Result<SharedRegressor> {
    if idx.is_empty() {
        return Err(Error::DegenerateDesign("empty training set for a nuisance fit".into()));
    }
    let rows = data.rows_flat(idx);
    let h = policy.select(&rows, data.p(), y)?;
    Ok(Arc::new(KernelFit::from_flat(rows, data.p(), y.to_vec(), h, KernelKind::NadarayaWatson)?))
}

/// Kernel fits of the covariate-level nuisances on the samples `idx`.
pub fn kernel_covariate_nuisances(
    data: &TaskDataset,
    idx: &[usize],
    kind: ModelKind,
    policy: &BandwidthPolicy,
) -> Result<CovariateNuisances> {
    let t = data.t().ok_or_else(|| Error::MissingColumn("t".into()))?;
    match kind {
        ModelKind::Plm => {
            let ys: Vec<f64> = idx.iter().map(|&i| data.y()[i]).collect();
            let ts: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
            Ok(CovariateNuisances { mu: nw_regressor(data, idx, &ys, policy)?, aux: nw_regressor(data, idx, &ts, policy)? })
        }
        ModelKind::CateSim => {
            let (treated, control): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| t[i] > 0.0);
            if treated.is_empty() || control.is_empty() {
                return Err(Error::DegenerateDesign("a treatment arm is empty in a nuisance half".into()));
            }
            let arm = |members: &[usize]| {
                let ys: Vec<f64> = members.iter().map(|&i| data.y()[i]).collect();
                nw_regressor(data, members, &ys, policy)
            };
            let mu: SharedRegressor = Arc::new(MeanRegressor(vec![arm(&treated)?, arm(&control)?]));
            let ind: Vec<f64> = idx.iter().map(|&i| if t[i] > 0.0 { 1.0 } else { 0.0 }).collect();
            Ok(CovariateNuisances { mu, aux: clip_propensity(nw_regressor(data, idx, &ind, policy)?) })
        }
        ModelKind::Sim => Err(Error::InvalidConfig("the single-index regression model has no covariate-level nuisances".into())),
    }
}

/// Kernel covariate nuisances for both halves of every fold; entry `[m]`
/// is trained on half `m`.
pub fn kernel_halves(
    data: &TaskDataset,
    plan: &FoldPlan,
    kind: ModelKind,
    policy: &BandwidthPolicy,
) -> Result<Vec<[CovariateNuisances; 2]>> {
    (0..plan.folds())
        .map(|j| {
            let [m1, m2] = plan.halves(j);
            Ok([
                kernel_covariate_nuisances(data, m1, kind, policy)?,
                kernel_covariate_nuisances(data, m2, kind, policy)?,
            ])
        })
        .collect()
}

fn check_plan(data: &TaskDataset, plan: &FoldPlan) -> Result<()> {
    if plan.n() != data.n() {
        return Err(Error::Dimension(format!("fold plan covers {} samples, dataset has {}", plan.n(), data.n())));
    }
    Ok(())
}

/// Cross-fitted partially linear estimator with kernel nuisances.
pub fn fit_initial_plm(data: &TaskDataset, plan: &FoldPlan, policy: &BandwidthPolicy) -> Result<InitialFit> {
    data.check_kind(ModelKind::Plm)?;
    check_plan(data, plan)?;
    let halves = kernel_halves(data, plan, ModelKind::Plm, policy)?;
    fit_initial_plm_with(data, plan, &halves)
}

/// Partially linear estimator with externally supplied half nuisances
/// (kernel fits, fused grid fits, or oracles).
pub fn fit_initial_plm_with(data: &TaskDataset, plan: &FoldPlan, halves: &[[CovariateNuisances; 2]]) -> Result<InitialFit> {
    data.check_kind(ModelKind::Plm)?;
    check_plan(data, plan)?;
    if halves.len() != plan.folds() {
        return Err(Error::Dimension("one pair of half nuisances is needed per fold".into()));
    }
    let t = data.t().expect("checked");
    let mut folds = Vec::with_capacity(plan.folds());
    for (j, pair) in halves.iter().enumerate() {
        let (mut num, mut den) = (0.0, 0.0);
        for m in 0..2 {
            let members = &plan.halves(j)[m];
            if members.is_empty() {
                continue;
            }
            let other = &pair[1 - m];
            let (mut a, mut b) = (0.0, 0.0);
            for &i in members {
                let x = data.row(i);
                let r = t[i] - other.aux.predict(&x);
                a += r * (data.y()[i] - other.mu.predict(&x));
                b += r * r;
            }
            num += a / members.len() as f64;
            den += b / members.len() as f64;
        }
        if !(den >= 1e-12) {
            return Err(Error::DegenerateDesign(format!("exposure residuals vanish in fold {j}")));
        }
        let theta = num / den;
        let bundles = [bundle(ModelKind::Plm, &pair[0], None)?, bundle(ModelKind::Plm, &pair[1], None)?];
        folds.push(FoldFit {
            theta: ParamEstimate::scalar(theta),
            nuisance: NuisanceSet::average(&bundles[0], &bundles[1])?,
            converged: true,
            iterations: 1,
            step_norms: Vec::new(),
            moment_norm_init: f64::NAN,
            moment_norm_final: (den * theta - num).abs(),
        });
    }
    InitialFit::from_folds(ModelKind::Plm, folds)
}

/// Produces index-level nuisances at a given direction θ.
pub trait IndexFitter: Sync {
    /// `bandwidths` is `None` on the first call for a half and is filled in
    /// by fitters that select bandwidths, so later iterations reuse them.
    fn fit(
        &self,
        data: &TaskDataset,
        train: &[usize],
        theta: &[f64],
        covariates: Option<&CovariateNuisances>,
        bandwidths: &mut Option<(f64, f64)>,
    ) -> Result<SharedIndexNuisance>;
}

/// Local-linear link and Nadaraya–Watson centering on the index.
#[derive(Debug, Clone, Copy, Default)]
pub struct KernelIndexFitter {
    pub policy: BandwidthPolicy,
}

/// Outcome whose conditional mean given the index is the link function:
/// `y` itself, or the inverse-propensity pseudo-outcome `t(y - μ)/π(t, x)`.
fn link_target(data: &TaskDataset, i: usize, x: &[f64], covariates: Option<&CovariateNuisances>) -> f64 {
    match covariates {
        None => data.y()[i],
        Some(cov) => {
            let t = data.treatment(i);
            let treated = cov.aux.predict(x);
            let pi = if t > 0.0 { treated } else { 1.0 - treated };
            t * (data.y()[i] - cov.mu.predict(x)) / pi
        }
    }
}

impl IndexFitter for KernelIndexFitter {
    fn fit(
        &self,
        data: &TaskDataset,
        train: &[usize],
        theta: &[f64],
        covariates: Option<&CovariateNuisances>,
        bandwidths: &mut Option<(f64, f64)>,
    ) -> Result<SharedIndexNuisance> {
        let p = data.p();
        let width = p - 1;
        let mut index = Vec::with_capacity(train.len());
        let mut target = Vec::with_capacity(train.len());
        let mut tail = Vec::with_capacity(train.len() * width);
        for &i in train {
            let x = data.row(i);
            index.push(x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>());
            target.push(link_target(data, i, &x, covariates));
            tail.extend_from_slice(&x[1..]);
        }
        let first = index[0];
        if index.iter().all(|&s| s == first) {
            return Err(Error::Rank("index takes a single value on a nuisance half".into()));
        }
        let (h_link, h_center) = match *bandwidths {
            Some(bw) => bw,
            None => {
                let bw = match self.policy {
                    BandwidthPolicy::Fixed(h) => (h, h),
                    BandwidthPolicy::CrossValidated { folds, seed } => {
                        let cands = default_bandwidths(&index, 1);
                        if index.len() < 4 {
                            (cands[2], cands[2])
                        } else {
                            (
                                cv_local_linear(&index, &target, &cands, folds, seed)?,
                                cv_multi_output(&index, &tail, width, &cands, folds, seed)?,
                            )
                        }
                    }
                };
                *bandwidths = Some(bw);
                bw
            }
        };
        let link = KernelFit::from_flat(index.clone(), 1, target, h_link, KernelKind::LocalLinear)?;
        Ok(Arc::new(IndexSmoother::new(link, index, tail, width, h_center)?))
    }
}

fn cv_local_linear(s: &[f64], y: &[f64], cands: &[f64], folds: usize, seed: u64) -> Result<f64> {
    Ok(cv_select(s.len(), cands, folds, seed, |train, test, h| {
        let (ts, ty) = gather(s, 1, y, train);
        let fit = match KernelFit::from_flat(ts, 1, ty, h, KernelKind::LocalLinear) {
            Ok(f) => f,
            Err(_) => return f64::INFINITY,
        };
        test.iter().map(|&i| (y[i] - fit.local_linear_at(s[i]).0).powi(2)).sum()
    })?
    .0)
}

fn cv_multi_output(s: &[f64], tail: &[f64], width: usize, cands: &[f64], folds: usize, seed: u64) -> Result<f64> {
    Ok(cv_select(s.len(), cands, folds, seed, |train, test, h| {
        let ts: Vec<f64> = train.iter().map(|&i| s[i]).collect();
        let mut sse = 0.0;
        for &i in test {
            let pred: Vec<f64> = match kernel_weights(&ts, 1, h, &[s[i]]) {
                Some(w) => (0..width)
                    .map(|c| w.iter().zip(train).map(|(wk, &k)| wk * tail[k * width + c]).sum())
                    .collect(),
                None => {
                    let k = train[nearest_row(&ts, 1, &[s[i]])];
                    tail[k * width..(k + 1) * width].to_vec()
                }
            };
            sse += pred.iter().enumerate().map(|(c, v)| (tail[i * width + c] - v).powi(2)).sum::<f64>();
        }
        sse
    })?
    .0)
}

#[derive(Debug, Clone)]
pub struct SingleIndexOptions {
    pub max_outer: usize,
    /// Starting direction (full length, first coordinate one). Defaults to
    /// the rescaled least-squares slope.
    pub init: Option<Vec<f64>>,
}

impl Default for SingleIndexOptions {
    fn default() -> Self {
        Self { max_outer: 50, init: None }
    }
}

/// Cross-fitted single-index estimator with kernel nuisances.
pub fn fit_initial_single_index(
    data: &TaskDataset,
    plan: &FoldPlan,
    kind: ModelKind,
    policy: &BandwidthPolicy,
    max_outer: usize,
) -> Result<InitialFit> {
    data.check_kind(kind)?;
    check_plan(data, plan)?;
    let covariates = match kind {
        ModelKind::CateSim => Some(kernel_halves(data, plan, kind, policy)?),
        ModelKind::Sim => None,
        ModelKind::Plm => return Err(Error::InvalidConfig("use fit_initial_plm for the partially linear model".into())),
    };
    fit_initial_single_index_with(
        data,
        plan,
        kind,
        covariates.as_deref(),
        &KernelIndexFitter { policy: *policy },
        &SingleIndexOptions { max_outer, init: None },
    )
}

/// Stopping threshold on the Gauss–Newton step norm.
pub const STEP_TOL: f64 = 1e-6;
/// Largest Jacobian condition number accepted.
pub const MAX_CONDITION: f64 = 1e12;
const MAX_HALVINGS: usize = 20;

struct HalfState<'a> {
    data: &'a TaskDataset,
    kind: ModelKind,
    halves: &'a [Vec<usize>; 2],
}

impl HalfState<'_> {
    /// Cross-fitted sample moment; `etas[m]` was trained on half `m`.
    fn moment(&self, theta: &[f64], etas: &[NuisanceSet; 2]) -> Result<DVector<f64>> {
        let d = theta.len() - 1;
        let mut total = DVector::zeros(d);
        for m in 0..2 {
            let members = &self.halves[m];
            let mut part = DVector::zeros(d);
            for &i in members {
                let x = self.data.row(i);
                let v = moment_at_row(self.kind, &x, self.data.treatment(i), self.data.y()[i], theta, &etas[1 - m])?;
                part += DVector::from_vec(v);
            }
            total += part / members.len() as f64;
        }
        Ok(total)
    }

    fn jacobian(&self, theta: &[f64], etas: &[NuisanceSet; 2]) -> Result<DMatrix<f64>> {
        let d = theta.len() - 1;
        let mut jac = DMatrix::zeros(d, d);
        let mut th = theta.to_vec();
        for b in 0..d {
            let c = b + 1;
            let step = super::moment::FD_STEP * (1.0 + theta[c].abs());
            th[c] = theta[c] + step;
            let plus = self.moment(&th, etas)?;
            th[c] = theta[c] - step;
            let minus = self.moment(&th, etas)?;
            th[c] = theta[c];
            jac.set_column(b, &((plus - minus) / (2.0 * step)));
        }
        Ok(jac)
    }
}

/// Least-squares slope of the outcome (or pseudo-outcome) on the covariates,
/// rescaled to a unit first coordinate.
fn least_squares_direction(rows: &[Vec<f64>], target: &[f64]) -> Vec<f64> {
    let p = rows[0].len();
    let n = rows.len();
    let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let rhs = DVector::from_column_slice(target);
    let fallback = || {
        let mut e = vec![0.0; p];
        e[0] = 1.0;
        e
    };
    let Ok(beta) = design.svd(true, true).solve(&rhs, 1e-12) else {
        return fallback();
    };
    let lead = beta[1];
    if !(lead.abs() >= 1e-6) || beta.iter().any(|v| !v.is_finite()) {
        return fallback();
    }
    let mut theta: Vec<f64> = (1..=p).map(|j| beta[j] / lead).collect();
    theta[0] = 1.0;
    theta
}

fn condition_number(jac: &DMatrix<f64>) -> f64 {
    let sv = jac.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Single-index estimator with pluggable nuisance fitting. `covariates`
/// supplies the half-level outcome and propensity fits for the
/// treatment-effect model and must be `None` for the regression model.
pub fn fit_initial_single_index_with(
    data: &TaskDataset,
    plan: &FoldPlan,
    kind: ModelKind,
    covariates: Option<&[[CovariateNuisances; 2]]>,
    fitter: &dyn IndexFitter,
    opts: &SingleIndexOptions,
) -> Result<InitialFit> {
    data.check_kind(kind)?;
    check_plan(data, plan)?;
    if kind == ModelKind::CateSim && covariates.is_none() {
        return Err(Error::InvalidConfig("the treatment-effect model needs outcome and propensity nuisances".into()));
    }
    let p = data.p();
    let mut folds = Vec::with_capacity(plan.folds());
    for j in 0..plan.folds() {
        let halves = plan.halves(j);
        if halves[0].is_empty() || halves[1].is_empty() {
            return Err(Error::DegenerateDesign(format!("fold {j} has an empty nuisance half")));
        }
        let cov = covariates.map(|c| &c[j]);
        let cov_half = |m: usize| cov.map(|c| &c[m]);
        let state = HalfState { data, kind, halves };

        let init = match &opts.init {
            Some(th) => {
                if th.len() != p || th[0] != 1.0 {
                    return Err(Error::InvalidConfig("initial direction must have length p and lead 1".into()));
                }
                th.clone()
            }
            None => {
                let mut rows = Vec::new();
                let mut target = Vec::new();
                for m in 0..2 {
                    for &i in &halves[m] {
                        let x = data.row(i);
                        target.push(link_target(data, i, &x, cov_half(1 - m)));
                        rows.push(x);
                    }
                }
                least_squares_direction(&rows, &target)
            }
        };

        let mut bandwidths = [None, None];
        let fit_etas = |theta: &[f64], bw: &mut [Option<(f64, f64)>; 2]| -> Result<[NuisanceSet; 2]> {
            let mut out = Vec::with_capacity(2);
            for m in 0..2 {
                let index = fitter.fit(data, &halves[m], theta, cov_half(m), &mut bw[m])?;
                let bundle = match (kind, cov_half(m)) {
                    (ModelKind::CateSim, Some(c)) => bundle(kind, c, Some(index))?,
                    _ => NuisanceSet::Sim { index },
                };
                out.push(bundle);
            }
            Ok([out[0].clone(), out[1].clone()])
        };

        let mut theta = init.clone();
        let mut step_norms = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        for _ in 0..opts.max_outer {
            iterations += 1;
            let etas = fit_etas(&theta, &mut bandwidths)?;
            let current = state.moment(&theta, &etas)?;
            let jac = state.jacobian(&theta, &etas)?;
            // A degenerate Jacobian mid-run ends the search at the last
            // accepted iterate; only a degenerate start is an error.
            let finite = current.iter().chain(jac.iter()).all(|v| v.is_finite());
            let cond = if finite { condition_number(&jac) } else { f64::INFINITY };
            if cond > MAX_CONDITION {
                if iterations == 1 {
                    return Err(if finite {
                        Error::IllConditioned(cond)
                    } else {
                        Error::Numerical(format!("single-index moment is not finite at fold {j}"))
                    });
                }
                log::warn!("single-index Jacobian degenerate (cond {cond:.3e}) at task {} fold {j}", data.task_id());
                break;
            }
            let step = jac
                .svd(true, true)
                .solve(&(-&current), 0.0)
                .map_err(|e| Error::Numerical(e.to_string()))?;
            let base = current.norm();
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let trial: Vec<f64> = std::iter::once(1.0)
                    .chain(theta[1..].iter().zip(step.iter()).map(|(t, s)| t + alpha * s))
                    .collect();
                if state.moment(&trial, &etas)?.norm() < base {
                    accepted = Some(trial);
                    break;
                }
                alpha *= 0.5;
            }
            let step_norm = alpha * step.norm();
            step_norms.push(match accepted {
                Some(_) => step_norm,
                None => 0.0,
            });
            match accepted {
                Some(next) => theta = next,
                None => {
                    converged = step.norm() < STEP_TOL;
                    break;
                }
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("single-index iterate diverged".into()));
            }
            if step_norm < STEP_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            log::debug!("single-index fit for task {} fold {j} stopped after {iterations} iterations", data.task_id());
        }
        let etas = fit_etas(&theta, &mut bandwidths)?;
        let moment_norm_init = state.moment(&init, &etas)?.norm();
        let moment_norm_final = state.moment(&theta, &etas)?.norm();
        folds.push(FoldFit {
            theta: ParamEstimate { theta },
            nuisance: NuisanceSet::average(&etas[0], &etas[1])?,
            converged,
            iterations,
            step_norms,
            moment_norm_init,
            moment_norm_final,
        });
    }
    InitialFit::from_folds(kind, folds)
}
