//! Quadratic surrogates `ρ(u) = Gᵀu + ½uᵀWu` built from the cross-fitted
//! moments. They are assembled from per-fold sums so the server can drop a
//! fold for validation without another round trip.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::initial::InitialFit;
use super::moment::{moment_at_row, moment_curvature};
use crate::data::{FoldPlan, ModelKind, TaskDataset};
use crate::error::{Error, Result};

/// Eigenvalues of `W` below this are treated as an orientation failure.
pub const ORIENTATION_TOL: f64 = -1e-8;

/// Unnormalized fold contribution: `g_sum = Σ m − D θ̃`, `w_sum = D`, where
/// `D` is the symmetrized sum of moment Jacobians over fold members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSurrogate {
    pub fold: usize,
    pub count: usize,
    pub g_sum: Vec<f64>,
    /// Row-major `d×d`.
    pub w_sum: Vec<f64>,
}

impl FoldSurrogate {
    pub fn dim(&self) -> usize {
        self.g_sum.len()
    }

    /// Surrogate of this fold alone, used as the held-out validation loss.
    pub fn normalized(&self, task_id: usize) -> QuadraticSurrogate {
        let c = self.count.max(1) as f64;
        let d = self.dim();
        QuadraticSurrogate {
            task_id,
            g: DVector::from_iterator(d, self.g_sum.iter().map(|v| v / c)),
            w: DMatrix::from_row_slice(d, d, &self.w_sum).map(|v| v / c),
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSurrogate {
    pub task_id: usize,
    pub g: DVector<f64>,
    pub w: DMatrix<f64>,
    pub weight: f64,
}

impl QuadraticSurrogate {
    pub fn new(task_id: usize, g: DVector<f64>, w: DMatrix<f64>, weight: f64) -> Result<Self> {
        let s = Self { task_id, g, w, weight };
        s.validate()?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        self.g.dot(u) + 0.5 * u.dot(&(&self.w * u))
    }

    /// Unpenalized minimizer `-W⁻¹G`.
    pub fn minimizer(&self) -> Result<DVector<f64>> {
        // nalgebra's SVD does not terminate on non-finite input.
        if self.g.iter().chain(self.w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("surrogate has non-finite entries".into()));
        }
        let sol = self
            .w
            .clone()
            .svd(true, true)
            .solve(&(-&self.g), 1e-14)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("surrogate minimizer is not finite".into()));
        }
        Ok(sol)
    }

    /// Shape, symmetry, finiteness and orientation checks.
    pub fn validate(&self) -> Result<()> {
        let d = self.g.len();
        if self.w.nrows() != d || self.w.ncols() != d {
            return Err(Error::Dimension(format!("W is {}×{}, G has length {d}", self.w.nrows(), self.w.ncols())));
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(Error::InvalidConfig(format!("surrogate weight {} must be positive", self.weight)));
        }
        if self.g.iter().chain(self.w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("surrogate has non-finite entries".into()));
        }
        let scale = self.w.amax().max(1.0);
        if (&self.w - self.w.transpose()).amax() > 1e-10 * scale {
            return Err(Error::Numerical("W is not symmetric".into()));
        }
        let min_eig = min_eigenvalue(&self.w);
        if min_eig < ORIENTATION_TOL {
            return Err(Error::Orientation(min_eig));
        }
        Ok(())
    }
}

pub(crate) fn min_eigenvalue(w: &DMatrix<f64>) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    w.clone().symmetric_eigen().eigenvalues.min()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Per-fold surrogate sums, each evaluated with that fold's `θ̃^(j)` and
/// half-averaged nuisances.
pub fn build_fold_surrogates(data: &TaskDataset, plan: &FoldPlan, init: &InitialFit, kind: ModelKind) -> Result<Vec<FoldSurrogate>> {
    data.check_kind(kind)?;
    if init.kind != kind {
        return Err(Error::InvalidConfig(format!("initial fit is for {}, surrogate requested for {kind}", init.kind)));
    }
    if init.folds.len() != plan.folds() || plan.n() != data.n() {
        return Err(Error::Dimension("initial fit does not match the fold plan".into()));
    }
    let d = kind.param_dim(data.p());
    let mut out = Vec::with_capacity(plan.folds());
    for (j, fold) in init.folds.iter().enumerate() {
        let theta = &fold.theta.theta;
        let mut m_sum = DVector::zeros(d);
        let mut d_sum = DMatrix::zeros(d, d);
        for &i in plan.fold(j) {
            let x = data.row(i);
            let (t, y) = (data.treatment(i), data.y()[i]);
            m_sum += DVector::from_vec(moment_at_row(kind, &x, t, y, theta, &fold.nuisance)?);
            d_sum += moment_curvature(kind, &x, t, theta, &fold.nuisance)?;
        }
        let w = symmetrize(&d_sum);
        let free = DVector::from_column_slice(fold.theta.free(kind));
        let g = m_sum - &w * free;
        out.push(FoldSurrogate {
            fold: j,
            count: plan.fold(j).len(),
            g_sum: g.iter().copied().collect(),
            w_sum: w.transpose().iter().copied().collect(),
        });
    }
    Ok(out)
}

/// Sums the fold pieces (optionally leaving one out) and normalizes by the
/// number of contributing samples.
pub fn combine_fold_surrogates(task_id: usize, folds: &[FoldSurrogate], exclude: Option<usize>, weight: f64) -> Result<QuadraticSurrogate> {
    let d = folds.first().ok_or_else(|| Error::InvalidConfig("no fold surrogates".into()))?.dim();
    let mut g = DVector::zeros(d);
    let mut w = DMatrix::zeros(d, d);
    let mut count = 0;
    for f in folds.iter().filter(|f| Some(f.fold) != exclude) {
        if f.dim() != d || f.w_sum.len() != d * d {
            return Err(Error::Dimension("fold surrogates disagree in dimension".into()));
        }
        g += DVector::from_column_slice(&f.g_sum);
        w += DMatrix::from_row_slice(d, d, &f.w_sum);
        count += f.count;
    }
    if count == 0 {
        return Err(Error::InvalidConfig("no samples left after excluding the validation fold".into()));
    }
    let n = count as f64;
    QuadraticSurrogate::new(task_id, g / n, symmetrize(&w) / n, weight)
}

/// Full-sample surrogate with unit weight.
pub fn build_surrogate(data: &TaskDataset, plan: &FoldPlan, init: &InitialFit, kind: ModelKind) -> Result<QuadraticSurrogate> {
    let folds = build_fold_surrogates(data, plan, init, kind)?;
    combine_fold_surrogates(data.task_id(), &folds, None, 1.0)
}
