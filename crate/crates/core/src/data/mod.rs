//! Domain types shared by every stage of the pipeline: per-task samples,
//! model kinds, parameter vectors and cross-fitting fold plans.

mod folds;
mod io;

pub use folds::{make_fold_plan, FoldPlan};
pub use io::{read_dataset_csv, write_dataset_csv};

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which estimating equation is used for the parameter of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Partially linear model, scalar effect of `t`.
    Plm,
    /// Single-index regression `y = f(x'θ) + ε`.
    Sim,
    /// Single-index conditional treatment effect with `t ∈ {-1, +1}`.
    CateSim,
}

impl ModelKind {
    /// Number of free coordinates the fusion algebra works on.
    pub fn param_dim(self, p: usize) -> usize {
        match self {
            ModelKind::Plm => 1,
            ModelKind::Sim | ModelKind::CateSim => p.saturating_sub(1),
        }
    }

    pub fn needs_treatment(self) -> bool {
        !matches!(self, ModelKind::Sim)
    }

    pub fn is_single_index(self) -> bool {
        !matches!(self, ModelKind::Plm)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Plm => "plm",
            ModelKind::Sim => "sim",
            ModelKind::CateSim => "cate-sim",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plm" => Ok(ModelKind::Plm),
            "sim" => Ok(ModelKind::Sim),
            "cate-sim" | "cate_sim" | "catesim" => Ok(ModelKind::CateSim),
            other => Err(Error::InvalidConfig(format!("unknown model kind `{other}`"))),
        }
    }
}

/// One task's private sample. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    task_id: usize,
    x: DMatrix<f64>,
    t: Option<DVector<f64>>,
    y: DVector<f64>,
}

impl TaskDataset {
    pub fn new(
        task_id: usize,
        x: DMatrix<f64>,
        t: Option<DVector<f64>>,
        y: DVector<f64>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::InvalidConfig("a dataset needs at least one row".into()));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidConfig("a dataset needs at least one covariate".into()));
        }
        if y.len() != n {
            return Err(Error::Dimension(format!("y has {} entries, X has {n} rows", y.len())));
        }
        if let Some(t) = &t {
            if t.len() != n {
                return Err(Error::Dimension(format!("t has {} entries, X has {n} rows", t.len())));
            }
        }
        for i in 0..n {
            let row_ok = x.row(i).iter().all(|v| v.is_finite())
                && y[i].is_finite()
                && t.as_ref().is_none_or(|t| t[i].is_finite());
            if !row_ok {
                return Err(Error::Parse { row: i + 1, message: "non-finite value".into() });
            }
        }
        Ok(Self { task_id, x, t, y })
    }

    /// Builds a dataset from row-major covariates.
    pub fn from_rows(
        task_id: usize,
        rows: &[Vec<f64>],
        t: Option<Vec<f64>>,
        y: Vec<f64>,
    ) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != p) {
            return Err(Error::Parse { row: i + 1, message: format!("expected {p} covariates") });
        }
        let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        Self::new(task_id, x, t.map(DVector::from_vec), DVector::from_vec(y))
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn t(&self) -> Option<&DVector<f64>> {
        self.t.as_ref()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Treatment value of row `i`; zero when the dataset carries no treatment.
    pub fn treatment(&self, i: usize) -> f64 {
        self.t.as_ref().map_or(0.0, |t| t[i])
    }

    /// Row-major copy of the selected covariate rows.
    pub fn rows_flat(&self, idx: &[usize]) -> Vec<f64> {
        let p = self.p();
        let mut out = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            out.extend((0..p).map(|j| self.x[(i, j)]));
        }
        out
    }

    /// Checks that the fields required by `kind` are present and well-formed.
    pub fn check_kind(&self, kind: ModelKind) -> Result<()> {
        if kind.needs_treatment() && self.t.is_none() {
            return Err(Error::MissingColumn("t".into()));
        }
        if kind.is_single_index() && self.p() < 2 {
            return Err(Error::InvalidConfig("single-index models need p >= 2".into()));
        }
        if kind == ModelKind::CateSim {
            let t = self.t.as_ref().expect("checked above");
            if let Some(i) = t.iter().position(|&v| v != 1.0 && v != -1.0) {
                return Err(Error::Parse {
                    row: i + 1,
                    message: "treatment must be -1 or +1 for cate-sim".into(),
                });
            }
        }
        Ok(())
    }
}

/// Parameter of interest. Single-index parameters are stored in full with
/// the first coordinate pinned to exactly one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub theta: Vec<f64>,
}

impl ParamEstimate {
    pub fn scalar(theta: f64) -> Self {
        Self { theta: vec![theta] }
    }

    /// Rebuilds a parameter from its free coordinates.
    pub fn from_free(kind: ModelKind, free: &[f64]) -> Self {
        match kind {
            ModelKind::Plm => Self { theta: free.to_vec() },
            ModelKind::Sim | ModelKind::CateSim => {
                let mut theta = Vec::with_capacity(free.len() + 1);
                theta.push(1.0);
                theta.extend_from_slice(free);
                Self { theta }
            }
        }
    }

    /// Rescales a raw single-index direction so that its first coordinate is one.
    pub fn pinned(raw: &[f64]) -> Result<Self> {
        let lead = *raw.first().ok_or_else(|| Error::Dimension("empty parameter".into()))?;
        if lead == 0.0 || !lead.is_finite() {
            return Err(Error::Numerical("cannot pin a direction with zero first coordinate".into()));
        }
        let mut theta: Vec<f64> = raw.iter().map(|v| v / lead).collect();
        theta[0] = 1.0;
        Ok(Self { theta })
    }

    pub fn free(&self, kind: ModelKind) -> &[f64] {
        match kind {
            ModelKind::Plm => &self.theta,
            ModelKind::Sim | ModelKind::CateSim => &self.theta[1..],
        }
    }
}

/// Similarity knobs of the simulator: fraction of outlier tasks and the
/// spread of the similar ones, for parameters and nuisances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub eps_task: f64,
    pub delta_task: f64,
    pub eps_nuis: f64,
    pub delta_nuis: f64,
}

impl SimilarityConfig {
    pub fn new(eps_task: f64, delta_task: f64, eps_nuis: f64, delta_nuis: f64) -> Result<Self> {
        let fraction = |v: f64| (0.0..=1.0).contains(&v);
        if !fraction(eps_task) || !fraction(eps_nuis) {
            return Err(Error::InvalidConfig("outlier fractions must lie in [0, 1]".into()));
        }
        if !(delta_task >= 0.0 && delta_nuis >= 0.0) {
            return Err(Error::InvalidConfig("similarity radii must be nonnegative".into()));
        }
        Ok(Self { eps_task, delta_task, eps_nuis, delta_nuis })
    }
}
