//! Plug-in nuisance functions. Every component is a shared, immutable
//! predictor, so the same fitted bundle can be evaluated from many threads.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernel::{kernel_weights, nearest_row, KernelFit};

/// Overlap bounds applied to estimated propensities.
pub const PROPENSITY_CLIP: (f64, f64) = (0.05, 0.95);

/// A real-valued function of the covariates.
pub trait Regressor: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;
}

pub type SharedRegressor = Arc<dyn Regressor>;

impl Regressor for KernelFit {
    fn predict(&self, x: &[f64]) -> f64 {
        self.nw_at(x).0
    }
}

/// Wraps a closure, mostly for oracle nuisances in tests and simulations.
pub struct FnRegressor<F>(pub F);

impl<F> Regressor for FnRegressor<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn predict(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// Pointwise mean of several predictors.
pub struct MeanRegressor(pub Vec<SharedRegressor>);

impl Regressor for MeanRegressor {
    fn predict(&self, x: &[f64]) -> f64 {
        self.0.iter().map(|r| r.predict(x)).sum::<f64>() / self.0.len() as f64
    }
}

pub struct ClippedRegressor {
    pub inner: SharedRegressor,
    pub lo: f64,
    pub hi: f64,
}

impl Regressor for ClippedRegressor {
    fn predict(&self, x: &[f64]) -> f64 {
        self.inner.predict(x).clamp(self.lo, self.hi)
    }
}

pub fn regressor<F>(f: F) -> SharedRegressor
where
    F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
{
    Arc::new(FnRegressor(f))
}

pub fn clip_propensity(inner: SharedRegressor) -> SharedRegressor {
    Arc::new(ClippedRegressor { inner, lo: PROPENSITY_CLIP.0, hi: PROPENSITY_CLIP.1 })
}

/// Nuisances that live on the single index `s = x'θ`: the link `f` with its
/// derivative, and the centering function `g(s) = E[x̃ | s]`.
pub trait IndexNuisance: Send + Sync {
    /// `(f(s), f'(s))`.
    fn link(&self, s: f64) -> (f64, f64);
    /// Writes `g(s)` (length `p - 1`) into `out`.
    fn center(&self, s: f64, out: &mut [f64]);
}

pub type SharedIndexNuisance = Arc<dyn IndexNuisance>;

/// Local-linear link plus Nadaraya–Watson centering, both on a 1-D index.
pub struct IndexSmoother {
    link: KernelFit,
    index: Vec<f64>,
    tail: Vec<f64>,
    width: usize,
    center_bandwidth: f64,
}

impl IndexSmoother {
    /// `tail` is row-major with `width` columns, one row per entry of `index`.
    pub fn new(link: KernelFit, index: Vec<f64>, tail: Vec<f64>, width: usize, center_bandwidth: f64) -> Result<Self> {
        if index.len() * width != tail.len() || index.is_empty() {
            return Err(Error::Dimension("index smoother inputs disagree in length".into()));
        }
        Ok(Self { link, index, tail, width, center_bandwidth })
    }
}

impl IndexNuisance for IndexSmoother {
    fn link(&self, s: f64) -> (f64, f64) {
        self.link.local_linear_at(s)
    }

    fn center(&self, s: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match kernel_weights(&self.index, 1, self.center_bandwidth, &[s]) {
            Some(w) => {
                for (wi, row) in w.iter().zip(self.tail.chunks_exact(self.width)) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += wi * v;
                    }
                }
            }
            None => {
                let i = nearest_row(&self.index, 1, &[s]);
                out.copy_from_slice(&self.tail[i * self.width..(i + 1) * self.width]);
            }
        }
    }
}

/// Index nuisances given by closures.
pub struct FnIndexNuisance<L, C> {
    pub link: L,
    pub center: C,
}

impl<L, C> IndexNuisance for FnIndexNuisance<L, C>
where
    L: Fn(f64) -> (f64, f64) + Send + Sync,
    C: Fn(f64, &mut [f64]) + Send + Sync,
{
    fn link(&self, s: f64) -> (f64, f64) {
        (self.link)(s)
    }

    fn center(&self, s: f64, out: &mut [f64]) {
        (self.center)(s, out)
    }
}

pub struct MeanIndexNuisance(pub Vec<SharedIndexNuisance>);

impl IndexNuisance for MeanIndexNuisance {
    fn link(&self, s: f64) -> (f64, f64) {
        let k = self.0.len() as f64;
        let (f, d) = self.0.iter().map(|n| n.link(s)).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        (f / k, d / k)
    }

    fn center(&self, s: f64, out: &mut [f64]) {
        let mut buf = vec![0.0; out.len()];
        out.iter_mut().for_each(|v| *v = 0.0);
        for n in &self.0 {
            n.center(s, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += b;
            }
        }
        let k = self.0.len() as f64;
        out.iter_mut().for_each(|v| *v /= k);
    }
}

/// Covariate-level nuisances of one fitted half. `aux` is the exposure
/// regression `g` for the partially linear model and the treated-arm
/// propensity `P(t = 1 | x)` for the treatment-effect model.
#[derive(Clone)]
pub struct CovariateNuisances {
    pub mu: SharedRegressor,
    pub aux: SharedRegressor,
}

impl fmt::Debug for CovariateNuisances {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CovariateNuisances { .. }")
    }
}

/// The nuisance bundle plugged into a moment function.
#[derive(Clone)]
pub enum NuisanceSet {
    Plm { mu: SharedRegressor, g: SharedRegressor },
    Sim { index: SharedIndexNuisance },
    CateSim { mu: SharedRegressor, propensity: SharedRegressor, index: SharedIndexNuisance },
}

impl fmt::Debug for NuisanceSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            NuisanceSet::Plm { .. } => "Plm",
            NuisanceSet::Sim { .. } => "Sim",
            NuisanceSet::CateSim { .. } => "CateSim",
        };
        write!(f, "NuisanceSet::{name}")
    }
}

impl NuisanceSet {
    /// Pointwise average of two bundles of the same kind.
    pub fn average(a: &NuisanceSet, b: &NuisanceSet) -> Result<NuisanceSet> {
        let mean = |x: &SharedRegressor, y: &SharedRegressor| -> SharedRegressor {
            Arc::new(MeanRegressor(vec![x.clone(), y.clone()]))
        };
        let mean_index = |x: &SharedIndexNuisance, y: &SharedIndexNuisance| -> SharedIndexNuisance {
            Arc::new(MeanIndexNuisance(vec![x.clone(), y.clone()]))
        };
        match (a, b) {
            (NuisanceSet::Plm { mu: m1, g: g1 }, NuisanceSet::Plm { mu: m2, g: g2 }) => {
                Ok(NuisanceSet::Plm { mu: mean(m1, m2), g: mean(g1, g2) })
            }
            (NuisanceSet::Sim { index: i1 }, NuisanceSet::Sim { index: i2 }) => {
                Ok(NuisanceSet::Sim { index: mean_index(i1, i2) })
            }
            (
                NuisanceSet::CateSim { mu: m1, propensity: p1, index: i1 },
                NuisanceSet::CateSim { mu: m2, propensity: p2, index: i2 },
            ) => Ok(NuisanceSet::CateSim {
                mu: mean(m1, m2),
                propensity: mean(p1, p2),
                index: mean_index(i1, i2),
            }),
            _ => Err(Error::InvalidConfig("cannot average nuisances of different kinds".into())),
        }
    }
}
