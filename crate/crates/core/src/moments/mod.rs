//! Moment functions, cross-fitted initial estimators and quadratic surrogates.

pub mod initial;
pub mod moment;
pub mod nuisance;
pub mod surrogate;

pub use initial::{
    fit_initial_plm, fit_initial_plm_with, fit_initial_single_index, fit_initial_single_index_with, kernel_covariate_nuisances,
    kernel_halves, BandwidthPolicy, FoldFit, IndexFitter, InitialFit, KernelIndexFitter, SingleIndexOptions,
};
pub use moment::{cate_sim_moment, moment_at, moment_curvature, moment_jacobian, plm_moment, plm_moment_gradient, sim_moment};
pub use nuisance::{
    clip_propensity, regressor, CovariateNuisances, FnIndexNuisance, IndexNuisance, NuisanceSet, Regressor, SharedIndexNuisance,
    SharedRegressor, PROPENSITY_CLIP,
};
pub use surrogate::{build_fold_surrogates, build_surrogate, combine_fold_surrogates, FoldSurrogate, QuadraticSurrogate};
