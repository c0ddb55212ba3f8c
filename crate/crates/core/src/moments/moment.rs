//! Estimating-equation moments. Every moment is the negative of the
//! textbook score so that its θ-Jacobian is positive semidefinite and the
//! quadratic surrogate is convex; the root set is unchanged.

use nalgebra::DMatrix;

use super::nuisance::NuisanceSet;
use crate::data::{ModelKind, TaskDataset};
use crate::error::{Error, Result};

/// `(t - g)·((t - g)θ - (y - μ))` given both residuals.
pub fn plm_moment_from_residuals(t_res: f64, y_res: f64, theta: f64) -> f64 {
    t_res * (t_res * theta - y_res)
}

pub fn plm_moment(x: &[f64], t: f64, y: f64, theta: f64, eta: &NuisanceSet) -> Result<f64> {
    match eta {
        NuisanceSet::Plm { mu, g } => {
            Ok(plm_moment_from_residuals(t - g.predict(x), y - mu.predict(x), theta))
        }
        _ => Err(Error::InvalidConfig("partially linear moment needs PLM nuisances".into())),
    }
}

/// `∂/∂θ` of [`plm_moment`]: `(t - g)²`.
pub fn plm_moment_gradient(x: &[f64], t: f64, eta: &NuisanceSet) -> Result<f64> {
    match eta {
        NuisanceSet::Plm { g, .. } => Ok((t - g.predict(x)).powi(2)),
        _ => Err(Error::InvalidConfig("partially linear moment needs PLM nuisances".into())),
    }
}

fn index_of(x: &[f64], theta: &[f64]) -> f64 {
    x.iter().zip(theta).map(|(a, b)| a * b).sum()
}

/// Writes `-c · f'(s) · (x̃ - g(s))` into `out`, where `c` is the residual
/// factor already computed by the caller.
fn centered_direction(x: &[f64], s: f64, scale: f64, eta_index: &dyn super::nuisance::IndexNuisance, out: &mut [f64]) {
    eta_index.center(s, out);
    for (o, xi) in out.iter_mut().zip(&x[1..]) {
        *o = -scale * (xi - *o);
    }
}

fn check_pinned(theta: &[f64], p: usize) -> Result<()> {
    if theta.len() != p {
        return Err(Error::Dimension(format!("θ has length {}, expected {p}", theta.len())));
    }
    if theta[0] != 1.0 {
        return Err(Error::InvalidConfig("single-index θ must have first coordinate 1".into()));
    }
    Ok(())
}

/// Single-index regression moment on the free coordinates.
pub fn sim_moment(x: &[f64], y: f64, theta: &[f64], eta: &NuisanceSet) -> Result<Vec<f64>> {
    check_pinned(theta, x.len())?;
    let NuisanceSet::Sim { index } = eta else {
        return Err(Error::InvalidConfig("single-index moment needs SIM nuisances".into()));
    };
    let s = index_of(x, theta);
    let (f, fd) = index.link(s);
    let mut out = vec![0.0; x.len() - 1];
    centered_direction(x, s, (y - f) * fd, index.as_ref(), &mut out);
    Ok(out)
}

/// Treatment-effect single-index moment with inverse-propensity weighting.
pub fn cate_sim_moment(x: &[f64], t: f64, y: f64, theta: &[f64], eta: &NuisanceSet) -> Result<Vec<f64>> {
    check_pinned(theta, x.len())?;
    let NuisanceSet::CateSim { mu, propensity, index } = eta else {
        return Err(Error::InvalidConfig("treatment-effect moment needs CATE_SIM nuisances".into()));
    };
    let treated = propensity.predict(x);
    let pi = if t > 0.0 { treated } else { 1.0 - treated };
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Numerical(format!("propensity {pi} outside (0, 1)")));
    }
    let s = index_of(x, theta);
    let (f, fd) = index.link(s);
    let resid = y - mu.predict(x) - 0.5 * t * f;
    let mut out = vec![0.0; x.len() - 1];
    centered_direction(x, s, t / pi * resid * fd, index.as_ref(), &mut out);
    Ok(out)
}

/// Moment of sample `i` at the full parameter `theta`.
pub fn moment_at(kind: ModelKind, data: &TaskDataset, i: usize, theta: &[f64], eta: &NuisanceSet) -> Result<Vec<f64>> {
    let x = data.row(i);
    moment_at_row(kind, &x, data.treatment(i), data.y()[i], theta, eta)
}

pub(crate) fn moment_at_row(kind: ModelKind, x: &[f64], t: f64, y: f64, theta: &[f64], eta: &NuisanceSet) -> Result<Vec<f64>> {
    match kind {
        ModelKind::Plm => Ok(vec![plm_moment(x, t, y, theta[0], eta)?]),
        ModelKind::Sim => sim_moment(x, y, theta, eta),
        ModelKind::CateSim => cate_sim_moment(x, t, y, theta, eta),
    }
}

/// Relative central-difference step used for single-index Jacobians.
pub const FD_STEP: f64 = 1e-5;

/// Jacobian of the moment with respect to the free coordinates (rows are
/// moment components): analytic for the partially linear model, central
/// differences with step `rel·(1 + |θ_b|)` otherwise.
pub fn moment_jacobian_with_step(
    kind: ModelKind,
    x: &[f64],
    t: f64,
    y: f64,
    theta: &[f64],
    eta: &NuisanceSet,
    rel: f64,
) -> Result<DMatrix<f64>> {
    if kind == ModelKind::Plm {
        return Ok(DMatrix::from_element(1, 1, plm_moment_gradient(x, t, eta)?));
    }
    let d = theta.len() - 1;
    let mut jac = DMatrix::zeros(d, d);
    let mut th = theta.to_vec();
    for b in 0..d {
        let c = b + 1;
        let step = rel * (1.0 + theta[c].abs());
        th[c] = theta[c] + step;
        let plus = moment_at_row(kind, x, t, y, &th, eta)?;
        th[c] = theta[c] - step;
        let minus = moment_at_row(kind, x, t, y, &th, eta)?;
        th[c] = theta[c];
        for a in 0..d {
            jac[(a, b)] = (plus[a] - minus[a]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Curvature used by the quadratic surrogate. For the partially linear
/// model this is the exact Jacobian `(t - g)²`. For single-index models it
/// is the conditional expectation of the Jacobian with the zero-mean
/// residual terms dropped: `c·f'(s)²·(x̃ - g(s))(x̃ - g(s))ᵀ`, with `c = 1`
/// for regression and `c = 1/(2π(t, x))` for the treatment effect. It is
/// positive semidefinite by construction, whereas the raw empirical
/// Jacobian carries link-curvature noise that can make it indefinite.
pub fn moment_curvature(kind: ModelKind, x: &[f64], t: f64, theta: &[f64], eta: &NuisanceSet) -> Result<DMatrix<f64>> {
    let (index, c) = match (kind, eta) {
        (ModelKind::Plm, _) => return Ok(DMatrix::from_element(1, 1, plm_moment_gradient(x, t, eta)?)),
        (ModelKind::Sim, NuisanceSet::Sim { index }) => (index, 1.0),
        (ModelKind::CateSim, NuisanceSet::CateSim { propensity, index, .. }) => {
            let treated = propensity.predict(x);
            let pi = if t > 0.0 { treated } else { 1.0 - treated };
            if !(pi > 0.0 && pi < 1.0) {
                return Err(Error::Numerical(format!("propensity {pi} outside (0, 1)")));
            }
            (index, 0.5 / pi)
        }
        _ => return Err(Error::InvalidConfig(format!("nuisances do not match the {kind} model"))),
    };
    check_pinned(theta, x.len())?;
    let s = index_of(x, theta);
    let (_, fd) = index.link(s);
    let mut r = vec![0.0; x.len() - 1];
    index.center(s, &mut r);
    for (o, xi) in r.iter_mut().zip(&x[1..]) {
        *o = xi - *o;
    }
    let d = r.len();
    let scale = c * fd * fd;
    Ok(DMatrix::from_fn(d, d, |a, b| scale * r[a] * r[b]))
}

pub fn moment_jacobian(kind: ModelKind, x: &[f64], t: f64, y: f64, theta: &[f64], eta: &NuisanceSet) -> Result<DMatrix<f64>> {
    moment_jacobian_with_step(kind, x, t, y, theta, eta, FD_STEP)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::moments::nuisance::{regressor, FnIndexNuisance};
    use proptest::prelude::*;

    fn plm_eta(mu: f64, g: f64) -> NuisanceSet {
        NuisanceSet::Plm { mu: regressor(move |_| mu), g: regressor(move |_| g) }
    }

    fn smooth_index() -> Arc<FnIndexNuisance<impl Fn(f64) -> (f64, f64), impl Fn(f64, &mut [f64])>> {
        Arc::new(FnIndexNuisance {
            link: |s: f64| (s.sin() + 0.3 * s * s, s.cos() + 0.6 * s),
            center: |s: f64, out: &mut [f64]| {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = 0.2 * (k as f64 + 1.0) * s.tanh();
                }
            },
        })
    }

    #[test]
    fn plm_moment_vanishes_at_nuisance_values() {
        assert_eq!(plm_moment(&[0.0], 0.7, 1.3, 5.0, &plm_eta(1.3, 0.7)).unwrap(), 0.0);
    }

    #[test]
    fn plm_moment_examples() {
        assert_eq!(plm_moment_from_residuals(1.0, 2.0, 2.0), 0.0);
        assert_eq!(plm_moment_from_residuals(0.5, 1.0, 0.0), -0.5);
        assert_eq!(plm_moment(&[0.0], 0.5, 1.0, 0.0, &plm_eta(0.0, 0.0)).unwrap(), -0.5);
    }

    #[test]
    fn sim_moment_zero_when_outcome_on_link() {
        let eta = NuisanceSet::Sim { index: smooth_index() };
        let x = [0.3, -0.2, 0.5];
        let theta = [1.0, 0.4, -1.0];
        let s: f64 = x.iter().zip(&theta).map(|(a, b)| a * b).sum();
        let y = s.sin() + 0.3 * s * s;
        assert!(sim_moment(&x, y, &theta, &eta).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn sim_moment_zero_when_tail_is_centered() {
        let eta = NuisanceSet::Sim {
            index: Arc::new(FnIndexNuisance {
                link: |s: f64| (s, 1.0),
                center: |_s: f64, out: &mut [f64]| out.copy_from_slice(&[0.25, -0.5]),
            }),
        };
        let m = sim_moment(&[1.0, 0.25, -0.5], 10.0, &[1.0, 2.0, 3.0], &eta).unwrap();
        assert_eq!(m, vec![0.0, 0.0]);
    }

    #[test]
    fn curvature_equals_jacobian_for_linear_link_and_zero_centering() {
        let eta = NuisanceSet::Sim {
            index: Arc::new(FnIndexNuisance {
                link: |s: f64| (1.5 * s - 0.2, 1.5),
                center: |_s: f64, out: &mut [f64]| out.fill(0.0),
            }),
        };
        let (x, theta) = ([0.4, -0.3, 0.8], [1.0, 0.5, -0.25]);
        let jac = moment_jacobian(ModelKind::Sim, &x, 0.0, 0.9, &theta, &eta).unwrap();
        let cur = moment_curvature(ModelKind::Sim, &x, 0.0, &theta, &eta).unwrap();
        assert!((jac - &cur).amax() < 1e-8);
        assert!((cur[(0, 1)] - 2.25 * -0.3 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn cate_moment_hand_example() {
        // t = 1, π = 0.5, residual 1, f' = 2, x̃ - g = (1, 0, 0): raw score 4
        let eta = NuisanceSet::CateSim {
            mu: regressor(|_| 0.0),
            propensity: regressor(|_| 0.5),
            index: Arc::new(FnIndexNuisance {
                link: |_s: f64| (0.0, 2.0),
                center: |_s: f64, out: &mut [f64]| out.copy_from_slice(&[0.0, 0.0, 0.0]),
            }),
        };
        let m = cate_sim_moment(&[0.0, 1.0, 0.0, 0.0], 1.0, 1.0, &[1.0, 0.0, 0.0, 0.0], &eta).unwrap();
        assert_eq!(m, vec![-4.0, 0.0, 0.0]);
    }

    #[test]
    fn cate_moment_rejects_degenerate_propensity() {
        let eta = NuisanceSet::CateSim {
            mu: regressor(|_| 0.0),
            propensity: regressor(|_| 1.0),
            index: smooth_index(),
        };
        assert!(matches!(cate_sim_moment(&[0.0, 1.0], 1.0, 1.0, &[1.0, 0.0], &eta), Err(Error::Numerical(_))));
    }

    #[test]
    fn single_index_moment_requires_pinned_theta() {
        let eta = NuisanceSet::Sim { index: smooth_index() };
        assert!(sim_moment(&[0.0, 1.0], 0.0, &[2.0, 0.0], &eta).is_err());
        assert!(sim_moment(&[0.0, 1.0], 0.0, &[1.0], &eta).is_err());
    }

    #[test]
    fn oracle_plm_moment_is_orthogonal_at_truth() {
        // y = 2t + μ(x) exactly, t = g(x) + v with mean-zero v: the sample
        // moment at θ = 2 vanishes identically.
        let eta = NuisanceSet::Plm { mu: regressor(|x| x[0] * x[0]), g: regressor(|x| 0.5 * x[0]) };
        let mut total = 0.0;
        for i in 0..50 {
            let x = -1.0 + i as f64 / 25.0;
            let t = 0.5 * x + if i % 2 == 0 { 0.3 } else { -0.3 };
            let y = 2.0 * (t - 0.5 * x) + x * x;
            total += plm_moment(&[x], t, y, 2.0, &eta).unwrap();
        }
        assert!((total / 50.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn jacobians_agree_with_coarse_differences(
            x in proptest::collection::vec(-1.0f64..1.0, 4),
            free in proptest::collection::vec(-1.0f64..1.0, 3),
            t_sign in proptest::bool::ANY,
            y in -2.0f64..2.0,
        ) {
            let t = if t_sign { 1.0 } else { -1.0 };
            let mut theta = vec![1.0];
            theta.extend(&free);
            let sim = NuisanceSet::Sim { index: smooth_index() };
            let cate = NuisanceSet::CateSim {
                mu: regressor(|x| 0.1 * x[0]),
                propensity: regressor(|x| 0.5 + 0.3 * x[1]),
                index: smooth_index(),
            };
            for (kind, eta) in [(ModelKind::Sim, &sim), (ModelKind::CateSim, &cate)] {
                let fine = moment_jacobian(kind, &x, t, y, &theta, eta).unwrap();
                let coarse = moment_jacobian_with_step(kind, &x, t, y, &theta, eta, 1e-3).unwrap();
                let scale = fine.norm().max(1e-3);
                prop_assert!((&fine - &coarse).norm() / scale < 1e-3);
            }
            // analytic PLM gradient versus a coarse difference of the moment
            let plm = NuisanceSet::Plm { mu: regressor(|x| x[0]), g: regressor(|x| 0.4 * x[1]) };
            let th = free[0];
            let h = 1e-3 * (1.0 + th.abs());
            let fd = (plm_moment(&x, t, y, th + h, &plm).unwrap() - plm_moment(&x, t, y, th - h, &plm).unwrap()) / (2.0 * h);
            let an = plm_moment_gradient(&x, t, &plm).unwrap();
            prop_assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-3));
        }
    }
}
