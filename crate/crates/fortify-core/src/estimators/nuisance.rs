//! Solvers for the nuisance estimating equations.
//!
//! The (b, r) system is linear in the coefficients, so it is solved as one
//! stacked linear system; a damped-Newton path over the same moments exists
//! for parity checks. The t equation is genuinely nonlinear because the
//! projection is re-applied to (-1)^{1-A} q(t) at every iterate, so it is
//! solved by damped Newton with a central finite-difference Jacobian.

use nalgebra::{DMatrix, DVector};

use super::EstimatorError;
use crate::bridges::{sign_flip, QEval, TreatmentBridge};
use crate::linalg::{solve_identified, truncated_solve};

/// Joint fit of the outcome-bridge and residual-model coefficients.
#[derive(Debug)]
pub struct BrFit {
    pub b_hat: Vec<f64>,
    pub r_hat: Vec<f64>,
    /// Sandwich covariance of the stacked coefficient vector (b, r).
    pub var_theta: DMatrix<f64>,
    pub residual_norm: f64,
    pub moment_scale: f64,
    pub converged: bool,
}

/// Solves the stacked moment system
///   0 = (1/n) sum c0_i (y_i - h_i(b) - l_i(r))
///   0 = (1/n) sum c1_i (y_i - h_i(b) - l_i(r))
/// directly; both models are linear in their coefficients by construction.
pub fn fit_b_r(
    y: &[f64],
    c0: &DMatrix<f64>,
    c1: &DMatrix<f64>,
    grad_h: &DMatrix<f64>,
    grad_l: &DMatrix<f64>,
) -> Result<BrFit, EstimatorError> {
    let n = y.len();
    let dim_b = grad_h.ncols();
    let dim_r = grad_l.ncols();
    if c0.ncols() != dim_b || c1.ncols() != dim_r {
        return Err(EstimatorError::InstrumentShape {
            c0: c0.ncols(),
            dim_b,
            c1: c1.ncols(),
            dim_r,
        });
    }
    let dim = dim_b + dim_r;
    let mut c = DMatrix::zeros(n, dim);
    let mut g = DMatrix::zeros(n, dim);
    c.view_mut((0, 0), (n, dim_b)).copy_from(c0);
    c.view_mut((0, dim_b), (n, dim_r)).copy_from(c1);
    g.view_mut((0, 0), (n, dim_b)).copy_from(grad_h);
    g.view_mut((0, dim_b), (n, dim_r)).copy_from(grad_l);

    let yv = DVector::from_column_slice(y);
    let m = (c.transpose() * &g) / n as f64;
    let rhs = (c.transpose() * &yv) / n as f64;
    let theta = solve_identified(&m, &rhs).map_err(|sing| {
        let b_mass: f64 = sing.null_direction.iter().take(dim_b).map(|v| v * v).sum();
        let block = if b_mass >= 0.5 { "outcome bridge (b)" } else { "residual model (r)" };
        EstimatorError::Identification {
            block: block.to_string(),
            rank: sing.rank,
            dim: sing.dim,
        }
    })?;

    let resid = &yv - &g * &theta;
    let moment = c.transpose() * &resid / n as f64;
    let residual_norm = moment.norm();
    let moment_scale = rhs.norm();

    // Sandwich covariance: A^{-1} B A^{-T} / n with A the moment Jacobian and
    // B the outer product of the per-row moment contributions.
    let mut b_mat = DMatrix::zeros(dim, dim);
    for i in 0..n {
        let ci = c.row(i).transpose();
        let e2 = resid[i] * resid[i];
        b_mat.ger(e2, &ci, &ci, 1.0);
    }
    b_mat /= (n * n) as f64;
    let lu = m.clone().lu();
    let var_theta = match lu.solve(&b_mat) {
        Some(w) => {
            let wt = w.transpose();
            match lu.solve(&wt) {
                Some(v) => v.transpose(),
                None => DMatrix::zeros(dim, dim),
            }
        }
        None => DMatrix::zeros(dim, dim),
    };

    Ok(BrFit {
        b_hat: theta.as_slice()[..dim_b].to_vec(),
        r_hat: theta.as_slice()[dim_b..].to_vec(),
        var_theta,
        residual_norm,
        moment_scale,
        converged: residual_norm <= 1e-10 * (1.0 + moment_scale),
    })
}

/// Damped-Newton solve of the same stacked (b, r) moments. The system is
/// linear, so this must land on the direct solution; it exists to check the
/// two paths agree.
pub fn fit_b_r_newton(
    y: &[f64],
    c0: &DMatrix<f64>,
    c1: &DMatrix<f64>,
    grad_h: &DMatrix<f64>,
    grad_l: &DMatrix<f64>,
    cfg: &NewtonConfig,
) -> Result<BrFit, EstimatorError> {
    let n = y.len();
    let dim_b = grad_h.ncols();
    let dim_r = grad_l.ncols();
    let dim = dim_b + dim_r;
    let mut c = DMatrix::zeros(n, dim);
    let mut g = DMatrix::zeros(n, dim);
    c.view_mut((0, 0), (n, dim_b)).copy_from(c0);
    c.view_mut((0, dim_b), (n, dim_r)).copy_from(c1);
    g.view_mut((0, 0), (n, dim_b)).copy_from(grad_h);
    g.view_mut((0, dim_b), (n, dim_r)).copy_from(grad_l);
    let yv = DVector::from_column_slice(y);
    let scale = (c.transpose() * &yv).norm() / n as f64;
    let moment = |theta: &DVector<f64>| -> Result<DVector<f64>, EstimatorError> {
        let resid = &yv - &g * theta;
        Ok(c.transpose() * resid / n as f64)
    };
    let sol = damped_newton(moment, DVector::zeros(dim), scale, cfg)?;
    Ok(BrFit {
        b_hat: sol.x.as_slice()[..dim_b].to_vec(),
        r_hat: sol.x.as_slice()[dim_b..].to_vec(),
        var_theta: DMatrix::zeros(dim, dim),
        residual_norm: sol.residual_norm,
        moment_scale: scale,
        converged: sol.converged,
    })
}

/// Fit of the treatment-bridge coefficients.
#[derive(Debug)]
pub struct TFit {
    pub t_hat: Vec<f64>,
    pub residual_norm: f64,
    pub moment_scale: f64,
    pub iterations: usize,
    pub converged: bool,
    pub exp_clamped: bool,
}

/// Solves 0 = (1/n) sum { c2_i (-1)^{1-A_i} q(t)_i - [c2(W,1,X) - c2(W,0,X)]_i }
/// by damped Newton from `t_init`.
///
/// The estimating equation is the raw bridge identity: the constrained-space
/// map is applied once downstream to (-1)^{1-A} q(t_hat), not inside the
/// solve. Wrapping the moments in the projection makes the system insensitive
/// to exactly the directions that reweight within-span components (the
/// response to a (t0, ta) perturbation is a nonlinear remainder the
/// projection has almost annihilated), which leaves the coefficients
/// unidentified in practice while changing nothing about which estimators
/// are consistent.
#[allow(clippy::too_many_arguments)]
pub fn fit_t(
    q: &TreatmentBridge,
    z_q: &DMatrix<f64>,
    a: &[f64],
    x: &DMatrix<f64>,
    c2: &DMatrix<f64>,
    c2_diff: &DMatrix<f64>,
    t_init: &[f64],
    cfg: &NewtonConfig,
) -> Result<TFit, EstimatorError> {
    let n = a.len();
    let dim = q.dim();
    if c2.ncols() != dim {
        return Err(EstimatorError::InstrumentShape { c0: c2.ncols(), dim_b: dim, c1: 0, dim_r: 0 });
    }
    let signs: Vec<f64> = a.iter().map(|&ai| sign_flip(ai)).collect();
    // Constant side of the moments: mean counterfactual difference of c2.
    let mut diff = DVector::zeros(dim);
    for j in 0..dim {
        diff[j] = c2_diff.column(j).sum() / n as f64;
    }
    let scale = diff.norm();

    let clamped = std::cell::Cell::new(false);
    let moment = |t: &DVector<f64>| -> Result<DVector<f64>, EstimatorError> {
        let QEval { values, clamped: was_clamped } = q
            .eval(t.as_slice(), z_q, a, x, None)
            .map_err(EstimatorError::Bridge)?;
        if was_clamped {
            clamped.set(true);
        }
        let weighted: Vec<f64> = values.iter().zip(&signs).map(|(v, s)| v * s).collect();
        let dv = DVector::from_column_slice(&weighted);
        let mut m = DVector::zeros(dim);
        for j in 0..dim {
            m[j] = c2.column(j).dot(&dv) / n as f64 - diff[j];
        }
        Ok(m)
    };

    let start = if t_init.len() == dim {
        DVector::from_column_slice(t_init)
    } else {
        DVector::zeros(dim)
    };
    let sol = damped_newton(moment, start, scale, cfg)?;
    Ok(TFit {
        t_hat: sol.x.as_slice().to_vec(),
        residual_norm: sol.residual_norm,
        moment_scale: scale,
        iterations: sol.iterations,
        converged: sol.converged,
        exp_clamped: clamped.get(),
    })
}

#[derive(Debug, Clone)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Relative central-difference step for the Jacobian.
    pub fd_step: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100, max_halvings: 20, fd_step: 1e-5 }
    }
}

#[derive(Debug)]
pub struct NewtonResult {
    pub x: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Damped Newton with backtracking on the moment norm and a central
/// finite-difference Jacobian. Non-convergence (iteration budget exhausted
/// or a stalled line search) is reported through the `converged` flag with
/// the best iterate retained, so callers can re-linearize and retry.
///
/// A rank-deficient Jacobian at an intermediate iterate is survivable (the
/// step is taken in the identified subspace via the minimum-norm solve; this
/// happens e.g. at the neutral start where a constant index makes gradient
/// columns proportional). A rank-deficient Jacobian at the accepted solution
/// means the moment system itself is underdetermined and is an error.
pub fn damped_newton<F>(
    mut moment: F,
    x0: DVector<f64>,
    scale: f64,
    cfg: &NewtonConfig,
) -> Result<NewtonResult, EstimatorError>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>, EstimatorError>,
{
    let dim = x0.len();
    let mut x = x0;
    let mut m = moment(&x)?;
    let tol = cfg.tol * (1.0 + scale);
    let mut last_rank = dim;
    for iter in 0..=cfg.max_iter {
        let norm = m.norm();
        if norm <= tol {
            if last_rank < dim {
                return Err(EstimatorError::SingularJacobian { rank: last_rank, dim });
            }
            return Ok(NewtonResult { x, residual_norm: norm, iterations: iter, converged: true });
        }
        if iter == cfg.max_iter {
            break;
        }
        // Central-difference Jacobian.
        let mut jac = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let step = cfg.fd_step * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let mp = moment(&xp)?;
            let mm = moment(&xm)?;
            for i in 0..dim {
                jac[(i, j)] = (mp[i] - mm[i]) / (2.0 * step);
            }
        }
        let neg_m = -&m;
        // Truncate directions the finite-difference Jacobian cannot resolve.
        let (step_dir, rank) = truncated_solve(&jac, &neg_m, 1e-8);
        last_rank = rank;
        if rank == 0 {
            return Err(EstimatorError::SingularJacobian { rank, dim });
        }
        let mut accepted = false;
        let mut lambda = 1.0;
        for _ in 0..=cfg.max_halvings {
            let candidate = &x + &step_dir * lambda;
            let mc = moment(&candidate)?;
            if mc.norm() < norm {
                x = candidate;
                m = mc;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Ok(NewtonResult {
                x,
                residual_norm: norm,
                iterations: iter,
                converged: false,
            });
        }
    }
    Ok(NewtonResult { x, residual_norm: m.norm(), iterations: cfg.max_iter, converged: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn stacked_solve_interpolates_noise_free_data() {
        // Zero-noise linear data: exact recovery and zero residual.
        let n = 200;
        let mut rng = SplitMix64::new(5);
        let gh = DMatrix::from_fn(n, 2, |_, _| rng.next_gaussian());
        let gl = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { rng.next_gaussian() * (i as f64 / n as f64 + 0.5) });
        let b_true = [2.0, -0.5];
        let r_true = [0.5, -0.125];
        let y: Vec<f64> = (0..n)
            .map(|i| {
                b_true[0] * gh[(i, 0)]
                    + b_true[1] * gh[(i, 1)]
                    + r_true[0] * gl[(i, 0)]
                    + r_true[1] * gl[(i, 1)]
            })
            .collect();
        let c0 = gh.clone();
        let c1 = gl.clone();
        let fit = fit_b_r(&y, &c0, &c1, &gh, &gl).unwrap();
        assert!(fit.converged);
        assert!(fit.residual_norm < 1e-12);
        for (est, tru) in fit.b_hat.iter().zip(&b_true) {
            assert!((est - tru).abs() < 1e-10);
        }
        for (est, tru) in fit.r_hat.iter().zip(&r_true) {
            assert!((est - tru).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicate_instrument_components_raise_identification_error() {
        let n = 50;
        let mut rng = SplitMix64::new(9);
        let gh = DMatrix::from_fn(n, 2, |_, _| rng.next_gaussian());
        let gl = DMatrix::from_fn(n, 1, |_, _| 1.0);
        let y: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
        // c0 with two identical components.
        let mut c0 = DMatrix::zeros(n, 2);
        for i in 0..n {
            let v = gh[(i, 0)];
            c0[(i, 0)] = v;
            c0[(i, 1)] = v;
        }
        let c1 = gl.clone();
        match fit_b_r(&y, &c0, &c1, &gh, &gl) {
            Err(EstimatorError::Identification { .. }) => {}
            other => panic!("expected identification error, got {other:?}"),
        }
    }

    #[test]
    fn newton_path_matches_direct_solve_on_linear_models() {
        let n = 300;
        let mut rng = SplitMix64::new(31);
        let gh = DMatrix::from_fn(n, 2, |_, _| rng.next_gaussian());
        let gl = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.next_gaussian() });
        let y: Vec<f64> = (0..n).map(|_| rng.next_gaussian() + 1.0).collect();
        let c0 = DMatrix::from_fn(n, 2, |i, j| gh[(i, j)] + 0.1 * rng.next_gaussian());
        let c1 = gl.clone();
        let direct = fit_b_r(&y, &c0, &c1, &gh, &gl).unwrap();
        let newton = fit_b_r_newton(&y, &c0, &c1, &gh, &gl, &NewtonConfig::default()).unwrap();
        for (a, b) in direct.b_hat.iter().zip(&newton.b_hat) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        for (a, b) in direct.r_hat.iter().zip(&newton.r_hat) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn newton_solves_simple_nonlinear_system() {
        // m(x) = (exp(x0) - 2, x0 + x1) has root (ln 2, -ln 2).
        let moment = |x: &DVector<f64>| -> Result<DVector<f64>, EstimatorError> {
            Ok(DVector::from_row_slice(&[x[0].exp() - 2.0, x[0] + x[1]]))
        };
        let sol = damped_newton(moment, DVector::zeros(2), 1.0, &NewtonConfig::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.x[0] - 2.0_f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn singular_jacobian_is_reported() {
        // Moments that ignore x1 entirely: Jacobian column of zeros.
        let moment = |x: &DVector<f64>| -> Result<DVector<f64>, EstimatorError> {
            Ok(DVector::from_row_slice(&[x[0] - 1.0, 2.0 * (x[0] - 1.0)]))
        };
        match damped_newton(moment, DVector::zeros(2), 1.0, &NewtonConfig::default()) {
            Err(EstimatorError::SingularJacobian { .. }) => {}
            other => panic!("expected singular jacobian, got {other:?}"),
        }
    }
}
