//! Dense least-squares helpers built on SVD.
//!
//! Everything that fits a regression in this crate goes through these
//! routines so that rank deficiency is always resolved by the minimum-norm
//! solution, never by silently dropping columns.

use nalgebra::{DMatrix, DVector, SVD};

/// Relative singular-value cutoff used for rank decisions.
fn svd_tol(svd: &SVD<f64, nalgebra::Dyn, nalgebra::Dyn>, nrows: usize, ncols: usize) -> f64 {
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    smax * nrows.max(ncols) as f64 * f64::EPSILON
}

/// Minimum-norm least-squares fit of `a * beta ~ b`.
pub struct Lstsq {
    pub coefficients: DVector<f64>,
    pub rank: usize,
    pub deficient: bool,
}

pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> Lstsq {
    let (nrows, ncols) = a.shape();
    let svd = SVD::new(a.clone(), true, true);
    let tol = svd_tol(&svd, nrows, ncols);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let mut coef = DVector::zeros(ncols);
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            rank += 1;
            let proj = u.column(i).dot(b) / s;
            coef.axpy(proj, &vt.row(i).transpose(), 1.0);
        }
    }
    Lstsq {
        coefficients: coef,
        rank,
        deficient: rank < ncols,
    }
}

/// Orthonormal basis for the column space of `a` (left singular vectors with
/// non-negligible singular values). The boolean reports rank deficiency.
pub fn orthonormal_columns(a: &DMatrix<f64>) -> (DMatrix<f64>, usize, bool) {
    let (nrows, ncols) = a.shape();
    let svd = SVD::new(a.clone(), true, false);
    let tol = svd_tol(&svd, nrows, ncols);
    let u = svd.u.as_ref().expect("svd u");
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let mut q = DMatrix::zeros(nrows, rank);
    let mut j = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            q.set_column(j, &u.column(i));
            j += 1;
        }
    }
    (q, rank, rank < ncols)
}

/// Factor mapping projected coordinates back to model coefficients: for the
/// basis `q` returned by [`orthonormal_columns`], `coef = map * (q^T d)` is the
/// minimum-norm least-squares coefficient vector of `d` on `a`.
pub fn coefficient_map(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (nrows, ncols) = a.shape();
    let svd = SVD::new(a.clone(), false, true);
    let tol = svd_tol(&svd, nrows, ncols);
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let mut map = DMatrix::zeros(ncols, rank);
    let mut j = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            map.set_column(j, &(vt.row(i).transpose() / s));
            j += 1;
        }
    }
    map
}

/// A square system that turned out singular; carries the null direction so
/// callers can report which equations are redundant.
#[derive(Debug, Clone)]
pub struct SingularSystem {
    pub rank: usize,
    pub dim: usize,
    /// Unit vector spanning (part of) the null space of the system matrix.
    pub null_direction: DVector<f64>,
}

/// Solves a square identified system, failing loudly when rank-deficient.
pub fn solve_identified(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>, SingularSystem> {
    let dim = a.nrows();
    assert_eq!(dim, a.ncols(), "system matrix must be square");
    let svd = SVD::new(a.clone(), true, true);
    let tol = svd_tol(&svd, dim, dim);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < dim {
        // Smallest singular value's right vector spans the null space.
        let vt = svd.v_t.as_ref().expect("svd v_t");
        let (mut idx, mut smin) = (0, f64::INFINITY);
        for (i, &s) in svd.singular_values.iter().enumerate() {
            if s < smin {
                smin = s;
                idx = i;
            }
        }
        return Err(SingularSystem {
            rank,
            dim,
            null_direction: vt.row(idx).transpose(),
        });
    }
    Ok(svd.solve(b, tol).expect("full-rank solve"))
}

/// Solves `a * x = b` in the least-squares sense, truncating singular values
/// below `rtol` times the largest. Returns the solution and the retained
/// rank. Meant for numerically noisy systems (finite-difference Jacobians)
/// where machine-epsilon rank detection is meaningless.
pub fn truncated_solve(a: &DMatrix<f64>, b: &DVector<f64>, rtol: f64) -> (DVector<f64>, usize) {
    let ncols = a.ncols();
    let svd = SVD::new(a.clone(), true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let tol = smax * rtol;
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let mut x = DVector::zeros(ncols);
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            rank += 1;
            let proj = u.column(i).dot(b) / s;
            x.axpy(proj, &vt.row(i).transpose(), 1.0);
        }
    }
    (x, rank)
}

/// Sample mean of a slice.
pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance (n-1 denominator).
pub fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Root-mean-square norm: sqrt(mean(v_i^2)). This is the empirical L2 norm
/// used throughout the projection and membership diagnostics.
pub fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}
