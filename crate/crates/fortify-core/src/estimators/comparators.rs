//! The standard doubly robust comparator, which ignores unmeasured
//! confounding and treats all of (X, Z, W) as baseline covariates.

use nalgebra::{DMatrix, DVector};

use super::{Diagnostics, EquationDiagnostics, EstimateResult, EstimatorError, Method};
use crate::dataset::ObservedData;
use crate::inference::confidence_interval;
use crate::linalg::{lstsq_min_norm, mean, sample_variance};

const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);

pub struct LogisticFit {
    pub coefficients: DVector<f64>,
    pub iterations: usize,
}

/// Maximum-likelihood logistic regression by Newton-Raphson with step
/// halving on the deviance. Separation surfaces as a fit error.
pub fn logistic_fit(design: &DMatrix<f64>, y: &[f64]) -> Result<LogisticFit, EstimatorError> {
    let n = design.nrows();
    let dim = design.ncols();
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(dim);
    let deviance = |eta: &DVector<f64>| -> f64 {
        let mut dev = 0.0;
        for i in 0..n {
            // log(1 + exp(eta)) - y*eta, computed stably.
            let e = eta[i];
            let log1p_exp = if e > 30.0 { e } else { (1.0 + e.exp()).ln() };
            dev += log1p_exp - y[i] * e;
        }
        2.0 * dev
    };
    let mut eta = design * &beta;
    let mut dev = deviance(&eta);
    for iter in 0..100 {
        let p: DVector<f64> = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let grad = design.transpose() * (&yv - &p);
        if grad.amax() < 1e-10 * n as f64 {
            // A vanishing gradient with runaway logits is (quasi-)separation:
            // the likelihood flattens as probabilities saturate at 0/1.
            if eta.amax() > 30.0 {
                return Err(EstimatorError::PropensitySeparation);
            }
            return Ok(LogisticFit { coefficients: beta, iterations: iter });
        }
        let mut hess = DMatrix::zeros(dim, dim);
        for i in 0..n {
            let wi = (p[i] * (1.0 - p[i])).max(1e-12);
            let row = design.row(i).transpose();
            hess.ger(wi, &row, &row, 1.0);
        }
        let step = hess.lu().solve(&grad).ok_or(EstimatorError::PropensitySeparation)?;
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let candidate = &beta + &step * lambda;
            let eta_c = design * &candidate;
            let dev_c = deviance(&eta_c);
            if dev_c < dev + 1e-12 {
                beta = candidate;
                eta = eta_c;
                dev = dev_c;
                improved = true;
                break;
            }
            lambda *= 0.5;
        }
        if !improved || beta.amax() > 1e4 {
            return Err(EstimatorError::PropensitySeparation);
        }
    }
    Err(EstimatorError::PropensitySeparation)
}

/// The augmented inverse-probability-weighted contribution per row:
/// m1 - m0 + (-1)^{1-A} / f(A|L) * (y - m_obs).
pub fn aipw_values(
    m1: &[f64],
    m0: &[f64],
    m_obs: &[f64],
    propensity1: &[f64],
    a: &[f64],
    y: &[f64],
) -> Vec<f64> {
    (0..y.len())
        .map(|i| {
            let (sign, f_a) = if a[i] == 1.0 {
                (1.0, propensity1[i])
            } else {
                (-1.0, 1.0 - propensity1[i])
            };
            m1[i] - m0[i] + sign / f_a * (y[i] - m_obs[i])
        })
        .collect()
}

/// Standard doubly robust (AIPW) estimator with a logistic propensity model
/// on (1, L) and a linear outcome model on (1, L, A), L = (Z, W, X).
pub fn estimate_dr(data: &ObservedData) -> Result<EstimateResult, EstimatorError> {
    let n = data.n();
    let n_l = data.k() + data.d_w() + data.p();
    let mut l_mat = DMatrix::zeros(n, n_l);
    for i in 0..n {
        let mut j = 0;
        for c in 0..data.k() {
            l_mat[(i, j)] = data.z()[(i, c)];
            j += 1;
        }
        for c in 0..data.d_w() {
            l_mat[(i, j)] = data.w()[(i, c)];
            j += 1;
        }
        for c in 0..data.p() {
            l_mat[(i, j)] = data.x()[(i, c)];
            j += 1;
        }
    }

    // Propensity: logistic on (1, L).
    let mut design_p = DMatrix::zeros(n, 1 + n_l);
    for i in 0..n {
        design_p[(i, 0)] = 1.0;
        for j in 0..n_l {
            design_p[(i, 1 + j)] = l_mat[(i, j)];
        }
    }
    let logit = logistic_fit(&design_p, data.a())?;
    let eta = &design_p * &logit.coefficients;
    let mut clipped = false;
    let propensity1: Vec<f64> = eta
        .iter()
        .map(|e| {
            let p = 1.0 / (1.0 + (-e).exp());
            if p < PROPENSITY_CLIP.0 || p > PROPENSITY_CLIP.1 {
                clipped = true;
            }
            p.clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1)
        })
        .collect();

    // Outcome: least squares on (1, L, A).
    let mut design_o = DMatrix::zeros(n, 2 + n_l);
    for i in 0..n {
        design_o[(i, 0)] = 1.0;
        for j in 0..n_l {
            design_o[(i, 1 + j)] = l_mat[(i, j)];
        }
        design_o[(i, 1 + n_l)] = data.a()[i];
    }
    let yv = DVector::from_column_slice(data.y());
    let fit = lstsq_min_norm(&design_o, &yv);
    if fit.deficient {
        return Err(EstimatorError::OutcomeModelRankDeficient);
    }
    let m_obs_v = &design_o * &fit.coefficients;
    let a_coef = fit.coefficients[1 + n_l];
    // With a single additive A column, the counterfactual predictions differ
    // from the observed one only through the A coefficient.
    let m1: Vec<f64> = (0..n)
        .map(|i| m_obs_v[i] + (1.0 - data.a()[i]) * a_coef)
        .collect();
    let m0: Vec<f64> = (0..n).map(|i| m_obs_v[i] - data.a()[i] * a_coef).collect();
    let m_obs: Vec<f64> = m_obs_v.iter().copied().collect();

    let values = aipw_values(&m1, &m0, &m_obs, &propensity1, data.a(), data.y());
    let tau_hat = mean(&values);
    let se = (sample_variance(&values) / n as f64).sqrt();
    let (lo, hi) = confidence_interval(tau_hat, se, 0.95);
    let mut warnings = Vec::new();
    if clipped {
        warnings.push(format!(
            "propensity clipped to [{}, {}]",
            PROPENSITY_CLIP.0, PROPENSITY_CLIP.1
        ));
    }
    Ok(EstimateResult {
        method: Method::Dr,
        gamma: 0,
        tau_hat,
        se: Some(se),
        ci_lower: Some(lo),
        ci_upper: Some(hi),
        diagnostics: Diagnostics {
            converged: true,
            se_engine: Some("influence".into()),
            solver: vec![EquationDiagnostics {
                equation: "propensity (logistic)".into(),
                residual_norm: 0.0,
                iterations: logit.iterations,
                converged: true,
            }],
            warnings,
        },
    })
}
