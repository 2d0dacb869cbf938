//! Point estimators of the average treatment effect and their plug-in
//! standard errors.
//!
//! The fortified pipeline fits the nuisance estimating equations once per
//! dataset ([`fit_fortified`]) and then reads off the outcome-regression,
//! inverse-probability-weighted, and multiply robust estimators from the
//! shared fit. The conventional proximal comparator is the same pipeline run
//! on data with a single designated proxy; the standard doubly robust
//! comparator lives in [`comparators`].

mod comparators;
mod nuisance;

pub use comparators::{aipw_values, estimate_dr, logistic_fit};
pub use nuisance::{damped_newton, fit_b_r, fit_b_r_newton, fit_t, BrFit, NewtonConfig, TFit};

use nalgebra::{DMatrix, DVector};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridges::{
    adaptive_c2, build_instruments, sign_flip, BridgeError, C2Source, InstrumentVectors,
    ModelInputs, OutcomeBridge, ResidualModel, TreatmentBridge, WaxTerm,
};
use crate::dataset::{DatasetError, ObservedData};
use crate::inference::confidence_interval;
use crate::linalg::{mean, sample_variance};
use crate::projection::{
    AceConfig, AceWorkingModel, ProjectionError, SubsetFamily, SubsetProjector,
};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("instrument dimensions (c0={c0}, c1={c1}) do not match parameters (b={dim_b}, r={dim_r})")]
    InstrumentShape { c0: usize, dim_b: usize, c1: usize, dim_r: usize },
    #[error("stacked moment system singular in the {block} block: rank {rank} of {dim}")]
    Identification { block: String, rank: usize, dim: usize },
    #[error("{equation} failed to converge: residual norm {residual_norm:.3e} after {iterations} iterations")]
    NonConvergence { equation: String, residual_norm: f64, iterations: usize },
    #[error("singular jacobian (rank {rank} of {dim}) in the newton solve")]
    SingularJacobian { rank: usize, dim: usize },
    #[error("propensity fit failed (possible separation)")]
    PropensitySeparation,
    #[error("outcome regression design is rank deficient")]
    OutcomeModelRankDeficient,
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Estimator identity. The conventional proximal comparator carries the
/// 1-based index of its designated valid proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Fpor,
    Fpipw,
    Fpmr,
    Pdr(usize),
    Dr,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Fpor => "fPOR",
            Method::Fpipw => "fPIPW",
            Method::Fpmr => "fPMR",
            Method::Pdr(_) => "PDR",
            Method::Dr => "DR",
        }
    }

    /// Display label; distinguishes PDR variants by their designated proxy.
    pub fn label(&self) -> String {
        match self {
            Method::Pdr(idx) => format!("PDR{idx}"),
            other => other.tag().to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "fPOR" => Some(Method::Fpor),
            "fPIPW" => Some(Method::Fpipw),
            "fPMR" => Some(Method::Fpmr),
            "DR" => Some(Method::Dr),
            _ => {
                let rest = s.strip_prefix("PDR")?;
                if rest.is_empty() {
                    Some(Method::Pdr(1))
                } else {
                    rest.parse().ok().map(Method::Pdr)
                }
            }
        }
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.tag())
    }
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct EquationDiagnostics {
    pub equation: String,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct Diagnostics {
    pub converged: bool,
    pub se_engine: Option<String>,
    pub solver: Vec<EquationDiagnostics>,
    pub warnings: Vec<String>,
}

/// A point estimate with its inference summary. When a standard error is
/// present, the interval is the 95% normal interval around the estimate.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateResult {
    pub method: Method,
    /// For PDR rows this records the designated proxy index context; 0 for DR.
    pub gamma: usize,
    pub tau_hat: f64,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub diagnostics: Diagnostics,
}

/// Whether the map into the constrained space is the cyclic projection or
/// the identity (the latter deliberately skips projection, as in the third
/// misspecification scenario).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    #[default]
    Ace,
    Identity,
}

/// The three working models plus the optional custom instrument basis for
/// the treatment equation.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub h: OutcomeBridge,
    pub l: ResidualModel,
    pub q: TreatmentBridge,
    pub c2_terms: Option<Vec<WaxTerm>>,
}

impl ModelSet {
    /// Working-model defaults for a dataset shape: h = b_a A + b_w' W,
    /// l = intercept + proxy mains (gamma < K only) + covariate mains,
    /// q = 1 + exp(linear index).
    pub fn defaults(k: usize, d_w: usize, p: usize, gamma: usize) -> Self {
        Self {
            h: OutcomeBridge::default_linear(d_w, p),
            l: ResidualModel::default_linear(k, p, gamma),
            q: TreatmentBridge::new(k, p),
            c2_terms: None,
        }
    }

    pub fn defaults_for(data: &ObservedData, gamma: usize) -> Self {
        Self::defaults(data.k(), data.d_w(), data.p(), gamma)
    }
}

/// Nuisance coefficient estimates with per-equation solver diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct NuisanceFit {
    pub b_hat: Vec<f64>,
    pub r_hat: Vec<f64>,
    pub t_hat: Vec<f64>,
    pub equations: Vec<EquationDiagnostics>,
    pub warnings: Vec<String>,
}

impl NuisanceFit {
    pub fn converged(&self) -> bool {
        self.equations.iter().all(|e| e.converged)
    }
}

/// Everything the estimators need, computed once per dataset: nuisance
/// coefficients, the projected treatment-bridge weight, cached bridge
/// evaluations, and the covariance block used by the outcome-regression
/// standard error.
pub struct FortifiedFit {
    pub gamma: usize,
    pub nuisance: NuisanceFit,
    pub instruments: InstrumentVectors,
    /// Audit trace of the final weight projection (absent in identity mode).
    pub ace_trace: Option<AceWorkingModel>,
    y: Vec<f64>,
    y_proj: Vec<f64>,
    h1: Vec<f64>,
    h0: Vec<f64>,
    h_obs: Vec<f64>,
    l_obs: Vec<f64>,
    d_weight: Vec<f64>,
    c_bar: DVector<f64>,
    var_bb: DMatrix<f64>,
}

/// Fits all three nuisance equations on one dataset and caches the pieces
/// shared by the estimators.
pub fn fit_fortified(
    data: &ObservedData,
    inputs: &ModelInputs,
    models: &ModelSet,
    gamma: usize,
    ace: &AceConfig,
    mode: ProjectionMode,
) -> Result<FortifiedFit, EstimatorError> {
    let family = SubsetFamily::enumerate(data.k(), gamma)?;
    let projector = match mode {
        ProjectionMode::Ace => {
            Some(SubsetProjector::from_data(data, &family, &ace.basis)?)
        }
        ProjectionMode::Identity => None,
    };

    // Starting point for the treatment solve, from the inverse-propensity
    // heuristic; also the linearization point for the adaptive instruments.
    let t_init =
        warm_start_t(data, inputs, models.q.dim()).unwrap_or_else(|| vec![0.0; models.q.dim()]);
    let c2_source = match &models.c2_terms {
        Some(terms) => C2Source::Explicit(terms),
        None => C2Source::Adaptive { q: &models.q, t_lin: &t_init },
    };
    let mut instruments = build_instruments(
        data,
        inputs,
        &models.h,
        &models.l,
        models.q.dim(),
        c2_source,
        projector.as_ref(),
        ace.tol,
        ace.max_cycles,
    )?;
    let mut warnings = instruments.warnings.clone();

    // Stage 1: stacked linear solve for (b, r).
    let grad_h = models.h.gradient(&inputs.w_h, data.a(), data.x(), None);
    let grad_l = models.l.gradient(&inputs.z_l, data.x());
    let br = fit_b_r(data.y(), &instruments.c0, &instruments.c1, &grad_h, &grad_l)?;

    // Stage 2: damped Newton for t. Gradient-matching instruments are only
    // as sharp as their linearization point, so after each solve (converged
    // or stalled) they are rebuilt at the best iterate and the solve is
    // repeated, until two consecutive converged passes or the pass budget
    // runs out. Explicit user instruments get a single solve.
    let newton_cfg = NewtonConfig::default();
    let mut tf = fit_t(
        &models.q,
        &inputs.z_q,
        data.a(),
        data.x(),
        &instruments.c2,
        &instruments.c2_diff,
        &t_init,
        &newton_cfg,
    )?;
    if models.c2_terms.is_none() {
        for _pass in 0..3 {
            let was_converged = tf.converged;
            let (c2, c2_diff) = adaptive_c2(data, &inputs.z_q, &models.q, &tf.t_hat)?;
            instruments.c2 = c2;
            instruments.c2_diff = c2_diff;
            tf = fit_t(
                &models.q,
                &inputs.z_q,
                data.a(),
                data.x(),
                &instruments.c2,
                &instruments.c2_diff,
                &tf.t_hat,
                &newton_cfg,
            )?;
            if was_converged && tf.converged {
                break;
            }
        }
    }
    if !tf.converged {
        // Last resort: restart from the neutral point with the instruments
        // as they stand.
        let zeros = vec![0.0; models.q.dim()];
        let retry = fit_t(
            &models.q,
            &inputs.z_q,
            data.a(),
            data.x(),
            &instruments.c2,
            &instruments.c2_diff,
            &zeros,
            &newton_cfg,
        )?;
        if retry.converged {
            tf = retry;
        }
    }
    if !tf.converged {
        return Err(EstimatorError::NonConvergence {
            equation: "treatment bridge (t)".into(),
            residual_norm: tf.residual_norm,
            iterations: tf.iterations,
        });
    }
    if tf.exp_clamped {
        warnings.push("treatment bridge exponent hit the cap during solving".into());
    }

    // Final projected weight d((-1)^{1-A} q(t_hat)) and cached evaluations.
    let q_eval = models.q.eval(&tf.t_hat, &inputs.z_q, data.a(), data.x(), None)?;
    let weighted: Vec<f64> = q_eval
        .values
        .iter()
        .zip(data.a())
        .map(|(v, &ai)| v * sign_flip(ai))
        .collect();
    let (d_weight, ace_trace) = match &projector {
        Some(p) => {
            let (d, state) = p.project(&weighted, ace.tol, ace.max_cycles);
            if !state.converged {
                warnings.push(format!(
                    "final weight projection stopped at {} cycles without meeting tolerance",
                    state.cycles
                ));
            }
            (d, Some(state))
        }
        None => (weighted, None),
    };

    // Projected outcome for the weighted estimator's standard error: the
    // converged cyclic projector is symmetric in the empirical inner
    // product, so P_n[d y] = P_n[d (proj y)] and the latter's per-row spread
    // reflects the actual sampling variance of the weighted mean.
    let y_proj = match &projector {
        Some(p) => p.project(data.y(), ace.tol, ace.max_cycles).0,
        None => data.y().to_vec(),
    };

    let h1 = models.h.eval(&br.b_hat, &inputs.w_h, data.a(), data.x(), Some(1.0))?;
    let h0 = models.h.eval(&br.b_hat, &inputs.w_h, data.a(), data.x(), Some(0.0))?;
    let h_obs = models.h.eval(&br.b_hat, &inputs.w_h, data.a(), data.x(), None)?;
    let l_obs = models.l.eval(&br.r_hat, &inputs.z_l, data.x())?;

    // Mean counterfactual gradient difference, padded over (b, r), for the
    // outcome-regression delta-method standard error.
    let gh1 = models.h.gradient(&inputs.w_h, data.a(), data.x(), Some(1.0));
    let gh0 = models.h.gradient(&inputs.w_h, data.a(), data.x(), Some(0.0));
    let dim_b = models.h.dim();
    let n = data.n() as f64;
    let mut c_bar = DVector::zeros(dim_b + models.l.dim());
    for j in 0..dim_b {
        c_bar[j] = (gh1.column(j).sum() - gh0.column(j).sum()) / n;
    }

    let equations = vec![
        EquationDiagnostics {
            equation: "outcome bridge + residual model (b, r)".into(),
            residual_norm: br.residual_norm,
            iterations: 1,
            converged: br.converged,
        },
        EquationDiagnostics {
            equation: "treatment bridge (t)".into(),
            residual_norm: tf.residual_norm,
            iterations: tf.iterations,
            converged: tf.converged,
        },
    ];

    Ok(FortifiedFit {
        gamma,
        nuisance: NuisanceFit {
            b_hat: br.b_hat,
            r_hat: br.r_hat,
            t_hat: tf.t_hat,
            equations,
            warnings: warnings.clone(),
        },
        instruments,
        ace_trace,
        y: data.y().to_vec(),
        y_proj,
        h1,
        h0,
        h_obs,
        l_obs,
        d_weight,
        c_bar,
        var_bb: br.var_theta,
    })
}

impl FortifiedFit {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn diagnostics(&self, se_engine: &str) -> Diagnostics {
        Diagnostics {
            converged: self.nuisance.converged(),
            se_engine: Some(se_engine.into()),
            solver: self.nuisance.equations.clone(),
            warnings: self.nuisance.warnings.clone(),
        }
    }

    fn result(&self, method: Method, tau_hat: f64, se: f64, engine: &str) -> EstimateResult {
        let (lo, hi) = confidence_interval(tau_hat, se, 0.95);
        EstimateResult {
            method,
            gamma: self.gamma,
            tau_hat,
            se: Some(se),
            ci_lower: Some(lo),
            ci_upper: Some(hi),
            diagnostics: self.diagnostics(engine),
        }
    }

    /// Outcome-regression estimator: the empirical mean of
    /// h(W,1,X) - h(W,0,X). Its standard error comes from the delta method
    /// over the stacked (b, r) sandwich covariance plus the averaging term.
    pub fn fpor(&self) -> EstimateResult {
        let n = self.n();
        let diffs: Vec<f64> = (0..n).map(|i| self.h1[i] - self.h0[i]).collect();
        let tau = mean(&diffs);
        let param_var = (self.var_bb.clone() * &self.c_bar).dot(&self.c_bar);
        let avg_var = sample_variance(&diffs) / n as f64;
        let se = (param_var.max(0.0) + avg_var).sqrt();
        self.result(Method::Fpor, tau, se, "sandwich")
    }

    /// Inverse-probability-weighted estimator: the empirical mean of the
    /// projected weight times the outcome. The standard error is the plug-in
    /// spread of the symmetric-form contributions d_i * (proj y)_i, whose
    /// mean is the same estimate; the raw d_i * y_i spread wildly overstates
    /// the variance because the projection recentres the weight in-sample.
    pub fn fpipw(&self) -> EstimateResult {
        let n = self.n();
        let vals: Vec<f64> = (0..n).map(|i| self.d_weight[i] * self.y[i]).collect();
        let tau = mean(&vals);
        let sym: Vec<f64> = (0..n).map(|i| self.d_weight[i] * self.y_proj[i]).collect();
        let se = (sample_variance(&sym) / n as f64).sqrt();
        self.result(Method::Fpipw, tau, se, "plug-in")
    }

    /// Multiply robust estimator: the empirical mean of
    /// h(1) - h(0) + d * (Y - h - l), with the influence-function standard
    /// error.
    pub fn fpmr(&self) -> EstimateResult {
        let vals = self.mr_contributions();
        let tau = mean(&vals);
        let se = (sample_variance(&vals) / self.n() as f64).sqrt();
        self.result(Method::Fpmr, tau, se, "influence")
    }

    /// Per-row contributions whose mean is the multiply robust estimate.
    pub fn mr_contributions(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                self.h1[i] - self.h0[i]
                    + self.d_weight[i] * (self.y[i] - self.h_obs[i] - self.l_obs[i])
            })
            .collect()
    }

    /// Influence-function values at the fitted nuisances and a given tau.
    pub fn influence_values(&self, tau: f64) -> Vec<f64> {
        self.mr_contributions().iter().map(|v| v - tau).collect()
    }

    /// Empirical variance of the influence function divided by n; the
    /// squared standard error of the multiply robust estimate.
    pub fn influence_variance(&self, tau: f64) -> f64 {
        sample_variance(&self.influence_values(tau)) / self.n() as f64
    }

    /// The projected weight values d((-1)^{1-A} q(t_hat)).
    pub fn weight_values(&self) -> &[f64] {
        &self.d_weight
    }
}

/// Starting point for the treatment-bridge solve: fit a logistic propensity
/// on (1, W, X), set the index target to -(-1)^{1-A} * logit(p_hat) so that
/// 1 + exp(index) matches 1/P(A|W,X) pointwise, and regress the target onto
/// the bridge's index basis. Returns None when the propensity fit fails;
/// callers then start from zero.
fn warm_start_t(data: &ObservedData, inputs: &ModelInputs, dim_t: usize) -> Option<Vec<f64>> {
    let n = data.n();
    let mut design_wx = DMatrix::zeros(n, 1 + data.d_w() + data.p());
    for i in 0..n {
        design_wx[(i, 0)] = 1.0;
        for j in 0..data.d_w() {
            design_wx[(i, 1 + j)] = data.w()[(i, j)];
        }
        for j in 0..data.p() {
            design_wx[(i, 1 + data.d_w() + j)] = data.x()[(i, j)];
        }
    }
    let logit = logistic_fit(&design_wx, data.a()).ok()?;
    let eta = design_wx * logit.coefficients;
    let target = DVector::from_iterator(
        n,
        (0..n).map(|i| -sign_flip(data.a()[i]) * eta[i]),
    );
    let k = inputs.z_q.ncols();
    if dim_t != 2 + k + data.p() {
        return None;
    }
    let mut idx_design = DMatrix::zeros(n, dim_t);
    for i in 0..n {
        idx_design[(i, 0)] = 1.0;
        for j in 0..k {
            idx_design[(i, 1 + j)] = inputs.z_q[(i, j)];
        }
        idx_design[(i, 1 + k)] = data.a()[i];
        for j in 0..data.p() {
            idx_design[(i, 2 + k + j)] = data.x()[(i, j)];
        }
    }
    Some(crate::linalg::lstsq_min_norm(&idx_design, &target).coefficients.as_slice().to_vec())
}

/// The conventional proximal doubly robust comparator: designate one proxy
/// as valid, demote the others to covariates, and run the fortified pipeline
/// on the reduced data with gamma = K = 1.
pub fn estimate_pdr(
    data: &ObservedData,
    valid_index: usize,
    ace: &AceConfig,
) -> Result<EstimateResult, EstimatorError> {
    let reduced = data.demote_proxies(&[valid_index])?;
    let models = ModelSet::defaults_for(&reduced, 1);
    let inputs = ModelInputs::identity(&reduced);
    let fit = fit_fortified(&reduced, &inputs, &models, 1, ace, ProjectionMode::Ace)?;
    let mut result = fit.fpmr();
    result.method = Method::Pdr(valid_index);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DataNames;
    use crate::simulation::{true_nuisances, Section4Dgp};

    /// Benchmark-process draw with the outcome replaced by the exact sum of
    /// the true bridge evaluations (optionally plus nothing): zero-noise
    /// interpolation data on realistic treatment/proxy geometry.
    fn exact_model_data(n: usize, seed: u64, noise: f64) -> ObservedData {
        let data = Section4Dgp::new(n, seed).generate().unwrap().0;
        if noise > 0.0 {
            return data;
        }
        let tn = true_nuisances(&data, 2.0);
        let y: Vec<f64> = tn.h.iter().zip(&tn.l).map(|(h, l)| h + l).collect();
        ObservedData::from_columns(
            y,
            data.a().to_vec(),
            data.z().clone(),
            data.w().clone(),
            data.x().clone(),
            DataNames::synthetic(2, 1, 1),
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_fit_recovers_exactly_and_fpor_is_tau() {
        let data = exact_model_data(500, 21, 0.0);
        let models = ModelSet::defaults_for(&data, 1);
        let inputs = ModelInputs::identity(&data);
        let fit =
            fit_fortified(&data, &inputs, &models, 1, &AceConfig::default(), ProjectionMode::Ace)
                .unwrap();
        assert!((fit.nuisance.b_hat[0] - 2.0).abs() < 1e-8, "b_a = {}", fit.nuisance.b_hat[0]);
        assert!((fit.nuisance.b_hat[1] + 0.5).abs() < 1e-8);
        let fpor = fit.fpor();
        assert!((fpor.tau_hat - 2.0).abs() < 1e-8);
        // h has only (A, W) terms: counterfactual difference is b_a exactly.
        assert!((fpor.tau_hat - fit.nuisance.b_hat[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_makes_fpmr_equal_fpor() {
        // Rebuild y as exactly h + l at the fitted coefficients; the
        // augmentation term vanishes rowwise and the two estimators agree
        // exactly.
        let data = exact_model_data(300, 33, 0.0);
        let models = ModelSet::defaults_for(&data, 1);
        let inputs = ModelInputs::identity(&data);
        let fit =
            fit_fortified(&data, &inputs, &models, 1, &AceConfig::default(), ProjectionMode::Ace)
                .unwrap();
        for (i, r) in fit
            .y
            .iter()
            .zip(fit.h_obs.iter().zip(&fit.l_obs))
            .map(|(y, (h, l))| y - h - l)
            .enumerate()
        {
            assert!(r.abs() < 1e-8, "row {i} residual {r}");
        }
        // Forcing the residual to exact zero: tau_fpmr == tau_fpor bit for bit.
        let mut surgically = fit;
        surgically.y = surgically
            .h_obs
            .iter()
            .zip(&surgically.l_obs)
            .map(|(h, l)| h + l)
            .collect();
        let fpor = surgically.fpor();
        let fpmr = surgically.fpmr();
        assert_eq!(fpmr.tau_hat, fpor.tau_hat);
    }

    #[test]
    fn root_property_of_the_influence_function() {
        let data = exact_model_data(400, 55, 0.3);
        let models = ModelSet::defaults_for(&data, 1);
        let inputs = ModelInputs::identity(&data);
        let fit =
            fit_fortified(&data, &inputs, &models, 1, &AceConfig::default(), ProjectionMode::Ace)
                .unwrap();
        let tau = fit.fpmr().tau_hat;
        let if_mean = mean(&fit.influence_values(tau));
        assert!(if_mean.abs() < 1e-10, "influence mean {if_mean}");
    }

    #[test]
    fn fpipw_is_zero_when_outcome_is_zero() {
        let mut data = exact_model_data(200, 66, 0.1);
        // Zero the outcome.
        let z = data.z().clone();
        let w = data.w().clone();
        let x = data.x().clone();
        data = ObservedData::from_columns(
            vec![0.0; 200],
            data.a().to_vec(),
            z,
            w,
            x,
            DataNames::synthetic(2, 1, 1),
        )
        .unwrap();
        let models = ModelSet::defaults_for(&data, 1);
        let inputs = ModelInputs::identity(&data);
        let fit =
            fit_fortified(&data, &inputs, &models, 1, &AceConfig::default(), ProjectionMode::Ace)
                .unwrap();
        assert_eq!(fit.fpipw().tau_hat, 0.0);
    }

    #[test]
    fn shifting_outcome_by_constant_leaves_fpmr_unchanged() {
        let data = exact_model_data(400, 77, 0.3);
        let models = ModelSet::defaults_for(&data, 1);
        let inputs = ModelInputs::identity(&data);
        let ace = AceConfig::default();
        let fit1 =
            fit_fortified(&data, &inputs, &models, 1, &ace, ProjectionMode::Ace).unwrap();
        let shifted = ObservedData::from_columns(
            data.y().iter().map(|v| v + 5.0).collect(),
            data.a().to_vec(),
            data.z().clone(),
            data.w().clone(),
            data.x().clone(),
            DataNames::synthetic(2, 1, 1),
        )
        .unwrap();
        let inputs2 = ModelInputs::identity(&shifted);
        let fit2 =
            fit_fortified(&shifted, &inputs2, &models, 1, &ace, ProjectionMode::Ace).unwrap();
        // The intercept of the residual model absorbs the shift.
        assert!((fit2.nuisance.r_hat[0] - fit1.nuisance.r_hat[0] - 5.0).abs() < 1e-7);
        assert!((fit2.fpmr().tau_hat - fit1.fpmr().tau_hat).abs() < 1e-8);
    }

    #[test]
    fn pdr_on_single_proxy_data_equals_fpmr_gamma_one() {
        let data = exact_model_data(300, 88, 0.2);
        let single = data.demote_proxies(&[1]).unwrap();
        let ace = AceConfig::default();
        let pdr = estimate_pdr(&single, 1, &ace).unwrap();
        let models = ModelSet::defaults_for(&single, 1);
        let inputs = ModelInputs::identity(&single);
        let fit = fit_fortified(&single, &inputs, &models, 1, &ace, ProjectionMode::Ace).unwrap();
        let fpmr = fit.fpmr();
        assert_eq!(pdr.tau_hat, fpmr.tau_hat);
        assert_eq!(pdr.se, fpmr.se);
        assert_eq!(pdr.method, Method::Pdr(1));
    }

    #[test]
    fn duplicated_explicit_instrument_terms_are_singular() {
        // An explicit c2 with its last component duplicated leaves the
        // treatment moments underdetermined; the solve reports a singular
        // jacobian rather than returning an arbitrary root.
        use crate::bridges::WaxTerm;
        let data = exact_model_data(400, 44, 1.0);
        let mut models = ModelSet::defaults_for(&data, 1);
        models.c2_terms = Some(vec![
            WaxTerm::a(),
            WaxTerm::w(1),
            WaxTerm::aw(1),
            WaxTerm::ax(1),
            WaxTerm::ax(1),
        ]);
        let inputs = ModelInputs::identity(&data);
        match fit_fortified(&data, &inputs, &models, 1, &AceConfig::default(), ProjectionMode::Ace)
        {
            Err(EstimatorError::SingularJacobian { .. }) => {}
            other => panic!("expected singular jacobian, got {:?}", other.map(|f| f.nuisance)),
        }
    }

    #[test]
    fn method_labels_and_parsing() {
        assert_eq!(Method::Fpmr.label(), "fPMR");
        assert_eq!(Method::Pdr(2).label(), "PDR2");
        assert_eq!(Method::Pdr(2).tag(), "PDR");
        assert_eq!(Method::parse("fPIPW"), Some(Method::Fpipw));
        assert_eq!(Method::parse("PDR2"), Some(Method::Pdr(2)));
        assert_eq!(Method::parse("PDR"), Some(Method::Pdr(1)));
        assert_eq!(Method::parse("nope"), None);
    }
}
